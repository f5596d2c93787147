"""Exception types shared across the package."""


class StochNSError(Exception):
    pass


class BasisMismatchError(StochNSError, ValueError):
    """Two fields (or a field and an operator) live on different bases."""


class ConfigError(StochNSError, ValueError):
    """Invalid configuration or violated load-time precondition."""


class ShrinkWindowError(StochNSError, ValueError):
    """A fit window contains nonpositive values or too few points."""


class IntegrationBlowup(StochNSError, RuntimeError):
    """A trajectory left the admissible region (non-finite or above ceiling)."""

    def __init__(self, message, time=None, trajectory=None):
        super().__init__(message)
        self.time = time
        self.trajectory = trajectory

    def __str__(self):
        msg = super().__str__()
        extra = []
        if self.trajectory is not None:
            extra.append(f"trajectory={self.trajectory}")
        if self.time is not None:
            extra.append(f"t={self.time:.6g}")
        return f"{msg} ({', '.join(extra)})" if extra else msg
