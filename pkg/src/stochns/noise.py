"""Diagonal multiplicative noise G(u) e_j = phi_j(u) e_j with phi_j = sigma(u) / (j + 1).

The noise index is identified with the basis index (U = H), so G and its
low-mode pseudo-inverse g are diagonal in coefficient space.  The amplitude
depends on the state only through r = ||u||_H.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BasisMismatchError, ConfigError
from .spectral import SpectralField

GROWTH_CLASSES = ("bounded", "sublinear", "linear")


@dataclass(frozen=True)
class GrowthConstants:
    """Growth constants of G on the truncated mode set.

    Only the constants of the model's own class are set; ``linear_pair``
    gives the (K3, K3~) pair that every class satisfies.
    """

    growth_class: str
    S: float
    L_G: float
    K1: Optional[float] = None
    K2: Optional[float] = None
    K2_tilde: Optional[float] = None
    gamma: Optional[float] = None
    K3: Optional[float] = None
    K3_tilde: Optional[float] = None

    def hs_bound(self, r):
        """Upper bound on ||G(u)||_HS as a function of r = ||u||_H."""
        r = np.asarray(r, dtype=float)
        if self.growth_class == "bounded":
            return np.full_like(r, self.K1)
        if self.growth_class == "sublinear":
            return self.K2 + self.K2_tilde * r**self.gamma
        return self.K3 + self.K3_tilde * r

    def linear_pair(self):
        if self.growth_class == "bounded":
            return self.K1, 0.0
        if self.growth_class == "sublinear":
            # r^gamma <= 1 + r
            return self.K2 + self.K2_tilde, self.K2_tilde
        return self.K3, self.K3_tilde


@dataclass(frozen=True)
class NoiseModel:
    growth_class: str
    k_noise: int
    M: int
    gamma: float = 0.5

    def __post_init__(self):
        if self.growth_class not in GROWTH_CLASSES:
            raise ConfigError(f"noise.class must be one of {GROWTH_CLASSES}, got {self.growth_class!r}")
        if self.k_noise < 1:
            raise ConfigError(f"noise.k_noise={self.k_noise} must be >= 1")
        if not 0 <= self.M <= self.k_noise:
            raise ConfigError(f"noise.M={self.M} must satisfy 0 <= M <= k_noise={self.k_noise}")
        if self.growth_class == "sublinear" and not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"noise.gamma={self.gamma} must lie in (0, 1)")

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / np.arange(2, self.k_noise + 2, dtype=float)

    def validate(self, basis):
        if self.k_noise > basis.total_dim:
            raise ConfigError(
                f"noise.k_noise={self.k_noise} exceeds total_dim={basis.total_dim}")

    # -- batched kernels on raw arrays ----------------------------------

    def sigma_of_r2(self, r2):
        """Amplitude profile as a function of ||u||_H^2 (array-friendly)."""
        r2 = np.asarray(r2, dtype=float)
        if self.growth_class == "linear":
            return np.sqrt(r2 + 1.0)
        if self.growth_class == "bounded":
            return np.sqrt(np.minimum(r2, 1.0) + 1.0)
        outer = np.sqrt(np.maximum(r2, 1.0) ** self.gamma + 1.0)
        return np.where(r2 <= 1.0, np.sqrt(r2 + 1.0), outer)

    def sigma(self, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        return self.sigma_of_r2(np.sum(coeffs * coeffs, axis=-1))

    def noise_coeffs(self, coeffs, dW):
        """G(u) dW on raw (..., dim) coefficients with (..., k_noise) increments."""
        coeffs = np.asarray(coeffs, dtype=float)
        dW = np.asarray(dW, dtype=float)
        if dW.shape[-1] != self.k_noise:
            raise ValueError(f"increment length {dW.shape[-1]} != k_noise={self.k_noise}")
        out = np.zeros(np.broadcast_shapes(coeffs.shape[:-1], dW.shape[:-1]) + coeffs.shape[-1:])
        s = self.sigma(coeffs)[..., None]
        out[..., : self.k_noise] = s * self.alpha * dW
        return out

    def pseudo_inverse(self, v_coeffs, w_coeffs):
        """g(v) w on raw arrays: <w, e_j> / phi_j(v) for j < M, zero beyond."""
        v_coeffs = np.asarray(v_coeffs, dtype=float)
        w_coeffs = np.asarray(w_coeffs, dtype=float)
        s = self.sigma(v_coeffs)[..., None]
        out = np.zeros(np.broadcast_shapes(v_coeffs.shape[:-1], w_coeffs.shape[:-1]) + (self.k_noise,))
        out[..., : self.M] = w_coeffs[..., : self.M] / (s * self.alpha[: self.M])
        return out

    def g_inverse_sum(self, v_coeffs):
        """sum_{j<=M} 1/phi_j(v), the bound on the operator norm of g(v)."""
        a = self.alpha[: self.M]
        return np.sum(1.0 / a) / self.sigma(v_coeffs)


def amplitude_profile(model: NoiseModel, u: SpectralField) -> float:
    return float(model.sigma(u.coeffs))


def apply_G(model: NoiseModel, u: SpectralField, dW) -> SpectralField:
    model.validate(u.basis)
    return SpectralField(u.basis, model.noise_coeffs(u.coeffs, dW))


def hs_norm_sq(model: NoiseModel, u: SpectralField) -> float:
    s = amplitude_profile(model, u)
    return float(s * s * np.sum(model.alpha**2))


def apply_g(model: NoiseModel, v: SpectralField, w: SpectralField) -> np.ndarray:
    if v.basis != w.basis:
        raise BasisMismatchError(f"{v.basis!r} vs {w.basis!r}")
    model.validate(v.basis)
    s = amplitude_profile(model, v)
    assert s > 0.0, "amplitude profile must stay positive"
    return model.pseudo_inverse(v.coeffs, w.coeffs)


def growth_constants(model: NoiseModel, basis=None) -> GrowthConstants:
    if basis is not None:
        model.validate(basis)
    S = float(np.sum(model.alpha**2))
    rs, r2s = np.sqrt(S), np.sqrt(2.0 * S)
    if model.growth_class == "bounded":
        return GrowthConstants("bounded", S, rs, K1=r2s)
    if model.growth_class == "sublinear":
        return GrowthConstants("sublinear", S, rs, K2=r2s, K2_tilde=r2s, gamma=model.gamma)
    return GrowthConstants("linear", S, rs, K3=rs, K3_tilde=rs)
