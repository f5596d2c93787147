"""Time stepping of the stochastic Navier-Stokes system and its nudged companion.

The scheme is semi-implicit Euler-Maruyama: diffusion (and the low-mode
nudging term) implicit, nonlinearity and noise explicit with the noise
coefficient frozen at the left endpoint.  A pair (u, v) always consumes the
same Wiener increments.  Ensembles are advanced as batched arrays; each
trajectory owns a PCG64 stream derived from (seed, index), so results do not
depend on how trajectories are grouped into batches or workers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IntegrationBlowup
from .noise import NoiseModel, growth_constants
from .spectral import Basis, SpectralField, build_basis

NUDGE_MODES = ("off", "nudged", "nudged_stopped")
CHUNK_SIZE = 128
RNG_BLOCK = 64


@dataclass(frozen=True)
class NudgeConfig:
    mode: str = "off"
    N: int = 1
    lam: Optional[float] = None  # None -> nu * lambda_N / 2
    girsanov_K: float = math.inf

    def __post_init__(self):
        if self.mode not in NUDGE_MODES:
            raise ConfigError(f"nudge.mode must be one of {NUDGE_MODES}, got {self.mode!r}")
        if self.lam is not None and self.lam < 0:
            raise ConfigError(f"nudge.lambda={self.lam} must be >= 0")
        if self.mode != "off" and self.lam is not None and self.lam <= 0:
            raise ConfigError("nudge.lambda must be > 0 when nudging is enabled")
        if self.girsanov_K < 0:
            raise ConfigError(f"nudge.girsanov_K={self.girsanov_K} must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    nu: float
    dt: float
    T: float
    kmax: int
    forcing: np.ndarray
    noise: Optional[NoiseModel] = None
    nudge: NudgeConfig = NudgeConfig()
    seed: int = 0
    ensemble_size: int = 1
    tau_monitors: tuple = ()
    sample_stride: int = 1
    obs_modes: Optional[int] = None  # low-mode coefficients kept in logs; None -> 2N
    snapshot_times: tuple = ()
    blowup_ceiling: float = 1e12

    def __post_init__(self):
        basis = build_basis(self.kmax)
        f = np.asarray(self.forcing, dtype=float)
        if f.shape != (basis.total_dim,):
            raise ConfigError(f"forcing has shape {f.shape}, expected ({basis.total_dim},)")
        f = f.copy()
        f.setflags(write=False)
        object.__setattr__(self, "forcing", f)
        object.__setattr__(self, "tau_monitors", tuple((float(r), float(b)) for r, b in self.tau_monitors))
        object.__setattr__(self, "snapshot_times", tuple(float(s) for s in self.snapshot_times))
        if not self.nu > 0:
            raise ConfigError(f"dynamics.nu={self.nu} must be > 0")
        if not self.dt > 0:
            raise ConfigError(f"dynamics.dt={self.dt} must be > 0")
        if self.dt > self.T:
            raise ConfigError(f"dynamics.dt={self.dt} exceeds horizon T={self.T}")
        if self.ensemble_size < 1:
            raise ConfigError("experiment.ensemble_size must be >= 1")
        if not 1 <= self.nudge.N <= basis.total_dim:
            raise ConfigError(f"nudge.N={self.nudge.N} outside [1, {basis.total_dim}]")
        if self.noise is not None:
            self.noise.validate(basis)
            if self.nudge.mode != "off" and self.nudge.N > self.noise.M:
                raise ConfigError(
                    f"nudge.N={self.nudge.N} > noise.M={self.noise.M}, violates M >= N "
                    "required for the shift g(v) P_N (u - v) to exist")
        n = self.n_steps
        if not math.isclose(n * self.dt, self.T, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigError(f"T={self.T} is not an integer multiple of dt={self.dt}")
        if self.sample_stride < 1 or n % self.sample_stride:
            raise ConfigError(f"sample_stride={self.sample_stride} must divide the step count {n}")
        for s in self.snapshot_times:
            k = round(s / self.dt)
            if not 0 <= k <= n or not math.isclose(k * self.dt, s, rel_tol=1e-9, abs_tol=1e-12):
                raise ConfigError(f"snapshot time {s} is not a grid time in [0, T]")

    @property
    def basis(self) -> Basis:
        return build_basis(self.kmax)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def lam(self) -> float:
        """Effective nudging gain (0 when nudging is off)."""
        if self.nudge.mode == "off":
            return 0.0
        if self.nudge.lam is None:
            return 0.5 * self.nu * self.basis.eigenvalue(self.nudge.N)
        return float(self.nudge.lam)

    @property
    def L_G(self) -> float:
        return 0.0 if self.noise is None else growth_constants(self.noise).L_G

    @property
    def n_obs(self) -> int:
        n = 2 * self.nudge.N if self.obs_modes is None else self.obs_modes
        return min(n, self.basis.total_dim)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = {
            "nu": self.nu, "dt": self.dt, "T": self.T, "kmax": self.kmax,
            "forcing": [float(x) for x in self.forcing],
            "noise": None if self.noise is None else dataclasses.asdict(self.noise),
            "nudge": dataclasses.asdict(self.nudge),
            "seed": self.seed, "ensemble_size": self.ensemble_size,
            "tau_monitors": [list(m) for m in self.tau_monitors],
            "sample_stride": self.sample_stride, "obs_modes": self.obs_modes,
            "snapshot_times": list(self.snapshot_times),
            "blowup_ceiling": self.blowup_ceiling,
        }
        if d["nudge"]["girsanov_K"] == math.inf:
            d["nudge"]["girsanov_K"] = "inf"
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_dt(basis: Basis, nu: float, lam: float = 0.0, u0=None) -> float:
    """Step-size rule min(0.1/(nu lambda_max), 0.1/lam, CFL from u0)."""
    bounds = [0.1 / (nu * basis.eigenvalues[-1])]
    if lam > 0:
        bounds.append(0.1 / lam)
    if u0 is not None:
        # |u|_inf <= c * sum |a_j|
        umax = np.sum(np.abs(np.asarray(u0))) / (np.pi * np.sqrt(2.0))
        if umax > 0:
            bounds.append(0.5 * (2 * np.pi / basis.grid_size) / umax)
    return float(min(bounds))


def check_dt(cfg: SimConfig, u0=None):
    rule = default_dt(cfg.basis, cfg.nu, cfg.lam, u0)
    if cfg.dt > rule:
        warnings.warn(f"dt={cfg.dt:g} exceeds the recommended step {rule:.3g}", stacklevel=2)


def shell_complete_N(basis: Basis, nu: float, L_G: float) -> int:
    """Smallest N closing an eigenvalue shell with nu lambda_N / 4 > L_G^2."""
    for lam in np.unique(basis.eigenvalues):
        if nu * lam / 4.0 > L_G**2:
            return basis.shell_count(lam)
    return basis.total_dim


# ----------------------------------------------------------------------
# random streams

def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def draw_increments(rng: np.random.Generator, k_noise: int, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError(f"dt={dt} must be > 0")
    return rng.standard_normal(k_noise) * math.sqrt(dt)


class _BlockStream:
    """Per-trajectory Wiener increments drawn RNG_BLOCK steps at a time.

    Drawing a (block, k) array consumes the generator exactly like block
    successive length-k draws, so a stream can be restored from the state at
    the start of the current block plus the offset into it.
    """

    def __init__(self, rng, k, dt):
        self.rng, self.k, self.scale = rng, k, math.sqrt(dt)
        self.block_state = None
        self.buf = None
        self.offset = RNG_BLOCK

    def next(self):
        if self.offset == RNG_BLOCK:
            self.block_state = self.rng.bit_generator.state
            self.buf = self.rng.standard_normal((RNG_BLOCK, self.k)) * self.scale
            self.offset = 0
        row = self.buf[self.offset]
        self.offset += 1
        return row

    def get_state(self):
        if self.block_state is None or self.offset == RNG_BLOCK:
            return {"block_state": self.rng.bit_generator.state, "offset": RNG_BLOCK}
        return {"block_state": self.block_state, "offset": self.offset}

    def set_state(self, st):
        self.rng.bit_generator.state = st["block_state"]
        if st["offset"] == RNG_BLOCK:
            self.block_state, self.buf, self.offset = None, None, RNG_BLOCK
        else:
            self.offset = RNG_BLOCK
            self.next()
            self.offset = st["offset"]


# ----------------------------------------------------------------------
# single-step kernels on batched arrays

class _Stepper:
    """Precomputed diagonal factors for one configuration."""

    def __init__(self, cfg: SimConfig):
        b = cfg.basis
        self.cfg = cfg
        self.basis = b
        self.f = np.asarray(cfg.forcing)
        self.N = cfg.nudge.N
        self.lam = cfg.lam
        self.low = np.arange(b.total_dim) < self.N
        self.den_u = 1.0 + cfg.nu * cfg.dt * b.eigenvalues
        self.den_v_nudged = self.den_u + self.lam * cfg.dt * self.low
        self.lam_N = b.eigenvalue(self.N)
        self.tau_R = np.array([m[0] for m in cfg.tau_monitors], dtype=float)
        self.tau_beta = np.array([m[1] for m in cfg.tau_monitors], dtype=float)
        self.tau_slope = cfg.L_G**2 - cfg.nu * self.lam_N / 4.0
        if cfg.noise is not None and cfg.nudge.mode != "off":
            self.alpha_low = cfg.noise.alpha[: self.N]

    def rhs(self, u, dW, nl=None):
        """Explicit part u + dt (f - B(u, u)) + G(u) dW."""
        cfg = self.cfg
        if nl is None:
            nl = self.basis.nonlinear(u)
        r = u + cfg.dt * (self.f - nl)
        if dW is not None:
            r = r + cfg.noise.noise_coeffs(u, dW)
        return r

    def advance_u(self, u, dW, nl=None):
        return self.rhs(u, dW, nl) / self.den_u

    def advance_v(self, v, u_next, dW, nudging, nl=None, rhs_u=None):
        """nudging: bool array over the batch (True -> low-mode feedback on).

        The nudged solve (den + lam dt) v' = rhs_v + lam dt u' is evaluated as
        v' = u' + (rhs_v - rhs_u) / (den + lam dt), which is algebraically the
        same and exact when the two copies coincide.
        """
        rhs = self.rhs(v, dW, nl)
        if self.lam == 0.0:
            return rhs / self.den_u
        if rhs_u is None:
            rhs_u = u_next * self.den_u
        on = nudging[:, None]
        nudged = u_next + (rhs - rhs_u) / self.den_v_nudged
        return np.where(on & self.low, nudged, rhs / self.den_u)

    def shift_sq(self, u, v, active):
        """||h||^2 with h = lam g(v) P_N (u - v), zeroed where inactive."""
        if self.lam == 0.0 or self.cfg.noise is None:
            return np.zeros(u.shape[0])
        d = (u - v)[:, : self.N]
        s = self.cfg.noise.sigma(v)
        h2 = self.lam**2 * np.sum((d / self.alpha_low) ** 2, axis=-1) / s**2
        return np.where(active, h2, 0.0)


def step_single(u: SpectralField, cfg: SimConfig, dW=None) -> SpectralField:
    """One semi-implicit Euler-Maruyama step of the uncontrolled equation."""
    if u.basis != cfg.basis:
        raise ConfigError("state and configuration use different bases")
    st = _Stepper(cfg)
    dW = None if cfg.noise is None or dW is None else np.asarray(dW, float)[None]
    out = st.advance_u(u.coeffs[None], dW)[0]
    _check_finite(out, cfg, t=None, index=None)
    return SpectralField(u.basis, out)


def _check_finite(coeffs, cfg, t, index):
    e = np.sum(coeffs * coeffs, axis=-1)
    bad = ~(np.all(np.isfinite(coeffs), axis=-1) & (e <= cfg.blowup_ceiling))
    if np.any(bad):
        first = int(np.flatnonzero(np.atleast_1d(bad))[0])
        idx = None if index is None else int(index[first])
        raise IntegrationBlowup("energy left the admissible region", time=t, trajectory=idx)


@dataclass
class PairState:
    t: float
    u: SpectralField
    v: SpectralField
    accum_v_norm: float = 0.0
    accum_lowdiff: float = 0.0
    accum_shift: float = 0.0
    accum_fu: float = 0.0
    sigma_triggered: bool = False
    sigma_time: float = math.nan
    sigma_accum: float = math.nan  # accum_lowdiff at the trigger time
    tau_flags: tuple = ()
    tau_times: tuple = ()

    @classmethod
    def initial(cls, cfg: SimConfig, u0: SpectralField, v0: SpectralField):
        m = len(cfg.tau_monitors)
        st = cls(0.0, u0, v0, tau_flags=(False,) * m, tau_times=(math.nan,) * m)
        return st._reflag(cfg, _Stepper(cfg))

    def _reflag(self, cfg, stp):
        acc = np.array([self.accum_v_norm])
        tf, tt = _tau_update(stp, acc, self.t, np.array([self.tau_flags], dtype=bool).reshape(1, -1),
                             np.array([self.tau_times], dtype=float).reshape(1, -1))
        self.tau_flags = tuple(bool(x) for x in tf[0])
        self.tau_times = tuple(float(x) for x in tt[0])
        if not self.sigma_triggered and _sigma_hit(cfg, self.accum_lowdiff):
            self.sigma_triggered, self.sigma_time, self.sigma_accum = True, self.t, self.accum_lowdiff
        return self


def _sigma_hit(cfg, acc):
    # K = 0 fires on the first nonzero low-mode difference, never on identical copies
    return (acc >= cfg.nudge.girsanov_K) & (acc > 0)


def _tau_update(stp, accum_v, t, flags, times):
    if flags.shape[1] == 0:
        return flags, times
    val = accum_v[:, None] / stp.cfg.nu + stp.tau_slope * t - stp.tau_beta
    hit = (val >= stp.tau_R) & ~flags
    times = np.where(hit, t, times)
    return flags | hit, times


def compute_shift(state: PairState, cfg: SimConfig) -> np.ndarray:
    """h = lam g(v) P_N (u - v); zero once sigma_K has triggered."""
    if cfg.noise is None:
        raise ConfigError("the shift needs a noise model")
    if cfg.nudge.N > cfg.noise.M:
        raise ConfigError(f"nudge.N={cfg.nudge.N} > noise.M={cfg.noise.M}")
    k = cfg.noise.k_noise
    if state.sigma_triggered or cfg.lam == 0.0:
        return np.zeros(k)
    d = np.zeros_like(state.u.coeffs)
    d[: cfg.nudge.N] = (state.u.coeffs - state.v.coeffs)[: cfg.nudge.N]
    return cfg.lam * cfg.noise.pseudo_inverse(state.v.coeffs, d)


def monitor_tau(state: PairState, cfg: SimConfig, monitor) -> bool:
    """Threshold functional of the growth stopping time at the current grid time."""
    R, beta = monitor
    lam_N = cfg.basis.eigenvalue(cfg.nudge.N)
    val = state.accum_v_norm / cfg.nu + (cfg.L_G**2 - cfg.nu * lam_N / 4.0) * state.t - beta
    return bool(val >= R)


def monitor_sigma(state: PairState, cfg: SimConfig) -> bool:
    if math.isinf(cfg.nudge.girsanov_K):
        return False
    return bool(state.sigma_triggered or _sigma_hit(cfg, state.accum_lowdiff))


def step_pair(state: PairState, cfg: SimConfig, dW=None) -> PairState:
    """Advance (u, v) by one step with shared increments dW."""
    stp = _Stepper(cfg)
    u, v = state.u.coeffs[None], state.v.coeffs[None]
    dW = None if cfg.noise is None or dW is None else np.asarray(dW, float)[None]
    nudging = np.array([cfg.nudge.mode == "nudged" or
                        (cfg.nudge.mode == "nudged_stopped" and not state.sigma_triggered)])
    active = np.array([not state.sigma_triggered])
    b = cfg.basis
    d = u - v
    acc_v = state.accum_v_norm + cfg.dt * float(b.norm_v_sq(u)[0])
    acc_low = state.accum_lowdiff + cfg.dt * float(np.sum(d[:, : cfg.nudge.N] ** 2))
    acc_h = state.accum_shift + cfg.dt * float(stp.shift_sq(u, v, active)[0])
    acc_fu = state.accum_fu + cfg.dt * float(u[0] @ stp.f)
    rhs_u = stp.rhs(u, dW)
    un = rhs_u / stp.den_u
    vn = stp.advance_v(v, un, dW, nudging, rhs_u=rhs_u)
    t = state.t + cfg.dt
    _check_finite(un, cfg, t, None)
    _check_finite(vn, cfg, t, None)
    new = dataclasses.replace(state, t=t, u=SpectralField(b, un[0]), v=SpectralField(b, vn[0]),
                              accum_v_norm=acc_v, accum_lowdiff=acc_low,
                              accum_shift=acc_h, accum_fu=acc_fu)
    return new._reflag(cfg, stp)


# ----------------------------------------------------------------------
# logs and ensemble driver

LOG_SERIES = ("u_h2", "u_v2", "v_h2", "diff_h2", "lowdiff_h2", "f_u",
              "accum_v", "accum_low", "accum_shift", "accum_fu")


@dataclass
class TrajectoryLog:
    index: int
    times: np.ndarray
    series: dict
    u_obs: np.ndarray          # (n_samples, n_obs) low-mode coefficients of u
    sigma_flag: np.ndarray     # (n_samples,) bool
    tau_flags: np.ndarray      # (n_samples, n_monitors) bool
    sigma_time: float
    sigma_accum: float
    tau_times: np.ndarray
    snapshots: dict = field(default_factory=dict)  # time -> (u, v) coefficient arrays

    def __getattr__(self, name):
        series = self.__dict__.get("series")
        if series is not None and name in series:
            return series[name]
        raise AttributeError(name)

    def equals(self, other) -> bool:
        return (self.index == other.index and np.array_equal(self.times, other.times)
                and all(np.array_equal(self.series[k], other.series[k], equal_nan=True) for k in LOG_SERIES)
                and np.array_equal(self.u_obs, other.u_obs)
                and np.array_equal(self.sigma_flag, other.sigma_flag)
                and np.array_equal(self.tau_flags, other.tau_flags)
                and np.array_equal(self.tau_times, other.tau_times, equal_nan=True)
                and np.array_equal([self.sigma_time, self.sigma_accum],
                                   [other.sigma_time, other.sigma_accum], equal_nan=True)
                and self.snapshots.keys() == other.snapshots.keys()
                and all(np.array_equal(self.snapshots[k][i], other.snapshots[k][i], equal_nan=True)
                        for k in self.snapshots for i in (0, 1)))


class ChunkRunner:
    """A fixed group of trajectories advanced together as one batch.

    ``v0=None`` runs the uncontrolled equation alone; pair series are NaN.
    """

    def __init__(self, cfg: SimConfig, u0, v0, indices):
        self.cfg = cfg
        self.stp = _Stepper(cfg)
        self.indices = np.asarray(indices, dtype=np.int64)
        B = len(self.indices)
        dim = cfg.basis.total_dim
        self.pair = v0 is not None
        self.u = np.broadcast_to(np.asarray(u0, float), (B, dim)).copy()
        self.v = np.broadcast_to(np.asarray(v0, float), (B, dim)).copy() if self.pair else None
        self.step = 0
        self.acc = {k: np.zeros(B) for k in ("accum_v", "accum_low", "accum_shift", "accum_fu")}
        self.sigma = np.zeros(B, dtype=bool)
        self.sigma_time = np.full(B, np.nan)
        self.sigma_accum = np.full(B, np.nan)
        m = len(cfg.tau_monitors)
        self.tau = np.zeros((B, m), dtype=bool)
        self.tau_time = np.full((B, m), np.nan)
        self.streams = None
        if cfg.noise is not None:
            self.streams = [_BlockStream(trajectory_rng(cfg.seed, int(i)), cfg.noise.k_noise, cfg.dt)
                            for i in self.indices]
        self.records = {k: [] for k in LOG_SERIES}
        self.rec_t, self.rec_obs, self.rec_sigma, self.rec_tau = [], [], [], []
        self.snapshots = {}
        self._snap_steps = {int(round(s / cfg.dt)): s for s in cfg.snapshot_times}
        self._update_flags()

    @property
    def t(self):
        return self.step * self.cfg.dt

    def _instant(self):
        b = self.cfg.basis
        u = self.u
        q = {"u_h2": b.norm_h_sq(u), "u_v2": b.norm_v_sq(u), "f_u": u @ self.stp.f}
        if self.pair:
            d = u - self.v
            q["v_h2"] = b.norm_h_sq(self.v)
            q["diff_h2"] = b.norm_h_sq(d)
            q["lowdiff_h2"] = np.sum(d[:, : self.stp.N] ** 2, axis=-1)
        else:
            nan = np.full(len(u), np.nan)
            q.update(v_h2=nan, diff_h2=nan, lowdiff_h2=nan)
        return q

    def _record(self, q):
        for k in ("u_h2", "u_v2", "v_h2", "diff_h2", "lowdiff_h2", "f_u"):
            self.records[k].append(q[k])
        for k, a in self.acc.items():
            self.records[k].append(a.copy())
        self.rec_t.append(self.t)
        self.rec_obs.append(self.u[:, : self.cfg.n_obs].copy())
        self.rec_sigma.append(self.sigma.copy())
        self.rec_tau.append(self.tau.copy())
        if self.step in self._snap_steps:
            v = self.v.copy() if self.pair else np.full_like(self.u, np.nan)
            self.snapshots[self._snap_steps[self.step]] = (self.u.copy(), v)

    def _update_flags(self):
        t = self.t
        self.tau, self.tau_time = _tau_update(self.stp, self.acc["accum_v"], t, self.tau, self.tau_time)
        if self.pair and not math.isinf(self.cfg.nudge.girsanov_K):
            hit = _sigma_hit(self.cfg, self.acc["accum_low"]) & ~self.sigma
            self.sigma_time = np.where(hit, t, self.sigma_time)
            self.sigma_accum = np.where(hit, self.acc["accum_low"], self.sigma_accum)
            self.sigma |= hit

    def advance(self, until_step: int):
        cfg, stp = self.cfg, self.stp
        dt = cfg.dt
        stride = cfg.sample_stride
        mode = cfg.nudge.mode
        while self.step < until_step:
            q = self._instant()
            if self.step % stride == 0:
                self._record(q)
            dW = None
            if self.streams is not None:
                dW = np.stack([s.next() for s in self.streams])
            self.acc["accum_v"] = self.acc["accum_v"] + dt * q["u_v2"]
            self.acc["accum_fu"] = self.acc["accum_fu"] + dt * q["f_u"]
            if self.pair:
                # one transform batch for both copies; slices are independent
                nl_u, nl_v = self.cfg.basis.nonlinear(np.stack((self.u, self.v)))
            else:
                nl_u = self.cfg.basis.nonlinear(self.u)
            rhs_u = stp.rhs(self.u, dW, nl_u)
            un = rhs_u / stp.den_u
            if self.pair:
                self.acc["accum_low"] = self.acc["accum_low"] + dt * q["lowdiff_h2"]
                self.acc["accum_shift"] = self.acc["accum_shift"] + dt * stp.shift_sq(self.u, self.v, ~self.sigma)
                nudging = np.full(len(un), mode == "nudged") | ((mode == "nudged_stopped") & ~self.sigma)
                vn = stp.advance_v(self.v, un, dW, nudging, nl_v, rhs_u)
            self.step += 1
            _check_finite(un, cfg, self.t, self.indices)
            self.u = un
            if self.pair:
                _check_finite(vn, cfg, self.t, self.indices)
                self.v = vn
            self._update_flags()
        if self.step == cfg.n_steps and (not self.rec_t or self.rec_t[-1] < self.t):
            self._record(self._instant())
        return self

    def logs(self) -> list:
        cfg = self.cfg
        out = []
        series = {k: np.array(v) for k, v in self.records.items()}
        obs = np.array(self.rec_obs)
        sig = np.array(self.rec_sigma)
        tau = np.array(self.rec_tau)
        times = np.array(self.rec_t)
        for j, i in enumerate(self.indices):
            snaps = {s: (uu[j].copy(), vv[j].copy()) for s, (uu, vv) in self.snapshots.items()}
            out.append(TrajectoryLog(
                index=int(i), times=times.copy(),
                series={k: a[:, j].copy() for k, a in series.items()},
                u_obs=obs[:, j].copy(), sigma_flag=sig[:, j].copy(),
                tau_flags=tau[:, j].reshape(len(times), -1).copy(),
                sigma_time=float(self.sigma_time[j]), sigma_accum=float(self.sigma_accum[j]),
                tau_times=self.tau_time[j].copy(), snapshots=snaps))
        return out

    # -- checkpoint support ------------------------------------------------

    def get_state(self) -> dict:
        return {
            "indices": self.indices, "step": self.step, "pair": self.pair,
            "u": self.u, "v": self.v, "acc": self.acc,
            "sigma": self.sigma, "sigma_time": self.sigma_time, "sigma_accum": self.sigma_accum,
            "tau": self.tau, "tau_time": self.tau_time,
            "rng": None if self.streams is None else [s.get_state() for s in self.streams],
            "records": self.records, "rec_t": self.rec_t, "rec_obs": self.rec_obs,
            "rec_sigma": self.rec_sigma, "rec_tau": self.rec_tau, "snapshots": self.snapshots,
        }

    @classmethod
    def from_state(cls, cfg: SimConfig, st: dict) -> "ChunkRunner":
        dim = cfg.basis.total_dim
        self = cls(cfg, np.zeros(dim), np.zeros(dim) if st["pair"] else None, st["indices"])
        for k in ("step", "u", "v", "acc", "sigma", "sigma_time", "sigma_accum", "tau", "tau_time",
                  "records", "rec_t", "rec_obs", "rec_sigma", "rec_tau", "snapshots"):
            setattr(self, k, st[k])
        if self.streams is not None:
            for s, rs in zip(self.streams, st["rng"]):
                s.set_state(rs)
        return self


def _chunks(n, size=CHUNK_SIZE):
    return [np.arange(a, min(a + size, n)) for a in range(0, n, size)]


def _run_chunk(args):
    cfg, u0, v0, idx = args
    return ChunkRunner(cfg, u0, v0, idx).advance(cfg.n_steps).logs()


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("STOCHNS_WORKERS", "1")))
    except ValueError:
        raise ConfigError("STOCHNS_WORKERS must be an integer") from None


def _coeffs(x):
    if x is None:
        return None
    return x.coeffs if isinstance(x, SpectralField) else np.asarray(x, float)


def run_ensemble(cfg: SimConfig, u0, v0=None, workers: Optional[int] = None,
                 indices: Optional[Sequence[int]] = None) -> list:
    """Simulate ``cfg.ensemble_size`` trajectories and return their logs in index order.

    Trajectory i draws its increments from a stream keyed by (seed, i); the
    batch layout and the number of worker processes do not affect results.
    """
    u0, v0 = _coeffs(u0), _coeffs(v0)
    for x in (u0, v0):
        if x is not None:
            cfg.basis.check(x)
    n = cfg.ensemble_size if indices is None else None
    groups = _chunks(n) if indices is None else [np.asarray(indices)[a:a + CHUNK_SIZE]
                                                 for a in range(0, len(indices), CHUNK_SIZE)]
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, u0, v0, g) for g in groups]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, jobs))
    else:
        parts = [_run_chunk(j) for j in jobs]
    return [log for part in parts for log in part]
