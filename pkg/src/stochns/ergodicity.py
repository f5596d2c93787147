"""Empirical laws of the Markov semigroup and distances between them.

The bounded-Lipschitz (dual-Lipschitz) distance cannot be evaluated exactly;
``dual_lipschitz_lb`` maximises over a finite class of tanh ramps whose
bounded-Lipschitz norm on state space is at most one, so it is a lower bound
for the true distance and is always reported as such.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, stats

from .diagnostics import Table, wilson_interval
from .dynamics import SimConfig, TrajectoryLog, run_ensemble
from .errors import ConfigError
from .noise import growth_constants

MIN_SAMPLES = 30
REGIMES = ("existence", "uniqueness", "stability")
_REGIME_FACTOR = {"existence": 1.0, "uniqueness": 3.0, "stability": 11.0}


# ----------------------------------------------------------------------
# empirical measures

def observable_names(n_obs: int) -> list:
    return ["energy", "enstrophy"] + [f"mode_{j}" for j in range(n_obs)]


@dataclass
class EmpiricalMeasure:
    samples: np.ndarray              # (n, n_observables)
    names: tuple
    kind: str
    provenance: dict = field(default_factory=dict)
    lam_max: float = 1.0             # largest eigenvalue, for the enstrophy Lipschitz bound

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != len(self.names):
            raise ValueError("samples must be (n, len(names))")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite observables")

    @property
    def n(self):
        return self.samples.shape[0]


def _obs_rows(log: TrajectoryLog, sel):
    return np.column_stack([log.series["u_h2"][sel], log.series["u_v2"][sel], log.u_obs[sel]])


def _grid_index(times, t, what="time"):
    i = int(np.argmin(np.abs(times - t)))
    if not math.isclose(times[i], t, rel_tol=1e-9, abs_tol=1e-9):
        raise ValueError(f"{what} {t} is not on the log sample grid")
    return i


def time_average_measure(log: TrajectoryLog, burn_in: float, stride: float, lam_max: float = 1.0,
                         provenance: Optional[dict] = None) -> EmpiricalMeasure:
    """Occupation samples at burn_in, burn_in + stride, ... up to the horizon."""
    t = log.times
    if not burn_in < t[-1]:
        raise ValueError(f"burn_in={burn_in} must be below the horizon {t[-1]}")
    dt_s = t[1] - t[0]
    k = stride / dt_s
    if stride <= 0 or not math.isclose(k, round(k), rel_tol=1e-9):
        raise ValueError(f"stride={stride} must be a positive multiple of the sample spacing {dt_s}")
    i0 = int(np.searchsorted(t, burn_in - 1e-9 * dt_s))
    sel = np.arange(i0, len(t), int(round(k)))
    if len(sel) < MIN_SAMPLES:
        raise ValueError(f"time average holds {len(sel)} samples, need >= {MIN_SAMPLES}")
    names = tuple(observable_names(log.u_obs.shape[1]))
    return EmpiricalMeasure(_obs_rows(log, sel), names, f"time_average(burn_in={burn_in}, stride={stride})",
                            provenance or {}, lam_max)


def ensemble_measure(logs: Sequence[TrajectoryLog], t: float, lam_max: float = 1.0,
                     provenance: Optional[dict] = None) -> EmpiricalMeasure:
    """Law of u(t) across an ensemble."""
    i = _grid_index(logs[0].times, t)
    rows = np.array([_obs_rows(lg, [i])[0] for lg in logs])
    names = tuple(observable_names(logs[0].u_obs.shape[1]))
    return EmpiricalMeasure(rows, names, f"ensemble_at({t})", provenance or {}, lam_max)


# ----------------------------------------------------------------------
# test class and distances

def _sup_r_sech2(c, theta):
    """sup_{r >= 0} c r sech^2(c (r^2 - theta)): Lipschitz constant in r of tanh(c(r^2 - theta))."""
    def neg(r):
        e = np.exp(-2.0 * np.abs(c * (r * r - theta)))   # overflow-safe sech^2
        return -c * r * 4.0 * e / (1.0 + e) ** 2
    hi = math.sqrt(max(theta, 0.0) + 20.0 / c)
    r = np.linspace(0.0, hi, 2001)
    i = int(np.argmin(neg(r)))
    lo_b, hi_b = r[max(i - 1, 0)], r[min(i + 1, len(r) - 1)]
    res = optimize.minimize_scalar(neg, bounds=(lo_b, hi_b), method="bounded",
                                   options={"xatol": 1e-12})
    return max(-res.fun, -neg(r[i]))


@dataclass(frozen=True)
class RampFamily:
    """Ramps s * tanh(c (o_i - theta)) / 2 with s (1/2 + Lip) <= 1."""

    obs: np.ndarray
    theta: np.ndarray
    c: np.ndarray
    s: np.ndarray

    def evaluate(self, samples):
        x = samples[:, self.obs]
        return 0.5 * self.s * np.tanh(self.c * (x - self.theta))


def build_test_class(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure,
                     quantiles=(0.1, 0.25, 0.5, 0.75, 0.9), scales=(0.5, 1.0, 2.0, 4.0)) -> RampFamily:
    """Shifts at pooled quantiles, scales relative to the pooled spread."""
    _check_schema(mu1, mu2)
    pooled = np.vstack([mu1.samples, mu2.samples])
    lam_max = max(mu1.lam_max, mu2.lam_max)
    obs, th, cs, ss = [], [], [], []
    for i, name in enumerate(mu1.names):
        col = pooled[:, i]
        spread = np.subtract(*np.quantile(col, [0.75, 0.25]))
        if not spread > 0:
            spread = np.std(col)
        if not spread > 0:
            spread = max(abs(col[0]), 1.0)
        for th_i in np.unique(np.quantile(col, quantiles)):
            for k in scales:
                c = k / spread
                if name == "energy":
                    lip = _sup_r_sech2(c, th_i)
                elif name == "enstrophy":
                    lip = _sup_r_sech2(c, th_i) * math.sqrt(lam_max)
                else:
                    lip = 0.5 * c
                obs.append(i)
                th.append(th_i)
                cs.append(c)
                ss.append(1.0 / (0.5 + lip))
    return RampFamily(np.array(obs), np.array(th), np.array(cs), np.array(ss))


def _check_schema(mu1, mu2):
    if tuple(mu1.names) != tuple(mu2.names):
        raise ValueError("empirical measures use different observable schemas")


@dataclass
class DistanceReport:
    time: Optional[float]
    dl_lower_bound: float
    dl_se: float
    w1: dict
    n1: int
    n2: int
    note: str = "dual-Lipschitz value is a lower bound over a finite test class"

    def row(self, names):
        return [self.time, self.dl_lower_bound, self.dl_se] + [self.w1[n] for n in names] + [self.n1, self.n2]


def dual_lipschitz_lb(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, test_class: Optional[RampFamily] = None,
                      n_boot: int = 200, seed: int = 0):
    """max over the test class of |E_mu1 phi - E_mu2 phi|, with a bootstrap SE."""
    _check_schema(mu1, mu2)
    tc = build_test_class(mu1, mu2) if test_class is None else test_class
    f1, f2 = tc.evaluate(mu1.samples), tc.evaluate(mu2.samples)
    est = float(np.max(np.abs(f1.mean(0) - f2.mean(0))))
    se = 0.0
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        w1 = rng.multinomial(mu1.n, np.full(mu1.n, 1.0 / mu1.n), size=n_boot) / mu1.n
        w2 = rng.multinomial(mu2.n, np.full(mu2.n, 1.0 / mu2.n), size=n_boot) / mu2.n
        boot = np.max(np.abs(w1 @ f1 - w2 @ f2), axis=1)
        se = float(boot.std(ddof=1))
    return est, se


def sliced_w1(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure, index: int) -> float:
    """Exact 1-Wasserstein distance between the scalar laws of one observable."""
    _check_schema(mu1, mu2)
    if mu1.n == 0 or mu2.n == 0:
        raise ValueError("empty samples")
    return float(stats.wasserstein_distance(mu1.samples[:, index], mu2.samples[:, index]))


def distance_report(mu1, mu2, time=None, n_boot=200, seed=0) -> DistanceReport:
    for mu in (mu1, mu2):
        if mu.n < MIN_SAMPLES:
            raise ValueError(f"distance needs >= {MIN_SAMPLES} samples, got {mu.n}")
    dl, se = dual_lipschitz_lb(mu1, mu2, n_boot=n_boot, seed=seed)
    w1 = {n: sliced_w1(mu1, mu2, i) for i, n in enumerate(mu1.names)}
    return DistanceReport(time, dl, se, w1, mu1.n, mu2.n)


# ----------------------------------------------------------------------
# experiments

@dataclass
class MixingResult:
    times: np.ndarray
    reports: list       # u0-law vs v0-law
    floor: list         # same-law calibration (u0 with an independent seed)
    passed: bool
    names: tuple

    def table(self):
        cols = ["time", "dl_lower_bound", "dl_se"] + [f"w1_{n}" for n in self.names] + \
               ["n1", "n2", "floor_dl", "floor_se"]
        rows = [r.row(self.names) + [f.dl_lower_bound, f.dl_se] for r, f in zip(self.reports, self.floor)]
        return Table(cols, rows)


def mixing_verdict(reports, floor, k: float = 3.0) -> bool:
    """Final distance within k combined bootstrap SE of the calibration floor,
    and below the initial separation."""
    a, b = reports[-1], floor[-1]
    near = a.dl_lower_bound <= b.dl_lower_bound + k * math.hypot(a.dl_se, b.dl_se)
    return bool(near and a.dl_lower_bound < reports[0].dl_lower_bound)


def mixing_experiment(cfg: SimConfig, u0, v0, times, workers=None, n_boot=200) -> MixingResult:
    """Two independent-noise ensembles from u0 and v0, compared at each grid time."""
    lam_max = float(cfg.basis.eigenvalues[-1])
    prov = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    logs_a = run_ensemble(cfg, u0, None, workers=workers)
    logs_b = run_ensemble(cfg.replace(seed=cfg.seed + 1), v0, None, workers=workers)
    logs_c = run_ensemble(cfg.replace(seed=cfg.seed + 2), u0, None, workers=workers)
    reps, floor = [], []
    for j, t in enumerate(times):
        ma = ensemble_measure(logs_a, t, lam_max, prov)
        mb = ensemble_measure(logs_b, t, lam_max, {**prov, "seed": cfg.seed + 1})
        mc = ensemble_measure(logs_c, t, lam_max, {**prov, "seed": cfg.seed + 2})
        reps.append(distance_report(ma, mb, t, n_boot, seed=2 * j))
        floor.append(distance_report(ma, mc, t, n_boot, seed=2 * j + 1))
    return MixingResult(np.asarray(times, float), reps, floor, mixing_verdict(reps, floor), ma.names)


@dataclass
class CouplingResult:
    times: np.ndarray
    prob: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    eps: float
    event_fraction: float     # all n >= m*: ||r(n)||^2 + int_n^{n+1} ||P_N r||^2 <= 1/n^2
    sigma_free_fraction: float
    m_star: int
    n: int

    def table(self):
        return Table(["time", "prob", "wilson_lo", "wilson_hi"],
                     [list(r) for r in zip(self.times, self.prob, self.lo, self.hi)],
                     {"eps": self.eps, "event_fraction": self.event_fraction,
                      "sigma_free_fraction": self.sigma_free_fraction, "m_star": self.m_star, "n": self.n})


def coupling_from_logs(logs, eps: float, m_star: int = 1) -> CouplingResult:
    if not eps > 0:
        raise ValueError(f"eps={eps} must be > 0")
    t = logs[0].times
    ints = np.arange(1, int(math.floor(t[-1] + 1e-9)) + 1)
    idx = np.array([_grid_index(t, float(n), "integer time") for n in ints])
    d = np.array([lg.series["diff_h2"][idx] for lg in logs])
    low = np.array([lg.series["accum_low"][idx] for lg in logs])
    hit = np.sqrt(d) <= eps
    k = hit.sum(0)
    ci = np.array([wilson_interval(int(kk), len(logs)) for kk in k])
    # event over n in [m*, last - 1], where the next integer time exists
    ok = np.ones(len(logs), dtype=bool)
    for j, n in enumerate(ints[:-1]):
        if n >= m_star:
            ok &= d[:, j] + (low[:, j + 1] - low[:, j]) <= 1.0 / n**2
    sigma_free = np.array([not lg.sigma_flag[-1] for lg in logs])
    return CouplingResult(ints.astype(float), k / len(logs), ci[:, 0], ci[:, 1], eps,
                          float(ok.mean()), float(sigma_free.mean()), m_star, len(logs))


def coupling_probability(cfg: SimConfig, u0, v0, eps: float, m_star: int = 1, workers=None) -> CouplingResult:
    """P(||u(n) - v(n)||_H <= eps) at integer times for shared-noise pairs.

    Nudging normally is on; a run with nudging off serves as the uncontrolled
    control experiment.
    """
    if not eps > 0:
        raise ValueError(f"eps={eps} must be > 0")
    logs = run_ensemble(cfg, u0, v0, workers=workers)
    return coupling_from_logs(logs, eps, m_star)


# ----------------------------------------------------------------------
# viscosity regimes for the linear class

def regime_threshold(cfg: SimConfig, regime: str) -> float:
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
    gc = growth_constants(cfg.noise)
    return _REGIME_FACTOR[regime] * gc.K3_tilde**2 / (2.0 * cfg.basis.eigenvalue(1))


def validate_regime(cfg: SimConfig, regime: Optional[str]):
    """Refuse linear-class runs whose viscosity does not strictly exceed the tag's threshold."""
    if regime is None or cfg.noise is None or cfg.noise.growth_class != "linear":
        if regime is not None and regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {regime!r}")
        return
    thr = regime_threshold(cfg, regime)
    if not cfg.nu > thr:
        f = _REGIME_FACTOR[regime]
        raise ConfigError(f"regime={regime} needs nu > {f:g} K3~^2 / (2 lambda_1) = {thr:.12g}, got nu={cfg.nu!r}")
