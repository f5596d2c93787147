"""Statistical checks on ensembles of trajectory logs.

Mean-type inequalities are tested with a 2 x standard-error margin and
probabilities with Wilson score intervals at 95%.  Every report carries a
``passed`` verdict plus the numbers behind it, and can be flattened to a CSV
table with ``table()``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .dynamics import SimConfig, TrajectoryLog
from .errors import ConfigError, ShrinkWindowError
from .noise import growth_constants

Z95 = 1.959963984540054


# ----------------------------------------------------------------------
# helpers

def _stack(logs: Sequence[TrajectoryLog], key: str) -> np.ndarray:
    if len(logs) == 0:
        raise ValueError("no logs")
    t0 = logs[0].times
    for lg in logs[1:]:
        if lg.times.shape != t0.shape or not np.array_equal(lg.times, t0):
            raise ValueError("logs do not share a common sample grid")
    return np.array([lg.series[key] for lg in logs])


def mean_se(samples: np.ndarray, axis=0):
    """Ensemble mean and standard error (sample std / sqrt(n))."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    m = samples.mean(axis=axis)
    if n < 2:
        return m, np.zeros_like(m)
    # deviations from the first sample: exact zero spread for identical samples
    d = samples - np.take(samples, [0], axis=axis)
    return m, d.std(axis=axis, ddof=1) / math.sqrt(n)


def wilson_interval(k: int, n: int, confidence: float = 0.95):
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def forcing_vstar_sq(cfg: SimConfig) -> float:
    return float(cfg.basis.norm_vstar_sq(cfg.forcing))


@dataclass
class Table:
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# decay curves and fits

@dataclass
class DecayCurve:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    n: int

    def table(self):
        return Table(["time", "mean", "se"], [list(r) for r in zip(self.times, self.mean, self.se)],
                     {"n": self.n})


def estimate_decay(logs: Sequence[TrajectoryLog], key: str = "diff_h2") -> DecayCurve:
    if len(logs) < 2:
        raise ValueError("need at least 2 logs to estimate a decay curve")
    x = _stack(logs, key)
    m, se = mean_se(x)
    return DecayCurve(logs[0].times.copy(), m, se, len(logs))


@dataclass
class FitReport:
    model: str
    rate: float              # delta-hat (exponential) or p-hat (polynomial)
    intercept: float         # log prefactor
    window: tuple
    r2: float
    n_points: int
    p_interval: Optional[tuple] = None   # linear class: admissible exponent interval
    consistent: Optional[bool] = None

    def table(self):
        row = [self.model, self.rate, self.intercept, self.window[0], self.window[1], self.r2, self.n_points]
        cols = ["model", "rate", "log_prefactor", "t0", "t1", "r2", "n_points"]
        if self.p_interval is not None:
            cols += ["p_lo", "p_hi", "consistent"]
            row += [self.p_interval[0], self.p_interval[1], self.consistent]
        return Table(cols, [row])


def default_window(times: np.ndarray) -> tuple:
    """Skip the transient: max(5 samples, 10% of the horizon)."""
    t = np.asarray(times)
    skip_t = t[0] + 0.1 * (t[-1] - t[0])
    i = max(5, int(np.searchsorted(t, skip_t)))
    i = min(i, len(t) - 1)
    return float(t[i]), float(t[-1])


def fit_decay(curve: DecayCurve, model: str = "exponential", window=None) -> FitReport:
    """Least-squares fit of log(mean) against t (exponential) or log t (polynomial)."""
    if model not in ("exponential", "polynomial"):
        raise ValueError(f"unknown decay model {model!r}")
    t0, t1 = default_window(curve.times) if window is None else window
    sel = (curve.times >= t0) & (curve.times <= t1)
    if model == "polynomial":
        sel &= curve.times > 0
    y = curve.mean[sel]
    if sel.sum() < 5:
        raise ShrinkWindowError(f"fit window [{t0}, {t1}] holds {sel.sum()} points, need >= 5")
    if np.any(y <= 0):
        raise ShrinkWindowError(f"nonpositive means inside fit window [{t0}, {t1}]")
    x = curve.times[sel] if model == "exponential" else np.log(curve.times[sel])
    ly = np.log(y)
    res = stats.linregress(x, ly)
    resid = ly - (res.intercept + res.slope * x)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return FitReport(model, float(-res.slope), float(res.intercept), (float(t0), float(t1)), r2, int(sel.sum()))


def linear_exponent_interval(nu: float, lam1: float, K3_tilde: float) -> tuple:
    """Admissible polynomial decay exponents (0, nu lam1 / (4 K3~^2) - 3/8)."""
    return 0.0, nu * lam1 / (4.0 * K3_tilde**2) - 3.0 / 8.0


def fit_decay_for(cfg: SimConfig, curve: DecayCurve, window=None) -> FitReport:
    """Fit with the model matching the noise class, annotating linear-class fits."""
    cls = "bounded" if cfg.noise is None else cfg.noise.growth_class
    rep = fit_decay(curve, "exponential" if cls == "bounded" else "polynomial", window)
    if cls == "linear":
        gc = growth_constants(cfg.noise)
        lo, hi = linear_exponent_interval(cfg.nu, cfg.basis.eigenvalue(1), gc.K3_tilde)
        rep.p_interval = (lo, hi)
        # decay faster than some admissible power is consistent with the bound
        rep.consistent = bool(hi > lo and rep.rate > 0)
    return rep


def is_monotone_decay(curve: DecayCurve, window=None, slack: float = 2.0) -> bool:
    """Nonincreasing beyond the transient, up to ``slack`` standard errors."""
    t0, t1 = default_window(curve.times) if window is None else window
    sel = (curve.times >= t0) & (curve.times <= t1)
    m, se = curve.mean[sel], curve.se[sel]
    running_min = np.minimum.accumulate(m)
    return bool(np.all(m <= running_min + slack * se + 1e-300) and m[-1] < m[0])


def decay_factor_from_peak(curve: DecayCurve) -> float:
    i = int(np.argmax(curve.mean))
    tail = curve.mean[i:]
    last = tail[-1]
    return float(curve.mean[i] / last) if last > 0 else math.inf


# ----------------------------------------------------------------------
# weighted contraction estimates

@dataclass
class WeightedReport:
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    reference: float         # ||x - y||^2
    excess: float            # max_t (mean - 2 se) - reference
    passed: bool

    def rel_se(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mean > 0, self.se / self.mean, 0.0)

    def within_relative(self, k: float = 3.0) -> bool:
        """mean <= reference (1 + k * relative SE) at every sample time."""
        return bool(np.all(self.mean <= self.reference * (1.0 + k * self.rel_se()) + 1e-14 * self.reference))

    def table(self):
        return Table(["time", "mean", "se", "bound", "verdict"],
                     [[t, m, s, self.reference, bool(m - 2 * s <= self.reference)]
                      for t, m, s in zip(self.times, self.mean, self.se)])


def _weighted(logs, weight_exp, reference):
    d = _stack(logs, "diff_h2")
    w = np.exp(weight_exp) * d
    m, se = mean_se(w)
    excess = float(np.max(m - 2 * se) - reference)
    return WeightedReport(logs[0].times.copy(), m, se, reference, excess, excess <= 1e-12 * max(reference, 1e-300))


def check_weighted_contraction(logs, cfg: SimConfig, x, y) -> WeightedReport:
    """E[exp(-(L_G^2 t - lam1 nu t + (1/nu) int ||u||_V^2)) ||u - v||^2] <= ||x - y||^2
    for same-noise uncontrolled pairs started at (x, y)."""
    for lg in logs:
        if "accum_v" not in lg.series:
            raise ValueError("logs lack the V-norm accumulator")
    if cfg.lam != 0.0:
        raise ConfigError("the uncontrolled contraction check needs nudging off")
    t = logs[0].times
    lam1 = cfg.basis.eigenvalue(1)
    acc = _stack(logs, "accum_v")
    expo = -(cfg.L_G**2 * t - lam1 * cfg.nu * t + acc / cfg.nu)
    ref = float(np.sum((np.asarray(x) - np.asarray(y)) ** 2))
    return _weighted(logs, expo, ref)


def check_nudged_weighted(logs, cfg: SimConfig, u0, v0) -> WeightedReport:
    """E[e^{Gamma(t)} ||u - v||^2] <= ||u0 - v0||^2 with
    Gamma(t) = (nu lam_N / 2 - L_G^2) t - (1/nu) int ||u||_V^2, for lam = nu lam_N / 2."""
    lam_N = cfg.basis.eigenvalue(cfg.nudge.N)
    if not math.isclose(cfg.lam, 0.5 * cfg.nu * lam_N):
        raise ConfigError("the weighted nudging estimate assumes lambda = nu lambda_N / 2")
    t = logs[0].times
    acc = _stack(logs, "accum_v")
    gamma = (0.5 * cfg.nu * lam_N - cfg.L_G**2) * t - acc / cfg.nu
    ref = float(np.sum((np.asarray(u0) - np.asarray(v0)) ** 2))
    return _weighted(logs, gamma, ref)


@dataclass
class ConditionalDecayReport:
    R: float
    beta: float
    times: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    bound: np.ndarray
    n_untriggered: int
    passed: bool

    def table(self):
        return Table(["time", "mean", "se", "bound", "verdict"],
                     [[t, m, s, b, bool(m <= b + 2 * s)]
                      for t, m, s, b in zip(self.times, self.mean, self.se, self.bound)],
                     {"R": self.R, "beta": self.beta, "n_untriggered": self.n_untriggered})


def check_conditional_decay(logs, cfg: SimConfig, monitor: int, u0, v0) -> ConditionalDecayReport:
    """E[1{tau not triggered} ||u - v||^2](t) <= e^{R + beta - nu lam_N t / 4} ||u0 - v0||^2."""
    if not 0 <= monitor < len(cfg.tau_monitors):
        raise ValueError(f"monitor index {monitor} not configured")
    R, beta = cfg.tau_monitors[monitor]
    keep = np.array([not lg.tau_flags[-1, monitor] for lg in logs], dtype=float)
    d = _stack(logs, "diff_h2") * keep[:, None]
    m, se = mean_se(d)
    t = logs[0].times
    ref = float(np.sum((np.asarray(u0) - np.asarray(v0)) ** 2))
    bound = np.exp(R + beta - cfg.nu * cfg.basis.eigenvalue(cfg.nudge.N) * t / 4.0) * ref
    ok = bool(np.all(m <= bound + 2 * se + 1e-14 * ref))
    return ConditionalDecayReport(R, beta, t, m, se, bound, int(keep.sum()), ok)


# ----------------------------------------------------------------------
# energy moments

@dataclass(frozen=True)
class MomentConstants:
    a: float
    b: float
    applicable: bool
    note: str = ""

    @property
    def C_b(self) -> float:
        return max(1.0 + self.b, 2.0)


def moment_constants(cfg: SimConfig) -> MomentConstants:
    """Explicit (a, b) of the mean energy inequality for the configured noise class."""
    nu = cfg.nu
    lam1 = cfg.basis.eigenvalue(1)
    f2 = forcing_vstar_sq(cfg)
    if cfg.noise is None:
        return MomentConstants(nu, f2 / nu, True, "noise off")
    gc = growth_constants(cfg.noise)
    if gc.growth_class == "bounded":
        return MomentConstants(nu, gc.K1**2 + f2 / nu, True)
    if gc.growth_class == "sublinear":
        g = gc.gamma
        # Young: 2 K2~^2 r^{2g} <= (nu lam1 / 2) r^2 + 2 K2~^2 (1 - g) d^{-g/(1-g)}
        d = nu * lam1 / (4.0 * g * gc.K2_tilde**2)
        b = 2 * gc.K2**2 + 2 * gc.K2_tilde**2 * (1 - g) * d ** (-g / (1 - g)) + 2 * f2 / nu
        return MomentConstants(nu, b, True)
    kt2 = gc.K3_tilde**2
    a = nu - kt2 / (2 * lam1)
    if a <= 0:
        return MomentConstants(a, math.nan, False,
                               f"skipped: nu={nu:g} <= K3~^2/(2 lambda_1)={kt2 / (2 * lam1):g}, a <= 0")
    eps = 0.5 * (lam1 * nu / kt2 - 0.5)
    eta = 1.0 - (0.5 + eps) * kt2 / (lam1 * nu)
    b = (1 + 1 / eps) * gc.K3**2 + f2 / (eta * nu)
    return MomentConstants(a, b, True)


def linear_q_limit(cfg: SimConfig) -> float:
    gc = growth_constants(cfg.noise)
    return 1.0 + 2.0 * cfg.nu * cfg.basis.eigenvalue(1) / gc.K3_tilde**2


@dataclass
class MomentReport:
    times: np.ndarray
    lhs_mean: np.ndarray
    lhs_se: np.ndarray
    bound: np.ndarray
    constants: MomentConstants
    q: float
    q_moment_sup: float
    q_moment_bounded: bool
    passed: bool
    skipped: bool = False
    note: str = ""

    def table(self):
        return Table(["time", "mean", "se", "bound", "verdict"],
                     [[t, m, s, b, bool(m <= b + 2 * s)]
                      for t, m, s, b in zip(self.times, self.lhs_mean, self.lhs_se, self.bound)],
                     {"a": self.constants.a, "b": self.constants.b, "q": self.q, "note": self.note})


def check_energy_moment(logs, cfg: SimConfig, u0, q: float = 2.0, state: str = "u") -> MomentReport:
    """E||u(t)||^2 + a int E||u||_V^2 <= ||u0||^2 + b t (+ 2 SE), plus a q-th moment
    boundedness probe (``state='v'`` runs the probe on the nudged copy)."""
    if q < 2:
        raise ConfigError(f"moment order q={q} must be >= 2")
    if cfg.noise is not None and cfg.noise.growth_class == "linear" and q > 2:
        qmax = linear_q_limit(cfg)
        if not q < qmax:
            raise ConfigError(f"q={q} inadmissible for the linear class: need q in [2, {qmax:.6g})")
    mc = moment_constants(cfg)
    t = logs[0].times
    empty = np.full_like(t, np.nan)
    if not mc.applicable:
        return MomentReport(t, empty, empty, empty, mc, q, math.nan, False, True, True, mc.note)
    e = _stack(logs, "u_h2")
    lhs = e + mc.a * _stack(logs, "accum_v")
    m, se = mean_se(lhs)
    e0 = float(np.sum(np.asarray(u0) ** 2))
    bound = e0 + mc.b * t
    passed = bool(np.all(m <= bound + 2 * se + 1e-12 * (1 + bound)))
    key = "u_h2" if state == "u" else "v_h2"
    mq = _stack(logs, key) ** (q / 2)
    qm, qse = mean_se(mq)
    n = len(t)
    mid, late = slice(n // 4, n // 2), slice(3 * n // 4, n)
    ref = max(mq[:, 0].mean(), qm[mid].max()) if n >= 4 else qm[0]
    bounded = bool(n < 4 or np.all(qm[late] <= ref + 3 * qse[late]))
    return MomentReport(t, m, se, bound, mc, q, float(qm.max()), bounded, passed, False, mc.note)


# ----------------------------------------------------------------------
# tail probabilities

@dataclass
class TailEstimate:
    R: np.ndarray
    prob: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    bound: np.ndarray          # NaN where no explicit bound is available
    n: int
    passed: bool
    functional: str

    def table(self):
        return Table(["R", "prob", "wilson_lo", "wilson_hi", "bound", "verdict"],
                     [[r, p, lo, hi, b, bool(np.isnan(b) or p <= b + (hi - p))]
                      for r, p, lo, hi, b in zip(self.R, self.prob, self.lo, self.hi, self.bound)],
                     {"n": self.n, "functional": self.functional})


def tail_functional(logs, cfg: SimConfig, u0) -> np.ndarray:
    """Per-trajectory sup over sample times of the martingale-controlled energy excess."""
    t = logs[0].times
    e = _stack(logs, "u_h2")
    acc = _stack(logs, "accum_v")
    e0 = float(np.sum(np.asarray(u0) ** 2))
    mc = moment_constants(cfg)
    cls = "bounded" if cfg.noise is None else cfg.noise.growth_class
    if cls == "bounded":
        g = e + 0.5 * cfg.nu * acc - e0 - mc.b * t
    else:
        if not mc.applicable:
            raise ConfigError(mc.note)
        g = e + mc.a * acc - e0 - mc.C_b * (t + 1.0)
    return g.max(axis=1)


def estimate_tail(logs, cfg: SimConfig, R_grid, u0) -> TailEstimate:
    R = np.asarray(R_grid, dtype=float)
    if R.size == 0:
        raise ValueError("empty R grid")
    sup = tail_functional(logs, cfg, u0)
    n = len(sup)
    k = np.array([(sup >= r).sum() for r in R])
    ci = np.array([wilson_interval(kk, n) for kk in k])
    p = k / n
    cls = "bounded" if cfg.noise is None else cfg.noise.growth_class
    if cls == "bounded" and cfg.noise is not None:
        K1 = growth_constants(cfg.noise).K1
        bound = np.exp(-cfg.nu * cfg.basis.eigenvalue(1) * R / (8 * K1**2))
    elif cfg.noise is None:
        bound = np.where(R > 0, 0.0, 1.0)
    else:
        bound = np.full_like(R, np.nan)
    ok = np.isnan(bound) | (p <= bound + (ci[:, 1] - p))
    functional = "bounded" if cls == "bounded" else "unbounded"
    return TailEstimate(R, p, ci[:, 0], ci[:, 1], bound, n, bool(np.all(ok)), functional)


# ----------------------------------------------------------------------
# stopping probabilities

def beta_lower_bound(cfg: SimConfig, u0) -> float:
    e0 = float(np.sum(np.asarray(u0) ** 2))
    nu = cfg.nu
    cls = "bounded" if cfg.noise is None else cfg.noise.growth_class
    if cls == "bounded":
        return 2.0 * e0 / nu**2
    mc = moment_constants(cfg)
    if cls == "sublinear":
        return (mc.C_b + e0) / nu**2
    if not mc.applicable:
        return math.inf
    return (mc.C_b + e0) / (nu * mc.a)


@dataclass
class StopProbReport:
    R: float
    beta: float
    prob: float
    lo: float
    hi: float
    n: int
    horizon: float
    beta_ok: bool
    note: str = "finite-horizon estimate: lower bound for P(tau < infinity)"

    def table(self):
        return Table(["R", "beta", "prob", "wilson_lo", "wilson_hi", "n", "horizon", "beta_ok"],
                     [[self.R, self.beta, self.prob, self.lo, self.hi, self.n, self.horizon, self.beta_ok]],
                     {"note": self.note})


def estimate_stop_prob(logs, cfg: SimConfig, monitor, u0) -> StopProbReport:
    """Empirical P(tau_{R,beta} <= T).  ``monitor`` is an index or an (R, beta) pair."""
    if isinstance(monitor, (tuple, list)):
        key = (float(monitor[0]), float(monitor[1]))
        if key not in cfg.tau_monitors:
            raise ValueError(f"monitor {key} not present in the logs")
        monitor = cfg.tau_monitors.index(key)
    if not 0 <= monitor < len(cfg.tau_monitors):
        raise ValueError(f"monitor index {monitor} not present in the logs")
    R, beta = cfg.tau_monitors[monitor]
    hits = np.array([bool(lg.tau_flags[-1, monitor]) for lg in logs])
    n = len(hits)
    lo, hi = wilson_interval(int(hits.sum()), n)
    lb = beta_lower_bound(cfg, u0)
    ok = beta >= lb
    if not ok:
        warnings.warn(f"beta={beta:g} below the class lower bound {lb:.6g}", stacklevel=2)
    return StopProbReport(R, beta, float(hits.mean()), lo, hi, n, float(logs[0].times[-1]), bool(ok))


@dataclass
class StopScan:
    reports: list
    C_hat: float
    passed: bool

    def table(self):
        rows = [r.table().rows[0] + [math.exp(-self.C_hat * r.R)] for r in self.reports]
        return Table(["R", "beta", "prob", "wilson_lo", "wilson_hi", "n", "horizon", "beta_ok", "fit_bound"],
                     rows, {"C_hat": self.C_hat})


def stop_prob_scan(logs, cfg: SimConfig, u0) -> StopScan:
    """Fit P(tau < T) <= exp(-C R) over all configured monitors."""
    reps = [estimate_stop_prob(logs, cfg, i, u0) for i in range(len(cfg.tau_monitors))]
    R = np.array([r.R for r in reps])
    p = np.array([r.prob for r in reps])
    pos = p > 0
    if pos.sum() == 0:
        C = math.inf
    else:
        C = float(-np.sum(R[pos] * np.log(p[pos])) / np.sum(R[pos] ** 2))
    ok = C > 0 and all(r.prob <= math.exp(-C * r.R) + (r.hi - r.prob) for r in reps)
    return StopScan(reps, C, bool(ok))


# ----------------------------------------------------------------------
# deterministic energy balance of the scheme

def energy_inequality_gap(log: TrajectoryLog, cfg: SimConfig) -> np.ndarray:
    """Relative gap of ||u_n||^2 + 2 nu int ||u||_V^2 - ||u_0||^2 - 2 int <f, u>.

    The integrals use the implicit-endpoint sums dt * sum_{k=1..n} that the
    scheme's discrete energy balance produces; nonpositive entries mean the
    inequality holds.  Requires a log sampled at every step.
    """
    if cfg.sample_stride != 1:
        raise ValueError("energy balance check needs sample_stride = 1")
    e = log.series["u_h2"]
    v = np.concatenate([[0.0], np.cumsum(log.series["u_v2"][1:])]) * cfg.dt
    fu = np.concatenate([[0.0], np.cumsum(log.series["f_u"][1:])]) * cfg.dt
    fabs = np.concatenate([[0.0], np.cumsum(np.abs(log.series["f_u"][1:]))]) * cfg.dt
    gap = e + 2 * cfg.nu * v - e[0] - 2 * fu
    scale = e[0] + 2 * cfg.nu * v + 2 * fabs
    return gap / np.where(scale > 0, scale, 1.0)
