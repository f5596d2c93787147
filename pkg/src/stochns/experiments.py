"""Experiment kinds: run ensembles, evaluate checks, collect report tables."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as dg
from . import ergodicity as erg
from .config import ExperimentSpec
from .dynamics import ChunkRunner, NudgeConfig, SimConfig, _chunks, run_ensemble, worker_count
from .errors import ConfigError
from .io import load_checkpoint, log_table, save_checkpoint


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentResult:
    checks: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)   # file stem -> Table

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))


def _advance(args):
    runner, until = args
    return runner.advance(until)


class EnsembleSource:
    """Runs ensembles, checkpointing the one tagged ``main`` when asked to."""

    def __init__(self, spec: ExperimentSpec, checkpoint_dir: str | None = None, resume: str | None = None,
                 workers: int | None = None, extra: dict | None = None):
        self.spec = spec
        self.extra = extra or {}
        self.checkpoint_dir = checkpoint_dir
        self.resume = resume
        self.workers = worker_count() if workers is None else workers

    def __call__(self, cfg: SimConfig, u0, v0, tag: str = "main"):
        every = 0
        if self.spec.checkpoint_every > 0 and tag == "main":
            every = max(1, int(round(self.spec.checkpoint_every / cfg.dt)))
        if self.resume is not None and tag == "main":
            _, runners = load_checkpoint(self.resume, cfg)
        elif every == 0:
            return run_ensemble(cfg, u0, v0, workers=self.workers)
        else:
            runners = [ChunkRunner(cfg, u0, v0, idx) for idx in _chunks(cfg.ensemble_size)]
        n = cfg.n_steps
        step = runners[0].step
        targets = list(range(step + every, n, every)) + [n] if every else [n]
        targets = [s for s in targets if s > step] or [n]
        for target in targets:
            runners = self._map(runners, target)
            if target < n and self.checkpoint_dir is not None:
                save_checkpoint(os.path.join(self.checkpoint_dir, "checkpoint.bin"), cfg, runners,
                                self.spec.resolved_text(), tag, self.extra)
        return [lg for r in runners for lg in r.logs()]

    def _map(self, runners, target):
        jobs = [(r, target) for r in runners]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as ex:
                return list(ex.map(_advance, jobs))
        return [_advance(j) for j in jobs]


def _window(spec):
    w = spec.params["diagnostics"]["fit_window"]
    if w == "auto":
        return None
    vals = [float(x) for x in w.split(",")]
    if len(vals) != 2:
        raise ConfigError(f"diagnostics.fit_window={w!r} must be 'auto' or 't0, t1'")
    return tuple(vals)


def _grid_times(cfg: SimConfig, text: str, n_default: int = 11):
    step = cfg.dt * cfg.sample_stride
    if text == "auto":
        k = cfg.n_steps // cfg.sample_stride
        idx = np.unique(np.round(np.linspace(0, k, n_default)).astype(int))
        return [float(i * step) for i in idx]
    return [float(x) for x in text.replace(",", " ").split()]


# ----------------------------------------------------------------------
# kinds

def run_simulate(spec, source, res):
    cfg = spec.sim
    logs = source(cfg, spec.u0, spec.v0)
    cols = ["time", "u_h2", "u_v2", "diff_h2"]
    m = {k: dg.mean_se(np.array([lg.series[k] for lg in logs]))[0] for k in cols[1:]}
    res.tables["ensemble_mean"] = dg.Table(cols, [list(r) for r in zip(logs[0].times, *m.values())],
                                          {"n": len(logs)})
    res.tables["trajectory_0"] = log_table(logs[0])
    if cfg.noise is None and cfg.sample_stride == 1:
        gap = max(float(np.max(dg.energy_inequality_gap(lg, cfg))) for lg in logs)
        res.check("energy_inequality", gap <= 1e-10, f"max relative gap {gap:.3e}")
    return logs


def _decay_checks(spec, cfg, logs, res, prefix=""):
    curve = dg.estimate_decay(logs)
    factor = dg.decay_factor_from_peak(curve)
    fit = dg.fit_decay_for(cfg, curve, _window(spec))
    res.tables[prefix + "decay"] = curve.table()
    res.tables[prefix + "fit"] = fit.table()
    return curve, factor, fit


def run_foias_prodi(spec, source, res):
    cfg = spec.sim
    p = spec.params["foias_prodi"]
    logs = source(cfg, spec.u0, spec.v0)
    curve, factor, fit = _decay_checks(spec, cfg, logs, res)
    cls = "bounded" if cfg.noise is None else cfg.noise.growth_class
    if cls == "bounded":
        res.check("decay_factor", factor >= p["min_factor"], f"factor {factor:.3e} (need >= {p['min_factor']:g})")
        res.check("exponential_fit", fit.r2 >= p["min_r2"] and fit.rate > 0,
                  f"delta={fit.rate:.4g}, R2={fit.r2:.4f}")
    else:
        res.check("monotone_decay", dg.is_monotone_decay(curve, _window(spec)), "")
        detail = f"p={fit.rate:.4g}, R2={fit.r2:.4f}"
        if fit.p_interval is not None:
            detail += f", admissible interval ({fit.p_interval[0]:g}, {fit.p_interval[1]:.4g})"
        res.check("polynomial_fit", fit.consistent if fit.consistent is not None else fit.rate > 0, detail)
    if p["control_nu"] > 0:
        T = p["control_T"] if p["control_T"] > 0 else cfg.T
        ctrl = cfg.replace(nu=p["control_nu"], T=T, nudge=NudgeConfig("off", cfg.nudge.N))
        clogs = source(ctrl, spec.u0, spec.v0, tag="control")
        cf = dg.decay_factor_from_peak(dg.estimate_decay(clogs))
        res.tables["control_decay"] = dg.estimate_decay(clogs).table()
        res.check("negative_control", cf < p["max_control_factor"], f"control factor {cf:.3g}")


def run_moments(spec, source, res):
    cfg = spec.sim
    logs = source(cfg, spec.u0, spec.v0)
    rep = dg.check_energy_moment(logs, cfg, spec.u0, spec.params["diagnostics"]["q"])
    res.tables["moments"] = rep.table()
    if rep.skipped:
        res.check("energy_moment", True, rep.note)
    else:
        res.check("energy_moment", rep.passed, f"a={rep.constants.a:.4g}, b={rep.constants.b:.4g}")
        res.check("q_moment_bounded", rep.q_moment_bounded, f"sup={rep.q_moment_sup:.4g}")


def run_tails(spec, source, res):
    cfg = spec.sim
    logs = source(cfg, spec.u0, spec.v0)
    R = [float(x) for x in spec.params["diagnostics"]["R_grid"].replace(",", " ").split()]
    rep = dg.estimate_tail(logs, cfg, R, spec.u0)
    res.tables["tails"] = rep.table()
    res.check("tail_bound", rep.passed, f"functional={rep.functional}")


def run_stop_prob(spec, source, res):
    cfg = spec.sim
    if not cfg.tau_monitors:
        raise ConfigError("stop_prob needs tau.monitors")
    logs = source(cfg, spec.u0, spec.v0)
    scan = dg.stop_prob_scan(logs, cfg, spec.u0)
    res.tables["stop_prob"] = scan.table()
    order = sorted(scan.reports, key=lambda r: (r.beta, r.R))
    nested = all(b.prob <= a.hi for a, b in zip(order, order[1:]) if a.beta == b.beta)
    res.check("nested_monotone", nested, "")
    if cfg.noise is not None and cfg.noise.growth_class == "bounded":
        res.check("exponential_scan", scan.passed, f"C_hat={scan.C_hat:.4g}")
    k = spec.params["diagnostics"]["conditional_monitor"]
    if k >= 0 and cfg.nudge.mode != "off":
        rep = dg.check_conditional_decay(logs, cfg, k, spec.u0, spec.v0)
        res.tables["conditional_decay"] = rep.table()
        res.check("conditional_decay", rep.passed, f"untriggered={rep.n_untriggered}")


def run_mixing(spec, source, res):
    cfg = spec.sim
    e = spec.params["ergodicity"]
    times = _grid_times(cfg, e["times"])
    out = erg.mixing_experiment(cfg, spec.u0, spec.v0, times, workers=source.workers, n_boot=e["n_boot"])
    res.tables["mixing"] = out.table()
    a, b = out.reports[-1], out.floor[-1]
    res.check("mixing", out.passed,
              f"final {a.dl_lower_bound:.4g}+-{a.dl_se:.2g} vs floor {b.dl_lower_bound:.4g}+-{b.dl_se:.2g}, "
              f"initial {out.reports[0].dl_lower_bound:.4g}")


def _eps(spec):
    e = spec.params["ergodicity"]
    if e["eps"] > 0:
        return e["eps"]
    eps = e["eps_rel"] * math.sqrt(float(np.sum((spec.u0 - spec.v0) ** 2)))
    if not eps > 0:
        raise ConfigError("coupling threshold is zero: set ergodicity.eps or use distinct u0, v0")
    return eps


def run_coupling(spec, source, res):
    cfg = spec.sim
    logs = source(cfg, spec.u0, spec.v0)
    c = spec.params["coupling"]
    out = erg.coupling_from_logs(logs, _eps(spec), spec.params["ergodicity"]["m_star"])
    res.tables["coupling"] = out.table()
    last = out.prob[-c["last"]:]
    res.check("coupling_probability", bool(np.all(last >= c["target"])),
              f"last probabilities {np.round(last, 4).tolist()} (target {c['target']})")


def run_sweep(spec, source, res):
    cfg = spec.sim
    s = spec.params["sweep"]
    b = cfg.basis
    if s["N_values"] == "auto":
        cap = cfg.noise.M if cfg.noise is not None else b.total_dim
        Ns = [b.shell_count(lam) for lam in np.unique(b.eigenvalues) if b.shell_count(lam) <= cap]
    else:
        Ns = [int(x) for x in s["N_values"].replace(",", " ").split()]
    rows, best = [], None
    for N in Ns:
        c = cfg.replace(nudge=NudgeConfig(cfg.nudge.mode, N, None, cfg.nudge.girsanov_K), obs_modes=None)
        logs = source(c, spec.u0, spec.v0, tag=f"N{N}")
        curve = dg.estimate_decay(logs)
        f = dg.decay_factor_from_peak(curve)
        rows.append([N, b.eigenvalue(N), f, float(curve.mean[-1])])
        if best is None and f >= s["min_factor"]:
            best = N
    res.tables["sweep_N"] = dg.Table(["N", "lambda_N", "decay_factor", "final_mean"], rows,
                                     {"smallest_N": best if best is not None else "none"})
    res.check("sweep_N", best is not None, f"smallest N reaching factor {s['min_factor']:g}: {best}")


RUNNERS = {
    "simulate": run_simulate, "foias_prodi": run_foias_prodi, "moments": run_moments, "tails": run_tails,
    "stop_prob": run_stop_prob, "mixing": run_mixing, "coupling_prob": run_coupling, "sweep_N": run_sweep,
}


def run_experiment(spec: ExperimentSpec, checkpoint_dir=None, resume=None, workers=None,
                   extra: dict | None = None) -> ExperimentResult:
    """Run ``spec``; ``resume`` is a checkpoint path for the main ensemble."""
    res = ExperimentResult()
    source = EnsembleSource(spec, checkpoint_dir, resume, workers, extra)
    RUNNERS[spec.kind](spec, source, res)
    return res
