"""INI experiment files: parsing, defaults, load-time validation and the resolved echo.

Field values use a small grammar::

    zero
    modes(0:1.0, 5:-0.25)           # basis index : coefficient
    wave(1,2,sin:0.5; 1,0,cos:1)    # wavevector, parity : coefficient
    random(energy=1.0, seed=3, slope=1, n_modes=12)
    file(path/to/field.bin)         # serialized field
    none                            # (initial.v0 only) no companion copy
"""

from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .diagnostics import linear_q_limit
from .dynamics import NudgeConfig, SimConfig, check_dt, default_dt, shell_complete_N
from .ergodicity import validate_regime
from .errors import ConfigError
from .noise import NoiseModel, growth_constants
from .spectral import build_basis, field_from_bytes, random_coeffs

KINDS = ("simulate", "foias_prodi", "moments", "tails", "stop_prob", "mixing", "coupling_prob", "sweep_N")
PAIR_KINDS = ("foias_prodi", "stop_prob", "coupling_prob", "sweep_N")
NUDGED_KINDS = ("foias_prodi", "coupling_prob", "sweep_N")

_REQUIRED = object()
_AUTO = object()

# section -> key -> (type, default)
SCHEMA = {
    "experiment": {
        "name": (str, "experiment"), "kind": (str, "simulate"), "output_dir": (str, "results"),
        "seed": (int, 0), "ensemble_size": (int, 1), "regime": (str, "none"),
        "checkpoint_every": (float, 0.0), "formats": (str, "csv"),
    },
    "spectral": {"kmax": (int, _REQUIRED)},
    "dynamics": {
        "nu": (float, _REQUIRED), "T": (float, 1.0), "dt": (float, _AUTO),
        "sample_stride": (int, 1), "blowup_ceiling": (float, 1e12), "snapshot_times": (str, ""),
    },
    "forcing": {"field": (str, "zero")},
    "initial": {"u0": (str, "random(energy=1.0, seed=1)"), "v0": (str, _AUTO)},
    "noise": {"class": (str, "bounded"), "gamma": (float, 0.5), "k_noise": (int, _AUTO), "M": (int, _AUTO)},
    "nudge": {"mode": (str, _AUTO), "N": (int, _AUTO), "lambda": (float, _AUTO), "girsanov_K": (float, math.inf)},
    "tau": {"monitors": (str, "")},
    "diagnostics": {"q": (float, 2.0), "R_grid": (str, "1, 2, 4, 8, 16"), "fit_window": (str, "auto"),
                    "conditional_monitor": (int, -1)},
    "foias_prodi": {"control_nu": (float, 0.0), "control_T": (float, 0.0), "min_factor": (float, 1e3), "min_r2": (float, 0.95),
                    "max_control_factor": (float, 10.0)},
    "ergodicity": {"times": (str, "auto"), "n_boot": (int, 200), "eps": (float, 0.0), "eps_rel": (float, 1e-3),
                   "m_star": (int, 1)},
    "coupling": {"target": (float, 0.95), "last": (int, 3)},
    "sweep": {"N_values": (str, "auto"), "min_factor": (float, 1e3)},
}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def _convert(section, key, typ, raw: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}={raw!r} is not a valid {typ.__name__}") from None


def _floats(text: str) -> list:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(x) for x in re.split(r"[,\s]+", text) if x]
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}") from None


# ----------------------------------------------------------------------
# field grammar

_CALL = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$", re.S)


def parse_field(expr: str, basis, base_dir: str = ".") -> Optional[np.ndarray]:
    m = _CALL.match(expr)
    if not m:
        raise ConfigError(f"cannot parse field expression {expr!r}")
    name, args = m.group(1), (m.group(2) or "").strip()
    dim = basis.total_dim
    if name == "none":
        return None
    if name == "zero":
        return np.zeros(dim)
    if name == "modes":
        c = np.zeros(dim)
        for item in filter(None, (s.strip() for s in args.split(","))):
            try:
                j, a = item.split(":")
                j = int(j)
                if not 0 <= j < dim:
                    raise ConfigError(f"mode index {j} outside [0, {dim})")
                c[j] += float(a)
            except ValueError:
                raise ConfigError(f"bad modes() entry {item!r}, expected index:value") from None
        return c
    if name == "wave":
        c = np.zeros(dim)
        for item in filter(None, (s.strip() for s in args.split(";"))):
            try:
                head, a = item.rsplit(":", 1)
                kx, ky, par = (s.strip() for s in head.split(","))
                c[basis.index(int(kx), int(ky), par)] += float(a)
            except (ValueError, KeyError) as e:
                raise ConfigError(f"bad wave() entry {item!r}: {e}") from None
        return c
    if name == "random":
        kw = {}
        for item in filter(None, (s.strip() for s in args.split(","))):
            k, _, v = item.partition("=")
            kw[k.strip()] = v.strip()
        unknown = set(kw) - {"energy", "seed", "slope", "n_modes"}
        if unknown:
            raise ConfigError(f"unknown random() arguments {sorted(unknown)}")
        try:
            rng = np.random.default_rng(int(kw.get("seed", 0)))
            n_modes = int(kw["n_modes"]) if "n_modes" in kw else None
            return random_coeffs(basis, rng, energy=float(kw.get("energy", 1.0)),
                                 slope=float(kw.get("slope", 1.0)), n_modes=n_modes)
        except ValueError as e:
            raise ConfigError(f"bad random() arguments: {e}") from None
    if name == "file":
        path = args if os.path.isabs(args) else os.path.join(base_dir, args)
        try:
            with open(path, "rb") as fh:
                fld, _ = field_from_bytes(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read field file {path}: {e}") from None
        if fld.basis != basis:
            raise ConfigError(f"field file {path} has kmax={fld.basis.kmax}, config has {basis.kmax}")
        return np.array(fld.coeffs)
    raise ConfigError(f"unknown field expression {name!r}")


# ----------------------------------------------------------------------
# experiment spec

@dataclass
class ExperimentSpec:
    name: str
    kind: str
    sim: SimConfig
    u0: np.ndarray
    v0: Optional[np.ndarray]
    output_dir: str
    formats: tuple
    regime: Optional[str]
    checkpoint_every: float
    params: dict
    resolved: dict = field(default_factory=dict)

    def resolved_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, kv in self.resolved.items():
            cp[sec] = kv
        lines = [f"# resolved configuration, config_hash={self.sim.config_hash()}"]
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str, base_dir: str = ".") -> ExperimentSpec:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")

    raw = {}
    for sec, keys in SCHEMA.items():
        raw[sec] = {}
        for key, (typ, default) in keys.items():
            if cp.has_option(sec, key):
                raw[sec][key] = _convert(sec, key, typ, cp[sec][key])
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {sec}.{key}")
            else:
                raw[sec][key] = default
    return _build(raw, base_dir)


def _build(raw: dict, base_dir: str) -> ExperimentSpec:
    ex = raw["experiment"]
    kind = ex["kind"]
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {KINDS}, got {kind!r}")
    kmax = raw["spectral"]["kmax"]
    if kmax < 1:
        raise ConfigError(f"spectral.kmax={kmax} must be >= 1")
    basis = build_basis(kmax)
    dyn = raw["dynamics"]
    nu, T = dyn["nu"], dyn["T"]
    if not nu > 0:
        raise ConfigError(f"dynamics.nu={nu} must be > 0")
    if not T > 0:
        raise ConfigError(f"dynamics.T={T} must be > 0")

    nz = raw["noise"]
    noise = None
    if nz["class"] != "none":
        k_noise = basis.total_dim if nz["k_noise"] is _AUTO else nz["k_noise"]
        M = k_noise if nz["M"] is _AUTO else nz["M"]
        noise = NoiseModel(nz["class"], k_noise, M, nz["gamma"])
        noise.validate(basis)
        nz["k_noise"], nz["M"] = k_noise, M
    L_G = 0.0 if noise is None else growth_constants(noise).L_G

    nd = raw["nudge"]
    if nd["mode"] is _AUTO:
        nd["mode"] = "nudged" if kind in NUDGED_KINDS else "off"
    if nd["N"] is _AUTO:
        nd["N"] = min(shell_complete_N(basis, nu, L_G), noise.M if noise is not None and noise.M > 0 else basis.total_dim)
    if nd["mode"] != "off" and noise is not None and nd["N"] > noise.M:
        raise ConfigError(
            f"nudge.N={nd['N']} > noise.M={noise.M}, violates M >= N required for the shift "
            "lambda g(v) P_N (u - v) to exist")
    if not 1 <= nd["N"] <= basis.total_dim:
        raise ConfigError(f"nudge.N={nd['N']} outside [1, {basis.total_dim}]")
    lam_N = basis.eigenvalue(nd["N"])
    if nd["lambda"] is _AUTO:
        nd["lambda"] = 0.5 * nu * lam_N
    nudge = NudgeConfig(nd["mode"], nd["N"], nd["lambda"], nd["girsanov_K"])

    f = parse_field(raw["forcing"]["field"], basis, base_dir)
    if f is None:
        raise ConfigError("forcing.field cannot be none")
    ini = raw["initial"]
    u0 = parse_field(ini["u0"], basis, base_dir)
    if u0 is None:
        raise ConfigError("initial.u0 cannot be none")
    if ini["v0"] is _AUTO:
        ini["v0"] = {"mixing": "random(energy=1.0, seed=2)"}.get(kind, "zero" if kind in PAIR_KINDS else "none")
    v0 = parse_field(ini["v0"], basis, base_dir)
    if kind in PAIR_KINDS + ("mixing",) and v0 is None:
        raise ConfigError(f"experiment.kind={kind} needs initial.v0")

    lam_eff = 0.0 if nudge.mode == "off" else nudge.lam
    if dyn["dt"] is _AUTO:
        rule = default_dt(basis, nu, lam_eff, u0)
        dyn["dt"] = T / math.ceil(T / rule - 1e-9)
    monitors = []
    for item in filter(None, (s.strip() for s in raw["tau"]["monitors"].split(","))):
        try:
            r, b = item.split(":")
            monitors.append((float(r), float(b)))
        except ValueError:
            raise ConfigError(f"bad tau monitor {item!r}, expected R:beta") from None

    sim = SimConfig(nu=nu, dt=dyn["dt"], T=T, kmax=kmax, forcing=f, noise=noise, nudge=nudge,
                    seed=ex["seed"], ensemble_size=ex["ensemble_size"], tau_monitors=tuple(monitors),
                    sample_stride=dyn["sample_stride"], snapshot_times=tuple(_floats(dyn["snapshot_times"])),
                    blowup_ceiling=dyn["blowup_ceiling"])
    check_dt(sim, u0)

    regime = None if ex["regime"] == "none" else ex["regime"]
    validate_regime(sim, regime)

    dg = raw["diagnostics"]
    if kind == "moments" and noise is not None and noise.growth_class == "linear" and dg["q"] > 2:
        qmax = linear_q_limit(sim)
        if not dg["q"] < qmax:
            raise ConfigError(f"diagnostics.q={dg['q']} inadmissible for the linear class: "
                              f"need q in [2, {qmax:.6g})")
    if dg["q"] < 2:
        raise ConfigError(f"diagnostics.q={dg['q']} must be >= 2")
    er = raw["ergodicity"]
    if er["eps"] < 0 or er["eps_rel"] < 0:
        raise ConfigError("ergodicity.eps and eps_rel must be >= 0")

    formats = tuple(s.strip() for s in ex["formats"].split(",") if s.strip())
    if set(formats) - {"csv"}:
        raise ConfigError(f"unsupported report formats {sorted(set(formats) - {'csv'})}")

    # unresolved sentinels only survive for keys that do not apply (noise off)
    resolved = {sec: {k: _fmt(v) for k, v in kv.items() if v is not _AUTO} for sec, kv in raw.items()}
    params = {sec: dict(kv) for sec, kv in raw.items()
              if sec in ("diagnostics", "foias_prodi", "ergodicity", "coupling", "sweep")}
    return ExperimentSpec(ex["name"], kind, sim, u0, v0, ex["output_dir"], formats, regime,
                          ex["checkpoint_every"], params, resolved)


def load_config(path: str) -> ExperimentSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
