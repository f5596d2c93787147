"""CSV reports and checkpoint files.

Checkpoint layout::

    b"STNSCKP1" | uint64 LE header length | JSON header | binary payload

The header holds the config hash, the resolved config text, time, step
and per-trajectory RNG states; the payload holds each trajectory's u and v
as serialized fields followed by the accumulators and log buffers as raw
little-endian arrays whose offsets are listed in the header.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct

import numpy as np

from .diagnostics import Table
from .dynamics import LOG_SERIES, ChunkRunner, SimConfig
from .spectral import SpectralField, field_from_bytes, field_to_bytes

MAGIC = b"STNSCKP1"

_UNITS = {
    "time": "t", "t0": "t", "t1": "t", "horizon": "t",
    "mean": "H^2", "se": "H^2", "bound": "H^2", "R": "H^2",
    "prob": "probability", "wilson_lo": "probability", "wilson_hi": "probability",
    "fit_bound": "probability", "rate": "1/t",
    "u_h2": "H^2", "v_h2": "H^2", "diff_h2": "H^2", "lowdiff_h2": "H^2", "u_v2": "V^2", "f_u": "H^2",
    "accum_v": "V^2 t", "accum_low": "H^2 t", "accum_shift": "H^2 t", "accum_fu": "H^2 t",
    "final_mean": "H^2", "lambda_N": "1",
}


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    return str(x)


def write_csv(path: str, table: Table, config_hash: str, units: dict | None = None):
    units = {**_UNITS, **(units or {})}
    lines = [f"# config_hash={config_hash}"]
    lines += [f"# {k}={_cell(v)}" for k, v in table.meta.items()]
    lines.append(",".join(f"{c} [{units.get(c, '1')}]" for c in table.columns))
    lines += [",".join(_cell(x) for x in row) for row in table.rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path: str):
    """Return (meta, columns, rows-as-float-array) of a file written by write_csv."""
    meta, cols, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif cols is None:
                cols = [c.split(" [")[0] for c in line.split(",")]
            elif line:
                rows.append([float(x) if x not in ("", "True", "False") else math.nan for x in line.split(",")])
    return meta, cols, np.array(rows)


def log_table(log, basis_dim=None) -> Table:
    cols = ["time"] + list(LOG_SERIES) + ["sigma_flag"]
    rows = [[log.times[i]] + [log.series[k][i] for k in LOG_SERIES] + [bool(log.sigma_flag[i])]
            for i in range(len(log.times))]
    return Table(cols, rows, {"trajectory": log.index})


# ----------------------------------------------------------------------
# checkpoints

class _Payload:
    def __init__(self):
        self.buf = io.BytesIO()

    def add(self, arr) -> dict:
        a = np.ascontiguousarray(arr)
        dtype = "|b1" if a.dtype == bool else "<f8"
        a = a.astype(dtype)
        off = self.buf.tell()
        self.buf.write(a.tobytes())
        return {"offset": off, "dtype": dtype, "shape": list(a.shape)}


def _get(payload: bytes, base: int, desc: dict) -> np.ndarray:
    n = int(np.prod(desc["shape"])) if desc["shape"] else 1
    itemsize = np.dtype(desc["dtype"]).itemsize
    start = base + desc["offset"]
    return np.frombuffer(payload[start:start + n * itemsize], dtype=desc["dtype"]).reshape(desc["shape"]).copy()


def _chunk_to_header(runner: ChunkRunner, pay: _Payload, cfg: SimConfig) -> dict:
    basis = cfg.basis
    n_obs, n_mon = cfg.n_obs, len(cfg.tau_monitors)
    st = runner.get_state()
    n_rec = len(st["rec_t"])
    B = len(st["indices"])
    fields_at = pay.buf.tell()
    for j in range(B):
        pay.buf.write(field_to_bytes(SpectralField(basis, st["u"][j])))
        if st["pair"]:
            pay.buf.write(field_to_bytes(SpectralField(basis, st["v"][j])))
    arrays = {f"acc.{k}": pay.add(v) for k, v in st["acc"].items()}
    for k in ("sigma", "sigma_time", "sigma_accum", "tau", "tau_time"):
        arrays[k] = pay.add(st[k])
    for k, rows in st["records"].items():
        arrays[f"rec.{k}"] = pay.add(np.array(rows).reshape(n_rec, B))
    arrays["rec_t"] = pay.add(np.array(st["rec_t"], dtype=float))
    arrays["rec_obs"] = pay.add(np.array(st["rec_obs"]).reshape(n_rec, B, n_obs))
    arrays["rec_sigma"] = pay.add(np.array(st["rec_sigma"], dtype=bool).reshape(n_rec, B))
    arrays["rec_tau"] = pay.add(np.array(st["rec_tau"], dtype=bool).reshape(n_rec, B, n_mon))
    snaps = []
    for t, (u, v) in st["snapshots"].items():
        snaps.append({"t": t, "u": pay.add(u), "v": pay.add(v)})
    return {"indices": [int(i) for i in st["indices"]], "step": st["step"], "pair": st["pair"],
            "rng": st["rng"], "fields_offset": fields_at, "arrays": arrays, "snapshots": snaps}


def save_checkpoint(path: str, cfg: SimConfig, runners, resolved_text: str = "", tag: str = "main",
                    extra: dict | None = None):
    pay = _Payload()
    chunks = [_chunk_to_header(r, pay, cfg) for r in runners]
    step = runners[0].step if runners else 0
    header = {"config_hash": cfg.config_hash(), "resolved_config": resolved_text, "tag": tag,
              "t": step * cfg.dt, "step": step, "chunks": chunks, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(hb)) + hb + pay.buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint_header(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16:16 + n].decode("utf-8"))
    return header, data, 16 + n


def load_checkpoint(path: str, cfg: SimConfig):
    """Rebuild the chunk runners stored in a checkpoint for configuration ``cfg``."""
    header, data, base = read_checkpoint_header(path)
    if header["config_hash"] != cfg.config_hash():
        raise ValueError("checkpoint was written for a different configuration")
    runners = []
    for ch in header["chunks"]:
        B = len(ch["indices"])
        off = base + ch["fields_offset"]
        us, vs = [], []
        for _ in range(B):
            u, off = field_from_bytes(data, off)
            us.append(u.coeffs)
            if ch["pair"]:
                v, off = field_from_bytes(data, off)
                vs.append(v.coeffs)
        a = {k: _get(data, base, d) for k, d in ch["arrays"].items()}
        n_rec = a["rec_t"].shape[0]
        st = {
            "indices": np.array(ch["indices"], dtype=np.int64), "step": ch["step"], "pair": ch["pair"],
            "u": np.array(us), "v": np.array(vs) if ch["pair"] else None,
            "acc": {k[4:]: v for k, v in a.items() if k.startswith("acc.")},
            "sigma": a["sigma"], "sigma_time": a["sigma_time"], "sigma_accum": a["sigma_accum"],
            "tau": a["tau"].reshape(B, -1) if a["tau"].size else np.zeros((B, 0), dtype=bool),
            "tau_time": a["tau_time"].reshape(B, -1) if a["tau_time"].size else np.zeros((B, 0)),
            "rng": ch["rng"],
            "records": {k: [a[f"rec.{k}"][i] for i in range(n_rec)] for k in LOG_SERIES},
            "rec_t": [float(x) for x in a["rec_t"]],
            "rec_obs": [a["rec_obs"][i] for i in range(n_rec)],
            "rec_sigma": [a["rec_sigma"][i] for i in range(n_rec)],
            "rec_tau": [a["rec_tau"][i] for i in range(n_rec)],
            "snapshots": {s["t"]: (_get(data, base, s["u"]), _get(data, base, s["v"])) for s in ch["snapshots"]},
        }
        runners.append(ChunkRunner.from_state(cfg, st))
    return header, runners
