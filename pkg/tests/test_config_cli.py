import json
import math
import os

import numpy as np
import pytest

from stochns.cli import main
from stochns.config import parse_config
from stochns.ergodicity import regime_threshold
from stochns.errors import ConfigError
from stochns.io import read_checkpoint_header, read_csv
from stochns.noise import NoiseModel, growth_constants

MINIMAL = """
[spectral]
kmax = 2
[dynamics]
nu = 1.0
"""

DECAY = """
[experiment]
kind = simulate
[spectral]
kmax = 3
[dynamics]
nu = 0.5
T = 1.0
dt = 0.01
[noise]
class = none
[initial]
u0 = modes(0:1.0)
"""

PAIR = """
[experiment]
kind = foias_prodi
ensemble_size = 8
seed = 4
checkpoint_every = 0.25
[spectral]
kmax = 2
[dynamics]
nu = 1.0
T = 1.0
dt = 0.01
sample_stride = 5
[nudge]
N = 8
[initial]
u0 = random(energy=1.0, seed=1)
v0 = random(energy=0.5, seed=2)
"""


def write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_minimal_defaults():
    spec = parse_config(MINIMAL)
    assert spec.kind == "simulate" and spec.sim.ensemble_size == 1 and spec.sim.seed == 0
    assert spec.sim.noise.growth_class == "bounded" and spec.sim.noise.M == 24
    assert spec.v0 is None and spec.sim.nudge.mode == "off"
    assert spec.sim.T == 1.0 and 0 < spec.sim.dt <= 1.0
    assert math.isclose(spec.sim.T / spec.sim.dt, round(spec.sim.T / spec.sim.dt), rel_tol=1e-12)


@pytest.mark.parametrize("text,msg", [
    (MINIMAL + "bogus = 1\n", "dynamics.bogus"),
    (MINIMAL + "[extra]\nx = 1\n", "[extra]"),
    ("[spectral]\nkmax = 2\n", "dynamics.nu"),
    (MINIMAL.replace("nu = 1.0", "nu = -1"), "nu"),
    (MINIMAL + "[experiment]\nkind = dance\n", "experiment.kind"),
    (MINIMAL + "[noise]\nclass = cubic\n", "cubic"),
    (MINIMAL + "T = abc\n", "dynamics.T"),
    (MINIMAL + "[initial]\nu0 = modes(99:1.0)\n", "99"),
    (MINIMAL + "dt = 2.0\n", "dt"),
])
def test_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_nudge_exceeds_noise_modes():
    text = PAIR + "[noise]\nM = 4\n"
    with pytest.raises(ConfigError, match="M >= N"):
        parse_config(text)


def test_linear_stability_gate():
    S = growth_constants(NoiseModel("linear", 24, 24)).S
    base = MINIMAL + "[noise]\nclass = linear\n[experiment]\nregime = stability\n"
    thr = regime_threshold(parse_config(MINIMAL + "[noise]\nclass = linear\n").sim, "stability")
    assert thr == pytest.approx(11 * S / 2, rel=1e-15)
    with pytest.raises(ConfigError, match="regime=stability"):
        parse_config(base.replace("nu = 1.0", f"nu = {float(thr)!r}"))
    spec = parse_config(base.replace("nu = 1.0", f"nu = {float(np.nextafter(thr, 10))!r}"))
    assert spec.regime == "stability"


def test_resolved_roundtrip():
    spec = parse_config(PAIR)
    again = parse_config(spec.resolved_text())
    assert again.sim.config_hash() == spec.sim.config_hash()
    assert again.resolved_text() == spec.resolved_text()
    assert np.array_equal(again.u0, spec.u0) and np.array_equal(again.v0, spec.v0)


def test_hash_changes_with_config():
    a = parse_config(PAIR).sim.config_hash()
    b = parse_config(PAIR.replace("seed = 4", "seed = 5")).sim.config_hash()
    assert a != b


def test_simulate_csv_decay(tmp_path):
    out = tmp_path / "out"
    assert main(["run", write(tmp_path, DECAY), "-o", str(out)]) == 0
    meta, cols, rows = read_csv(str(out / "trajectory_0.csv"))
    assert meta["config_hash"] == parse_config(DECAY).sim.config_hash()
    n = np.arange(len(rows))
    expect = (1 + 0.5 * 0.01) ** (-2.0 * n)
    np.testing.assert_allclose(rows[:, cols.index("u_h2")], expect, rtol=1e-12, atol=0)
    header = (out / "trajectory_0.csv").read_text().splitlines()
    assert header[0].startswith("# config_hash=") and any("u_h2 [H^2]" in h for h in header)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "pass" and summary["checks"][0]["name"] == "energy_inequality"
    assert (out / "resolved.ini").read_text() == parse_config(DECAY).resolved_text()


def test_rerun_byte_identical(tmp_path):
    cfg, out = write(tmp_path, PAIR), tmp_path / "out"
    snaps = []
    for _ in range(2):
        main(["run", cfg, "-o", str(out)])
        snaps.append({f: (out / f).read_bytes() for f in sorted(os.listdir(out))})
    assert "decay.csv" in snaps[0] and "checkpoint.bin" in snaps[0]
    assert snaps[0] == snaps[1]


def test_resume_matches_uninterrupted(tmp_path):
    cfg = write(tmp_path, PAIR)
    full = tmp_path / "full"
    code = main(["run", cfg, "-o", str(full)])
    ck = str(full / "checkpoint.bin")
    header, _, _ = read_checkpoint_header(ck)
    assert 0 < header["step"] < 100 and header["tag"] == "main"
    res = tmp_path / "res"
    assert main(["resume", ck, "-o", str(res)]) == code
    for f in ("decay.csv", "fit.csv", "summary.json"):
        assert (full / f).read_bytes() == (res / f).read_bytes(), f


def test_exit_codes(tmp_path, capsys):
    ok = PAIR.replace("checkpoint_every = 0.25", "")
    assert main(["run", write(tmp_path, ok + "[foias_prodi]\nmin_factor = 1.0\nmin_r2 = 0.0\n"),
                 "-o", str(tmp_path / "ok")]) == 0
    assert main(["run", write(tmp_path, ok + "[foias_prodi]\nmin_factor = 1e300\n"), "-o",
                 str(tmp_path / "fail")]) == 2
    summary = json.loads((tmp_path / "fail" / "summary.json").read_text())
    assert summary["status"] == "fail" and "decay_factor" in summary["failed"]
    blow = ok.replace("sample_stride = 5", "sample_stride = 5\nblowup_ceiling = 0.1")
    assert main(["run", write(tmp_path, blow), "-o", str(tmp_path / "blow")]) == 3
    assert json.loads((tmp_path / "blow" / "summary.json").read_text())["status"] == "blowup"
    assert main(["run", write(tmp_path, MINIMAL + "x = 1\n")]) == 4
    assert main(["run", str(tmp_path / "missing.ini")]) == 4
    assert main(["resume", str(tmp_path / "missing.bin")]) == 4
    err = capsys.readouterr().err
    assert '"status": "config_error"' in err


def test_validate_prints_resolved(tmp_path, capsys):
    assert main(["validate", write(tmp_path, PAIR)]) == 0
    out = capsys.readouterr().out
    assert out == parse_config(PAIR).resolved_text()
    assert "lambda = " in out and "N = 8" in out
