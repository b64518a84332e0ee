import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from heatbie.cli import (ConfigError, UnsupportedStudyError, convergence_study, dump_config, main,
                         parse_config, run)

ELLIPSES = """
[curve.0]
family = ellipse
center = 0.5, 0.5
axes = 0.42, 0.30
boundary = {b0}

[curve.1]
family = ellipse
center = 0.58, 0.54
axes = 0.12, 0.07
rotation = 0.5
boundary = {b1}
"""

SMALL_HEAT = """
[problem]
forcing = none
initial = constant
initial_value = 0.0
""" + ELLIPSES.format(b0=0.0, b1=1.0) + """
[discretization]
n = 128
uniform_level = 5
extension = dirichlet

[stepping]
scheme = euler
dt = 1e-3
steps = 3
snapshot_stride = 1
"""

SMALL_AC = """
[problem]
forcing = allen_cahn
initial = random
epsilon = 1e-5
seed = 11
""" + ELLIPSES.format(b0=0.0, b1=0.0) + """
[discretization]
n = 128
uniform_level = 5
extension = dirichlet

[stepping]
dt = 1.0
steps = 3
snapshot_stride = 1
"""

SMALL_EX1 = """
[problem]
forcing = example1
initial = example1

[curve.0]
family = circle
center = 0.5, 0.5
radius = 0.4
boundary = example1

[curve.1]
family = circle
center = 0.5, 0.5
radius = 0.1
boundary = example1

[discretization]
n = 64
uniform_level = 5

[stepping]
dt = 5e-3
t_final = 5e-3
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def digest(directory):
    h = hashlib.sha256()
    for f in sorted(Path(directory).glob("step_*.csv")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@pytest.mark.parametrize("text, fragment", [
    ("[stepping]\ndt = 1e-3\nsteps = 1\n", "no curves"),
    (SMALL_HEAT.replace("[stepping]", "[stepping]\nbogus = 1"), "unknown key 'bogus'"),
    (SMALL_HEAT + "\n[extra]\na = 1\n", "unknown section"),
    (SMALL_HEAT.replace("dt = 1e-3", "dt = fast"), "[stepping] dt"),
    (SMALL_HEAT.replace("dt = 1e-3", "dt = -1"), "dt must be positive"),
    (SMALL_HEAT.replace("steps = 3", ""), "t_final or steps"),
    (SMALL_HEAT.replace("family = ellipse", "family = square", 1), "unknown family"),
    (SMALL_HEAT.replace("n = 128", "n = 15"), "n must be even"),
    ("[problem\nforcing = none\n", "line"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert fragment in str(exc.value)


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", write(tmp_path, "[stepping]\ndt = 1\nsteps = 1\n")]) == 2
    assert "no curves" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.ini")]) == 2


def test_intersecting_geometry_is_config_error(tmp_path):
    bad = SMALL_HEAT.replace("center = 0.58, 0.54", "center = 0.88, 0.54")
    assert main(["run", write(tmp_path, bad), "--output-dir", str(tmp_path / "o")]) == 2


def test_dump_config_roundtrip():
    cfg = parse_config(SMALL_HEAT)
    assert parse_config(dump_config(cfg)) == cfg


def test_run_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["run", write(tmp_path, SMALL_HEAT), "--output-dir", str(out)]) == 0
    snaps = sorted(out.glob("step_*.csv"))
    assert [s.name for s in snaps] == ["step_000001.csv", "step_000002.csv", "step_000003.csv"]
    data = np.loadtxt(snaps[-1], delimiter=",", skiprows=1)
    assert snaps[-1].read_text().splitlines()[0] == "x,y,level,value"
    assert data.shape == (1024 * 16, 4)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 3
    assert -1e-6 <= summary["min_value"] and summary["max_value"] <= 1 + 1e-6
    assert summary["gmres_iterations_total"] > 0 and "gmres" in summary["stage_seconds"]
    log = [json.loads(l) for l in (out / "run_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3]
    # the stored config replays the run
    assert parse_config((out / "config.ini").read_text()) == parse_config(SMALL_HEAT).__class__(
        **{**parse_config(SMALL_HEAT).__dict__, "directory": str(out)})


def test_snapshot_stride_zero(tmp_path):
    cfg = parse_config(SMALL_HEAT.replace("snapshot_stride = 1", "snapshot_stride = 0"))
    run(cfg, tmp_path / "r")
    assert not list((tmp_path / "r").glob("step_*.csv"))


def test_seeded_run_is_bitwise_reproducible(tmp_path):
    cfg = parse_config(SMALL_AC)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    # a different seed changes the result
    run(parse_config(SMALL_AC.replace("seed = 11", "seed = 12")), tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


def test_seed_override_and_threads(tmp_path):
    cfg = write(tmp_path, SMALL_AC)
    outs = []
    for threads in ("1", "2"):
        out = tmp_path / f"t{threads}"
        r = subprocess.run([sys.executable, "-m", "heatbie.cli", "--threads", threads, "run", cfg,
                            "--seed", "5", "--output-dir", str(out)], capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append(digest(out))
        assert "seed = 5" in (out / "config.ini").read_text()
    assert outs[0] == outs[1]


def test_study_single_dt(tmp_path, capsys):
    assert main(["study", write(tmp_path, SMALL_EX1), "--dt", "5e-3",
                 "--output-dir", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert "order: n/a" in out
    table = (tmp_path / "s" / "study_euler.csv").read_text().splitlines()
    assert table[0] == "dt,steps,error,seconds" and len(table) == 3
    assert table[-1] == "# order,n/a"


def test_study_requires_example1(tmp_path):
    with pytest.raises(UnsupportedStudyError):
        convergence_study(parse_config(SMALL_HEAT), [1e-3])
    assert main(["study", write(tmp_path, SMALL_HEAT), "--dt", "1e-3"]) == 2


def test_solver_failure_exit_3(tmp_path, capsys):
    bad = SMALL_HEAT.replace("extension = dirichlet", "extension = dirichlet\nfmm_tol = 1e-16")
    assert main(["run", write(tmp_path, bad), "--output-dir", str(tmp_path / "o")]) == 3
    err = capsys.readouterr().err
    assert err.startswith("solver failure: [") and "tolerance below 1e-14" in err


def test_verify(capsys):
    assert main(["verify", "quadrature"]) == 0
    assert capsys.readouterr().out.count("PASS") == 3
    assert main(["verify", "nonsense"]) == 2
