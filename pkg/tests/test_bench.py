import csv

import numpy as np
import pytest

from heatbie.bench import BenchmarkRecord, append_csv, bench_step, bench_summation, scaling_exponent
from heatbie.cli import parse_config

from test_cli import SMALL_HEAT


def test_scaling_exponent():
    ns = np.array([1e3, 2e3, 4e3])
    assert scaling_exponent(ns, 1e-6 * ns**1.5) == pytest.approx(1.5)


def test_append_csv_header_once(tmp_path):
    p = tmp_path / "r" / "x.csv"
    append_csv(p, [BenchmarkRecord("c", 10, "direct", 0.1)])
    append_csv(p, [BenchmarkRecord("c", 20, "direct", 0.2, 1e-9, "m")])
    rows = list(csv.DictReader(open(p)))
    assert [r["n"] for r in rows] == ["10", "20"]
    assert append_csv(tmp_path / "empty.csv", []) == tmp_path / "empty.csv"
    assert not (tmp_path / "empty.csv").exists()


def test_bench_summation_small():
    recs, exps = bench_summation([500, 1000], check_size=400)
    assert recs[0].case == "accuracy" and recs[0].max_rel_error < 1e-7
    assert {"hierarchical", "direct"} <= set(exps)
    assert exps["direct"] > 1.3


def test_bench_step_tiny():
    text = SMALL_HEAT.replace("n = 128", "n = 64").replace("uniform_level = 5", "uniform_level = 4")
    cfg = parse_config(text)
    rows = bench_step(cfg, [64, 128], steps=1)
    assert [r["n_gamma"] for r in rows] == [128, 256]
    assert abs(rows[0]["gmres_iterations"] - rows[1]["gmres_iterations"]) <= 3
