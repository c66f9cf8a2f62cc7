from __future__ import annotations

import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from panpriv.cli import main
from panpriv.dp import RRParams
from panpriv.errors import ConfigurationError
from panpriv.sim import (
    ExperimentConfig,
    StreamGenSpec,
    count_error_reference,
    generate_streams,
    parse_bits,
    read_stream_file,
    run_experiment,
    run_intrusion_check,
    run_lowerbound_table,
    run_reduction_demo,
)


def test_stream_spec_parse():
    assert StreamGenSpec.parse("bernoulli:0.1") == StreamGenSpec("bernoulli", 0.1)
    assert StreamGenSpec.parse("fixed-count:3").param == 3
    for bad in ("poisson:1", "bernoulli:1.5", "fixed-count:-1", "file:", "at-most-one:x"):
        with pytest.raises(ConfigurationError):
            StreamGenSpec.parse(bad)


def test_generate_streams_classes():
    rng = np.random.default_rng(0)
    X = generate_streams(StreamGenSpec.parse("at-most-one:0.7"), 2000, 10, rng)
    assert X.shape == (10, 2000) and X.sum(axis=0).max() <= 1
    assert abs(X.sum() / 2000 - 0.7) < 0.05
    X = generate_streams(StreamGenSpec.parse("fixed-count:3"), 50, 8, rng)
    assert np.all(X.sum(axis=0) == 3)
    X = generate_streams(StreamGenSpec.parse("bernoulli:0"), 10, 5, rng)
    assert not X.any()
    with pytest.raises(ConfigurationError):
        generate_streams(StreamGenSpec.parse("fixed-count:9"), 5, 8, rng)


def test_stream_file(tmp_path):
    p = tmp_path / "s.txt"
    p.write_text("0101\n1111\n\n0000\n")
    X = read_stream_file(p)
    assert X.shape == (4, 3) and X[:, 0].tolist() == [0, 1, 0, 1]
    cfg = ExperimentConfig(n=3, T=4, eps0=math.inf, stream=f"file:{p}")
    assert run_experiment(cfg).trials[0]["true_value"] == 2
    (tmp_path / "bad.txt").write_text("01\n012\n")
    with pytest.raises(ConfigurationError):
        read_stream_file(tmp_path / "bad.txt")


def test_config_field_messages():
    with pytest.raises(ConfigurationError, match="eps0"):
        ExperimentConfig(protocol="count").validate()
    with pytest.raises(ConfigurationError, match="n: must be at least 1"):
        ExperimentConfig(n=0, eps0=1).validate()
    with pytest.raises(ConfigurationError, match="field"):
        ExperimentConfig(protocol="count-2s", eps0=1, field=101, n=100).validate()
    with pytest.raises(ConfigurationError, match="decode bound"):
        ExperimentConfig(protocol="mean", n=10_000, k=8, variance=0).validate()
    with pytest.raises(ConfigurationError, match="group"):
        ExperimentConfig(eps0=1, group="nope").validate()


def test_count_noiseless_exact():
    res = run_experiment(ExperimentConfig(n=1000, T=20, eps0=math.inf, stream="bernoulli:0.1"))
    assert res.summary["mean_abs_error"] == 0
    assert res.trials[0]["true_value"] > 0


def test_mean_fixed_count_exact():
    res = run_experiment(ExperimentConfig(protocol="mean", n=500, T=10, k=8, variance=0, stream="fixed-count:3"))
    assert res.trials[0]["mean"] == 3.0 and res.trials[0]["abs_error"] == 0


def test_histogram_and_two_server_runs():
    h = run_experiment(ExperimentConfig(protocol="histogram", n=300, T=6, k=3, eps0=math.inf, stream="bernoulli:0.3"))
    assert h.summary["max_bucket_error"] == 0
    assert sum(h.trials[0]["true_value"]) == 300
    t = run_experiment(ExperimentConfig(protocol="count-2s", n=200, T=5, eps0=math.inf, stream="bernoulli:0.2"))
    assert t.summary["mean_abs_error"] == 0 and t.summary["rejected"] == 0


def test_count_error_reference_scale():
    res = run_experiment(ExperimentConfig(n=2000, T=5, eps0=1.0, trials=10, stream="bernoulli:0.2"))
    assert res.summary["mean_abs_error"] <= res.summary["error_reference"]
    assert res.summary["error_reference"] == pytest.approx(count_error_reference(2000, RRParams(1.0)))


def test_aggregator_eps_selection_path():
    res = run_experiment(ExperimentConfig(n=1000, T=5, eps=1.0, delta=1e-6))
    assert res.summary["eps0"] >= 1.0


def test_determinism_bytes():
    cfg = dict(n=300, T=5, eps0=1.0, trials=3, seed=7)
    a = run_experiment(ExperimentConfig(**cfg)).to_json()
    b = run_experiment(ExperimentConfig(**cfg)).to_json()
    assert a == b
    c = run_experiment(ExperimentConfig(**{**cfg, "seed": 8})).to_json()
    assert a != c
    assert "wall_clock" not in json.loads(a)


def test_csv_output():
    res = run_experiment(ExperimentConfig(n=100, T=3, eps0=1.0, trials=2))
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    assert len(rows) == 2 and set(rows[0]) >= {"trial", "true_value", "estimate", "abs_error"}


def test_parse_bits():
    assert parse_bits("0110") == [0, 1, 1, 0]
    with pytest.raises(ConfigurationError):
        parse_bits("01a")


def test_intrusion_check_reports():
    rep = run_intrusion_check("histogram", [0, 0, 0], [1, 1, 1])
    assert rep["structural"]["passed"] and rep["passed"] and "exact" not in rep
    rep = run_intrusion_check("count", [0, 1], [1, 0], fresh_enc=True)
    assert rep["structural"]["passed"]
    assert rep["exact"]["normalized_equal"] and not rep["exact"]["equal"]
    assert not rep["passed"]
    leaky = run_intrusion_check("count-leaky", [0, 1, 0], [0, 0, 0])
    assert not leaky["structural"]["passed"] and not leaky["passed"]


def test_lowerbound_table():
    rows = run_lowerbound_table([1, 2, 4, 16, 64], [math.log(3), 1.0], trials=5000, seed=1)
    row = next(r for r in rows if r["T"] == 2 and r["eps"] == pytest.approx(math.log(3)))
    assert row["tv_exact"] == pytest.approx(0.375, abs=1e-12)
    assert row["stated_factor2"] == pytest.approx(0.75)
    for eps in (math.log(3), 1.0):
        tvs = [r["tv_exact"] for r in rows if r["eps"] == pytest.approx(eps)]
        assert all(x > y for x, y in zip(tvs, tvs[1:]))
    for r in rows:
        assert r["empirical_tv"] <= r["tv_exact"] + (r["ci_high"] - r["ci_low"])


def test_reduction_demo():
    rep = run_reduction_demo(60, 4, math.inf, 10, seed=3)
    assert rep["failures"] == 0 and rep["eps0"] == "inf" and len(rep["records"]) == 10


def test_cli_run_deterministic(tmp_path, capsys):
    args = ["run", "--protocol", "count", "--n", "200", "--T", "5", "--eps0", "1", "--trials", "2", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    data = json.loads((tmp_path / "a.json").read_text())
    assert data["schema_version"] == 1 and data["config"]["seed"] == 4
    assert main(["run", "--model", "two-server", "--n", "50", "--T", "3", "--eps0", "inf", "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("trial,")


def test_cli_errors_exit_2(capsys):
    assert main(["run", "--protocol", "mean", "--n", "10000", "--variance", "0"]) == 2
    assert "decode bound" in capsys.readouterr().err


def test_cli_intrude_exit_codes(capsys):
    assert main(["intrude", "--protocol", "histogram", "--streams", "000", "111"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["protocol"] == "histogram" and out["passed"]
    assert main(["intrude", "--protocol", "count-leaky", "--streams", "010", "000"]) == 1


def test_cli_lowerbound_and_reduce(capsys):
    assert main(["lowerbound", "--T", "2,4", "--eps", "1", "--trials", "2000"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [int(r["T"]) for r in rows] == [2, 4]
    assert main(["lowerbound", "--gap", "--T", "4", "--n", "500", "--trials", "2", "--format", "json"]) == 0
    gap = json.loads(capsys.readouterr().out)
    assert set(gap[0]) >= {"baseline_error", "crypto_error"}
    assert main(["reduce-pke", "--n", "40", "--T", "3", "--trials", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["failures"] == 0


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "panpriv.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "reduce-pke" in out.stdout
