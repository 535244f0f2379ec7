import json
from pathlib import Path

import pytest

from livemesh.cli import main

MINIMAL = """\
name: cli-mini
seed: 3
duration_ms: 30000
topology:
  consumers: 1
  consumer_capacity: 1400.0
join:
  consumer_start_ms: 5000.0
  consumer_window_ms: 1000.0
sim:
  trace: true
"""


@pytest.fixture
def mini_config(tmp_path):
    path = tmp_path / "mini.yaml"
    path.write_text(MINIMAL, encoding="utf-8")
    return path


def test_run_smoke_exit_zero(mini_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(mini_config), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["aggregates"]["mean_continuity"] == 1.0
    csv = (out / "metrics.csv").read_text().splitlines()
    row = next(l for l in csv if l.startswith("c0000"))
    assert row.split(",")[8] == "1.000"
    assert (out / "report.json").exists()
    assert (out / "trace.log").exists()


def test_validation_failure_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology:\n  consumer_capacity: -5\n", encoding="utf-8")
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "consumer_capacity" in err


def test_missing_config_exit_two(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2


def test_validate_prints_materialized_config(mini_config, capsys):
    assert main(["validate", str(mini_config)]) == 0
    out = capsys.readouterr().out
    assert "doat:" in out and "tracker:" in out and "seed: 3" in out


def test_determinism_same_seed_same_bytes(mini_config, tmp_path):
    assert main(["run", str(mini_config), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(mini_config), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()
    assert (tmp_path / "a" / "trace.log").read_bytes() == (
        tmp_path / "b" / "trace.log"
    ).read_bytes()


def test_sweep_runs_each_point(mini_config, tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = main([
        "sweep", str(mini_config),
        "--axis", "topology.consumers=1,2,3",
        "--out", str(out),
    ])
    assert rc == 0
    table = capsys.readouterr().out
    assert table.count("consumers=") == 3
    points = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert points == ["point000", "point001", "point002"]
    sweep = json.loads((out / "sweep.json").read_text())
    assert len(sweep) == 3
    seeds = [entry["seed"] for entry in sweep]
    assert len(set(seeds)) == 3  # derived seeds differ per point


def test_sweep_empty_axis_single_run(mini_config, tmp_path):
    out = tmp_path / "s"
    assert main(["sweep", str(mini_config), "--out", str(out)]) == 0
    assert (out / "point000" / "metrics.csv").exists()
    assert len(json.loads((out / "sweep.json").read_text())) == 1


def test_sweep_bad_axis_field(mini_config, tmp_path, capsys):
    rc = main([
        "sweep", str(mini_config),
        "--axis", "topology.quantum=1,2",
        "--out", str(tmp_path / "s"),
    ])
    assert rc == 3  # the failed point is recorded, nothing crashes
    assert "unknown field" in capsys.readouterr().err


def test_plotdata_cdf_columns(mini_config, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(mini_config), "--out", str(out)])
    capsys.readouterr()
    assert main(["plotdata", str(out), "--metric", "continuity"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].endswith(":cdf")
    value, frac = lines[1].split("\t")
    assert value == "1.000" and frac == "1.0000"


def test_plotdata_two_runs_two_groups(mini_config, tmp_path, capsys):
    main(["run", str(mini_config), "--out", str(tmp_path / "r1")])
    main(["run", str(mini_config), "--out", str(tmp_path / "r2"), "--seed", "4"])
    capsys.readouterr()
    assert main([
        "plotdata", str(tmp_path / "r1"), str(tmp_path / "r2"),
        "--metric", "mean_lag_ms",
    ]) == 0
    header = capsys.readouterr().out.splitlines()[0]
    assert header.count("mean_lag_ms") == 2


def test_plotdata_unknown_metric_lists_available(mini_config, tmp_path, capsys):
    main(["run", str(mini_config), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["plotdata", str(tmp_path / "r"), "--metric", "joy"]) == 2
    err = capsys.readouterr().err
    assert "continuity" in err and "mean_lag_ms" in err


def test_plotdata_values_sorted_nondecreasing(tmp_path, capsys):
    cfg = tmp_path / "five.yaml"
    cfg.write_text(
        MINIMAL.replace("consumers: 1", "consumers: 5"), encoding="utf-8"
    )
    main(["run", str(cfg), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    main(["plotdata", str(tmp_path / "r"), "--metric", "startup_ms"])
    lines = capsys.readouterr().out.splitlines()[1:]
    values = [float(l.split("\t")[0]) for l in lines if l.split("\t")[0]]
    assert values == sorted(values)
