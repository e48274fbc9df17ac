import csv
import json
import math

import numpy as np
import pytest
import yaml

from safempc import cli
from safempc.config import dumps_scenario, load_bundled


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["run", "--scenario", "p5_1_stabilization", "--gamma", "0.3", "--out", str(out)]) == 0
    rows = read_csv(out / "trajectory.csv")
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["reached_goal"] is True
    assert metrics["steps"] == len(rows) - 1
    for row in rows[1:]:
        assert all(math.isfinite(float(v)) for v in row[:-1])
    svg = (out / "trajectory.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_run_overrides_reach_the_scenario(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["run", "--scenario", "tracking", "--horizon", "4", "--scheme", "bt", "--duration", "1.5",
                     "--max-substeps", "2", "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert (metrics["N"], metrics["scheme"], metrics["duration"]) == (4, "bt", 1.5)
    assert len(read_csv(out / "trajectory.csv")) - 1 == 16


def test_missing_radius_names_field(tmp_path, capsys):
    data = yaml.safe_load(dumps_scenario(load_bundled("p5_1_stabilization")))
    del data["obstacles"][2]["radius"]
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(data))
    assert cli.main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) != 0
    assert "obstacles[2].radius" in capsys.readouterr().err


def test_bad_override_is_an_error(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "p5_1_stabilization", "--gamma", "1.5", "--out", str(tmp_path)]) != 0
    assert "gamma" in capsys.readouterr().err


def test_compare_needs_two_variants(tmp_path, capsys):
    assert cli.main(["compare", "--scenario", "tracking", "--variant", "N=5", "--out", str(tmp_path)]) != 0


def test_compare_report(tmp_path):
    out = tmp_path / "cmp"
    code = cli.main(["compare", "--scenario", "tracking", "--duration", "2", "--variant", "scheme=cbf,N=5",
                     "--variant", "scheme=cbf,N=10", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert [r["N"] for r in report["variants"]] == [5, 10]
    for label in ("schemecbf_N5", "schemecbf_N10"):
        assert (out / label / "trajectory.csv").exists()


def test_compare_reports_failing_variant(tmp_path):
    s = load_bundled("tracking").with_overrides(duration=0.5)
    outcomes = cli.compare(s, [{"N": 3}, {"gamma": 2.0}], None)
    assert outcomes[0].error is None and outcomes[1].error
    assert outcomes[1].row()["success"] is False


def test_parse_variant():
    assert cli.parse_variant("scheme=bt, horizon=5,gamma=0.2") == {"scheme": "bt", "N": 5, "gamma": 0.2}
    with pytest.raises(Exception):
        cli.parse_variant("colour=red")


def test_reproduce_unknown_id(capsys):
    assert cli.main(["reproduce", "fig9"]) != 0


def test_csv_row_count_matches_log(tmp_path):
    s = load_bundled("tracking").with_overrides(duration=1.0)
    res = cli.execute(s, tmp_path)
    assert len(read_csv(tmp_path / "trajectory.csv")) - 1 == len(res.log)


def test_outputs_deterministic_except_timing(tmp_path):
    s = load_bundled("p5_1_stabilization").with_overrides(duration=3.0)
    cli.execute(s, tmp_path / "a")
    cli.execute(s, tmp_path / "b")
    a, b = read_csv(tmp_path / "a" / "trajectory.csv"), read_csv(tmp_path / "b" / "trajectory.csv")
    j = cli.CSV_COLUMNS.index("solve_ms")
    assert [r[:j] + r[j + 1:] for r in a] == [r[:j] + r[j + 1:] for r in b]
    assert (tmp_path / "a" / "trajectory.svg").read_bytes() == (tmp_path / "b" / "trajectory.svg").read_bytes()


def test_empty_h_min_without_obstacles(tmp_path):
    s = load_bundled("tracking").with_overrides(obstacles=(), duration=0.3)
    cli.execute(s, tmp_path)
    rows = read_csv(tmp_path / "trajectory.csv")
    assert all(r[cli.CSV_COLUMNS.index("h_min")] == "" for r in rows[1:])


def test_time_series_plot(tmp_path):
    s = load_bundled("tracking").with_overrides(duration=0.5)
    res = cli.execute(s, None)
    cli.plot_time_series([("a", res.log)], tmp_path / "ts.svg")
    assert "<svg" in (tmp_path / "ts.svg").read_text()
