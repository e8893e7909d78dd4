from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from compplan.cli import main
from compplan.harness import ExperimentConfig, ascii_heatmap, run_composition_study


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seed=7, eta_or=5.0)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert ExperimentConfig.load(path) == cfg


def test_reproduction_layout(reproduction):
    out, report = reproduction
    for sub in ("composition", "planners", "deviation"):
        assert (out / sub).is_dir() and any((out / sub).iterdir())
    for name in ("report.json", "summary.md", "table1.csv", "table2.csv", "config.json"):
        assert (out / name).exists()
    assert report["passed"]
    saved = json.loads((out / "report.json").read_text())
    assert "timing" not in json.dumps(saved)


def test_table1_rows(reproduction):
    out, _ = reproduction
    with open(out / "table1.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert {r["planner"] for r in rows} == {"optimal", "action", "option", "mixed"}
    assert all(0 <= float(r["p"]) <= 1 for r in rows)


def test_heatmap_csv_has_grid_shape(reproduction):
    out, report = reproduction
    M = np.loadtxt(out / "composition" / "fig3_or_composed.csv", delimiter=",")
    assert M.shape == (report["layout"]["height"], report["layout"]["width"])
    assert M.max() == pytest.approx(report["config"]["alpha"])


def test_composition_study_is_deterministic(tmp_path):
    cfg = ExperimentConfig()
    run_composition_study(cfg, tmp_path / "a")
    run_composition_study(cfg, tmp_path / "b")
    for f in ("fig3_or_composed.csv", "fig3_and_composed.csv", "errors.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ascii_heatmap():
    art = ascii_heatmap(np.array([[0.0, 1.0]]), 1.0)
    assert art == "  @@"


def test_missing_grid_file_exits_nonzero(tmp_path):
    cfg = tmp_path / "cfg.json"
    d = ExperimentConfig().to_json()
    d["grid"] = str(tmp_path / "nope.json")
    cfg.write_text(json.dumps(d))
    assert main(["reproduce", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0


def test_cli_pipeline(tmp_path, capsys):
    mdp = tmp_path / "grid.json"
    assert main(["build-grid", "--out", str(mdp)]) == 0
    dfa = tmp_path / "dfa.json"
    assert main(["translate", "--formula", "!C U F (s1 & (F s2 & F s3))", "--ap", "s1,s2,s3,C", "--guard", "C", "--out", str(dfa)]) == 0
    tasks = tmp_path / "tasks.json"
    assert main(["decompose", "--dfa", str(dfa), "--mdp", str(mdp), "--out", str(tasks)]) == 0
    doc = json.loads(tasks.read_text())
    assert doc["ranks"] == [2, 1, 1, 1, 0, None]
    assert main(["solve", "--mdp", str(mdp), "--task", f"{tasks}#0", "--out", str(tmp_path / "solve")]) == 0
    assert (tmp_path / "solve" / "policy.csv").read_text().startswith("state,action,prob")
    opts = tmp_path / "opts"
    assert main(["synth-options", "--mdp", str(mdp), "--tasks", str(tasks), "--out", str(opts)]) == 0
    assert main(["compose", "--mdp", str(mdp), "--options", str(opts), "--op", "or", "--operands", "2,3", "--out", str(tmp_path / "or")]) == 0
    assert main(["plan", "--mdp", str(mdp), "--formula", "!C U F ((s1 | s3) & F s2)", "--planner", "mixed", "--out", str(tmp_path / "plan")]) == 0
    summary = json.loads((tmp_path / "plan" / "summary.json").read_text())
    assert 0 < summary["p"] <= 1 and summary["n"] > 0
    capsys.readouterr()


def test_cli_reports_bad_formula(capsys):
    assert main(["translate", "--formula", "a U", "--ap", "a"]) == 2
    assert "error" in capsys.readouterr().err
