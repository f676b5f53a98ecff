"""Tests for the run report and multi-seed aggregation."""

import json

import pandas as pd
import pytest

from analysis.report import accuracy_table, aggregate_runs, emit_report
from config import AUTOATTACK_LITE_DISCLAIMER, AUTOATTACK_LITE_LABEL
from pipeline.stages import write_metrics


def metric(model, eval_set, accuracy, attack="none", label="clean", rows_file="",
           num_samples=10, num_correct=None):
    return {
        "model": model, "eval_set": eval_set, "attack": attack, "label": label,
        "norm": "" if attack == "none" else "l_inf", "epsilon": 0.0 if attack == "none" else 0.05,
        "accuracy": accuracy, "num_samples": num_samples,
        "num_correct": round(accuracy * num_samples) if num_correct is None else num_correct,
        "rows_file": rows_file,
    }


@pytest.fixture
def run_dir(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"run_id": "abc123", "seed": 7}))
    return tmp_path


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        emit_report(tmp_path)


def test_empty_run_writes_header_only(run_dir):
    summary = emit_report(run_dir)
    assert (run_dir / "report" / "summary.csv").read_text() == "model,notes\n"
    assert summary["rows"] == [] and summary["table"] == [] and summary["paired_tests"] == []
    assert summary["run_id"] == "abc123"


def test_accuracies_are_echoed_verbatim(run_dir):
    """Accuracies in the report are the exact floats the stages wrote."""
    odd = 0.1 + 0.2
    write_metrics(run_dir / "metrics" / "eval.csv", [
        metric("diffusion", "clean", 1 / 3, num_samples=3, num_correct=1),
        metric("diffusion", "pgd", odd, attack="pgd", label="PGD"),
        metric("mlp", "clean", 0.9),
        metric("mlp", "pgd", 0.0, attack="pgd", label="PGD"),
    ])
    emit_report(run_dir)

    table = pd.read_csv(run_dir / "report" / "summary.csv", float_precision="round_trip")
    assert list(table.columns) == ["model", "clean", "pgd", "notes"]
    assert table["model"].tolist() == ["diffusion", "mlp"]
    assert table.loc[0, "clean"] == 1 / 3
    assert table.loc[0, "pgd"] == odd
    assert table.loc[1, "pgd"] == 0.0


def test_autoattack_rows_carry_disclaimer(run_dir):
    write_metrics(run_dir / "metrics" / "eval.csv", [
        metric("mlp", "clean", 0.9),
        metric("mlp", "aa", 0.1, attack="pgd_restarts", label=AUTOATTACK_LITE_LABEL),
    ])
    summary = emit_report(run_dir)
    assert summary["table"][0]["notes"] == f"aa: {AUTOATTACK_LITE_DISCLAIMER}"
    assert summary["disclaimers"] == {AUTOATTACK_LITE_LABEL: AUTOATTACK_LITE_DISCLAIMER}


def test_json_summary_round_trips(run_dir):
    write_metrics(run_dir / "metrics" / "eval.csv", [metric("mlp", "clean", 0.9)])
    write_metrics(run_dir / "metrics" / "tm.csv", [metric("tmdc", "clean", 0.8)])
    (run_dir / "tm").mkdir()
    (run_dir / "tm" / "selected.json").write_text(json.dumps({"step": 200}))

    summary = emit_report(run_dir)
    assert json.loads((run_dir / "report" / "summary.json").read_text()) == summary
    assert summary["tm_selection"] == {"step": 200}
    assert [row["table"] for row in summary["rows"]] == ["eval", "tm"]
    assert summary["rows"][0]["ci_low"] < 0.9 < summary["rows"][0]["ci_high"]


def test_paired_tests_from_rows_files(run_dir):
    rows_dir = run_dir / "metrics" / "rows"
    rows_dir.mkdir(parents=True)
    pd.DataFrame({"sample_id": [0, 1, 2, 3], "true_label": [0, 1, 0, 1],
                  "predicted_label": [0, 1, 0, 1]}).to_csv(rows_dir / "diffusion__clean.csv", index=False)
    pd.DataFrame({"sample_id": [0, 1, 2, 3], "true_label": [0, 1, 0, 1],
                  "predicted_label": [1, 1, 1, 1]}).to_csv(rows_dir / "diffusion__pgd.csv", index=False)
    write_metrics(run_dir / "metrics" / "eval.csv", [
        metric("diffusion", "clean", 1.0, rows_file="metrics/rows/diffusion__clean.csv", num_samples=4),
        metric("diffusion", "pgd", 0.5, attack="pgd", label="PGD",
               rows_file="metrics/rows/diffusion__pgd.csv", num_samples=4),
        metric("mlp", "clean", 1.0),
    ])
    tests = emit_report(run_dir)["paired_tests"]
    assert len(tests) == 1
    assert tests[0]["model"] == "diffusion" and tests[0]["eval_set"] == "pgd"
    assert (tests[0]["lost"], tests[0]["gained"]) == (2, 0)
    assert tests[0]["p_value"] == pytest.approx(0.5)


def test_accuracy_table_keeps_order_of_appearance():
    metrics = pd.DataFrame([metric("z", "pgd", 0.1, attack="pgd", label="PGD"), metric("a", "clean", 0.9)])
    table = accuracy_table(metrics)
    assert table["model"].tolist() == ["z", "a"]
    assert list(table.columns) == ["model", "pgd", "clean", "notes"]


def test_aggregate_runs(tmp_path):
    dirs = []
    for seed, acc in [(1, 0.5), (2, 0.7)]:
        run = tmp_path / f"run{seed}"
        run.mkdir()
        (run / "manifest.json").write_text(json.dumps({"run_id": str(seed), "seed": seed}))
        write_metrics(run / "metrics" / "eval.csv", [metric("diffusion", "clean", acc)])
        dirs.append(run)
    out = aggregate_runs(dirs, tmp_path / "agg" / "seeds.csv")
    assert out.loc[0, "mean"] == pytest.approx(0.6)
    assert out.loc[0, "std"] == pytest.approx(0.1414213562)
    assert (tmp_path / "agg" / "seeds.csv").exists()
