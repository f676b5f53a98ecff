"""
Run report: collates the metrics CSVs a run wrote into one accuracy table
(summary.csv, model rows by evaluation-set columns) and a JSON summary with
confidence intervals and paired clean/attacked tests.

Accuracies are echoed from the stage outputs, never recomputed.
"""

import json
import logging
import math
from pathlib import Path
from typing import Iterable

import pandas as pd

from analysis.statistics import aggregate_seeds, paired_rows_test, with_intervals
from config import (
    AUTOATTACK_LITE_DISCLAIMER, AUTOATTACK_LITE_LABEL, CSV_FLOAT_FORMAT,
    MANIFEST_NAME, RUN_METRICS_DIR, RUN_REPORT_DIR, RUN_TM_DIR,
)
from src.checkpoint import write_json_atomic

logger = logging.getLogger(__name__)

METRIC_TABLES = ("eval", "tm", "direct")


def _read_metrics(run_dir: Path) -> pd.DataFrame:
    frames = []
    for name in METRIC_TABLES:
        path = run_dir / RUN_METRICS_DIR / f"{name}.csv"
        if path.exists():
            frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                                na_values=[""], dtype={"rows_file": str, "norm": str})
            frame["table"] = name
            frames.append(frame)
    if not frames:
        return pd.DataFrame()
    metrics = pd.concat(frames, ignore_index=True)
    metrics["rows_file"] = metrics["rows_file"].fillna("")
    metrics["norm"] = metrics["norm"].fillna("")
    return metrics


def _native(value):
    """JSON-safe Python scalar; NaN becomes None."""
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _records(frame: pd.DataFrame) -> list:
    return [{k: _native(v) for k, v in row.items()} for row in frame.to_dict("records")]


def accuracy_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Model rows, one accuracy column per evaluation set, plus notes."""
    if metrics.empty:
        return pd.DataFrame(columns=["model", "notes"])
    long = metrics.drop_duplicates(["model", "eval_set"], keep="last")
    table = long.pivot(index="model", columns="eval_set", values="accuracy")
    table = table.reindex(index=long["model"].unique(), columns=long["eval_set"].unique())
    table.columns.name = None
    table = table.reset_index()

    flagged = long[long["label"] == AUTOATTACK_LITE_LABEL]
    notes = {}
    for model, group in flagged.groupby("model", sort=False):
        sets = ", ".join(group["eval_set"])
        notes[model] = f"{sets}: {AUTOATTACK_LITE_DISCLAIMER}"
    table["notes"] = table["model"].map(notes).fillna("")
    return table


def paired_tests(run_dir: Path, metrics: pd.DataFrame) -> list:
    """Clean vs attacked paired tests for every model with per-sample rows."""
    if metrics.empty:
        return []
    results = []
    with_rows = metrics[metrics["rows_file"] != ""]
    for (table, model), group in with_rows.groupby(["table", "model"], sort=False):
        clean = group[group["attack"] == "none"]
        if clean.empty:
            continue
        clean_row = clean.iloc[0]
        clean_rows = pd.read_csv(run_dir / clean_row["rows_file"])
        for _, row in group[group["attack"] != "none"].iterrows():
            robust_rows = pd.read_csv(run_dir / row["rows_file"])
            try:
                test = paired_rows_test(clean_rows, robust_rows)
            except ValueError as exc:
                logger.warning(f"  Skipping paired test {model}/{row['eval_set']}: {exc}")
                continue
            results.append({"model": model, "clean_set": clean_row["eval_set"],
                            "eval_set": row["eval_set"], **test})
    return results


def emit_report(run_dir: Path) -> dict:
    """
    Write report/summary.csv and report/summary.json for a run directory.

    Returns:
        the JSON summary (identical to what json.load reads back)

    Raises:
        FileNotFoundError: the run has no manifest
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no run manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    metrics = _read_metrics(run_dir)
    table = accuracy_table(metrics)
    report_dir = run_dir / RUN_REPORT_DIR
    report_dir.mkdir(parents=True, exist_ok=True)
    csv_path = report_dir / "summary.csv"
    table.to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT)

    rows = with_intervals(metrics) if not metrics.empty else metrics
    summary = {
        "run_id": manifest.get("run_id"),
        "seed": manifest.get("seed"),
        "rows": _records(rows),
        "table": _records(table),
        "paired_tests": [{k: _native(v) for k, v in t.items()} for t in paired_tests(run_dir, metrics)],
        "disclaimers": {AUTOATTACK_LITE_LABEL: AUTOATTACK_LITE_DISCLAIMER}
        if not metrics.empty and (metrics["label"] == AUTOATTACK_LITE_LABEL).any() else {},
    }
    selected = run_dir / RUN_TM_DIR / "selected.json"
    if selected.exists():
        summary["tm_selection"] = json.loads(selected.read_text(encoding="utf-8"))

    write_json_atomic(report_dir / "summary.json", summary)
    logger.info(f"  Report: {len(table)} models x {max(len(table.columns) - 2, 0)} evaluation sets -> {csv_path}")
    return summary


def aggregate_runs(run_dirs: Iterable[Path], output: Path) -> pd.DataFrame:
    """Stack the metrics of several runs (one per seed) and write mean/std per cell."""
    frames = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest = json.loads((run_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
        metrics = _read_metrics(run_dir)
        if metrics.empty:
            logger.warning(f"  {run_dir}: no metrics, skipped")
            continue
        metrics["seed"] = manifest.get("seed")
        frames.append(metrics)
    stacked = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    aggregated = aggregate_seeds(stacked)
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    aggregated.to_csv(output, index=False, float_format=CSV_FLOAT_FORMAT)
    logger.info(f"  Aggregated {len(frames)} runs -> {output}")
    return aggregated
