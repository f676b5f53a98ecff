"""
Statistics for accuracy tables: binomial confidence intervals, paired
exact tests between clean and attacked predictions, and aggregation of
metrics across seeds.
"""

import logging

import numpy as np
import pandas as pd
from scipy import stats as scipy_stats

logger = logging.getLogger(__name__)

CONFIDENCE = 0.95


def accuracy_interval(num_correct: int, num_samples: int,
                      confidence: float = CONFIDENCE) -> tuple[float, float]:
    """Exact (Clopper-Pearson) interval for a binomial accuracy; NaNs when empty."""
    if num_samples <= 0:
        return float("nan"), float("nan")
    ci = scipy_stats.binomtest(int(num_correct), int(num_samples)).proportion_ci(
        confidence_level=confidence, method="exact"
    )
    return float(ci.low), float(ci.high)


def with_intervals(metrics: pd.DataFrame, confidence: float = CONFIDENCE) -> pd.DataFrame:
    """Add ci_low / ci_high columns from num_correct and num_samples."""
    out = metrics.copy()
    bounds = [accuracy_interval(k, n, confidence)
              for k, n in zip(out["num_correct"], out["num_samples"])]
    out["ci_low"] = [b[0] for b in bounds]
    out["ci_high"] = [b[1] for b in bounds]
    return out


def paired_exact_test(clean_correct, robust_correct) -> dict:
    """
    Exact McNemar test on paired per-sample correctness.

    Only discordant pairs matter: `lost` samples were right on clean data
    and wrong under attack, `gained` the reverse. Under the null both are
    equally likely, so lost ~ Binomial(lost + gained, 1/2).
    """
    clean = np.asarray(clean_correct, dtype=bool)
    robust = np.asarray(robust_correct, dtype=bool)
    if clean.shape != robust.shape:
        raise ValueError(f"paired test needs equal lengths, got {clean.shape} and {robust.shape}")
    lost = int(np.sum(clean & ~robust))
    gained = int(np.sum(~clean & robust))
    discordant = lost + gained
    p_value = 1.0 if discordant == 0 else float(
        scipy_stats.binomtest(lost, discordant, 0.5).pvalue
    )
    return {
        "num_pairs": int(clean.size),
        "lost": lost,
        "gained": gained,
        "p_value": p_value,
    }


def paired_rows_test(clean_rows: pd.DataFrame, robust_rows: pd.DataFrame) -> dict:
    """Paired test on two per-sample eval tables, matched by sample_id."""
    merged = clean_rows.merge(robust_rows, on="sample_id", suffixes=("_clean", "_robust"))
    if merged.empty:
        raise ValueError("no shared sample ids between the two evaluation tables")
    clean = merged["predicted_label_clean"] == merged["true_label_clean"]
    robust = merged["predicted_label_robust"] == merged["true_label_robust"]
    return paired_exact_test(clean.to_numpy(), robust.to_numpy())


def aggregate_seeds(metrics: pd.DataFrame) -> pd.DataFrame:
    """
    Mean, sample standard deviation and count of accuracy per
    (model, eval_set) over the runs stacked in `metrics` (one `seed`
    column distinguishes them).
    """
    if metrics.empty:
        return pd.DataFrame(columns=["model", "eval_set", "mean", "std", "num_seeds"])
    grouped = metrics.groupby(["model", "eval_set"], sort=False)["accuracy"]
    out = grouped.agg(mean="mean", std=lambda s: float(s.std(ddof=1)) if len(s) > 1 else 0.0,
                      num_seeds="count").reset_index()
    logger.debug(f"  Aggregated {len(metrics)} metric rows into {len(out)} groups")
    return out
