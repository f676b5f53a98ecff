"""
Classifier Module - Bayes posterior over labels from diffusion losses

For a sample x the classifier estimates, for every candidate label y,

    L(y) = mean_i || eps_i - eps_theta(sqrt(ab_ti) x + sqrt(1 - ab_ti) eps_i, t_i, y) ||^2

over one shared list of (t_i, eps_i) pairs (an MCPlan), then predicts
argmin_y L(y). Under a uniform prior the posterior is softmax(-L).

Staged elimination spends a small budget on every label, drops the worst
ones, and keeps accumulating pairs for the survivors.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from pydantic import with_config
from tqdm import tqdm

from config import CSV_FLOAT_FORMAT, STRICT_DOCUMENT
from src import tensor_core as tc
from src.checkpoint import write_json_atomic
from src.data import LabeledDataset
from src.diffusion import NoiseSchedule, per_sample_diffusion_loss
from src.tensor_core import RngStream, Tensor, stream_key

logger = logging.getLogger(__name__)

STRATEGIES = ("evenly-spaced", "uniform-random")


# ============================================================
# MONTE CARLO PLANS
# ============================================================

@dataclass(frozen=True, eq=False)
class MCPlan:
    """K (timestep, noise) pairs applied to every candidate label of one sample."""

    timesteps: Tensor
    noise: Tensor
    schedule: NoiseSchedule
    strategy: str = "evenly-spaced"
    seed: int = 0
    stream_id: int = 0

    def __len__(self) -> int:
        return int(self.timesteps.shape[0])

    @property
    def dim(self) -> int:
        return int(self.noise.shape[1])

    def pairs(self) -> list[tuple[int, Tensor]]:
        return [(int(t), eps) for t, eps in zip(self.timesteps, self.noise)]

    def subset(self, indices: Sequence[int]) -> "MCPlan":
        """Plan restricted to the given pair positions."""
        index = torch.as_tensor(list(indices), dtype=torch.long)
        if index.numel() == 0:
            raise ValueError("subset of an MCPlan must keep at least one pair")
        return replace(self, timesteps=self.timesteps[index], noise=self.noise[index])


def make_mc_plan(sched: NoiseSchedule, num_pairs: int, dim: int,
                 strategy: str, stream: RngStream) -> MCPlan:
    """
    Draw a plan of `num_pairs` pairs.

    evenly-spaced: t_i = floor((i + 0.5) * T / K); uniform-random: i.i.d.
    t_i. The noise draws come from `stream`, one (d,) vector per pair.
    """
    if num_pairs < 1:
        raise ValueError(f"an MCPlan needs at least one pair, got K={num_pairs}")
    if strategy not in STRATEGIES:
        raise ValueError(f"Unknown timestep strategy: {strategy}")
    T = sched.num_timesteps
    seed, stream_id = stream.seed, stream.stream_id
    if strategy == "evenly-spaced":
        i = torch.arange(num_pairs, dtype=torch.long)
        timesteps = ((2 * i + 1) * T) // (2 * num_pairs)
    else:
        timesteps = stream.integers(0, T, num_pairs)
    noise = stream.normal((num_pairs, dim))
    return MCPlan(timesteps, noise, sched, strategy=strategy, seed=seed, stream_id=stream_id)


def mc_stream(seed: int, sample_id: int) -> RngStream:
    """Per-sample stream: duplicates and clean/perturbed pairs see the same noise."""
    return RngStream(seed, stream_key("mc", int(sample_id)))


# ============================================================
# LOSSES AND POSTERIOR
# ============================================================

def _check_labels(labels: Sequence[int], num_classes: int) -> list[int]:
    labels = [int(y) for y in labels]
    if not labels:
        raise ValueError("class_losses needs a nonempty label set")
    if min(labels) < 0 or max(labels) >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels}")
    return labels


def pair_losses(model, x: Tensor, plan: MCPlan, labels: Sequence[int]) -> Tensor:
    """
    Diffusion loss of every (label, pair) combination, shape (L, K).
    Differentiable with respect to x and the model parameters.
    """
    labels = _check_labels(labels, model.num_classes)
    if x.dim() != 1 or x.shape[0] != plan.dim:
        raise tc.ShapeError(
            f"class_losses: shape mismatch {tuple(x.shape)} vs plan dim {plan.dim}"
        )
    L, K = len(labels), len(plan)
    x_rows = tc.broadcast_rows(x, L * K)
    t = plan.timesteps.repeat(L)
    eps = plan.noise.repeat(L, 1)
    y = torch.as_tensor(labels, dtype=torch.long).repeat_interleave(K)
    losses = per_sample_diffusion_loss(model, x_rows, y, t, eps, plan.schedule)
    return tc.reshape(losses, (L, K))


def class_losses(model, x: Tensor, plan: MCPlan, labels: Sequence[int]) -> Tensor:
    """Mean loss per label over the plan's pairs, shape (L,)."""
    return tc.mean(pair_losses(model, x, plan, labels), axis=1)


def log_posterior_from_losses(losses: Tensor) -> Tensor:
    """log softmax(-L) along the last axis; differentiable."""
    losses = torch.as_tensor(losses, dtype=tc.DTYPE)
    if bool(torch.isnan(losses).any()):
        raise ValueError("posterior_from_losses: NaN loss")
    if not bool(torch.isfinite(losses).all()):
        raise ValueError("posterior_from_losses: losses must be finite")
    return tc.log_softmax(tc.scale(losses, -1.0))


def posterior_from_losses(losses: Tensor) -> Tensor:
    """p_i = exp(-L_i) / sum_j exp(-L_j), max-shifted."""
    return torch.exp(log_posterior_from_losses(losses))


def _argmin(values: Tensor) -> int:
    # smallest index on ties
    return int(np.argmin(values.detach().numpy()))


# ============================================================
# CLASSIFICATION
# ============================================================

@dataclass
class EvalRow:
    """One sample's outcome. Labels not evaluated at the end are None."""

    predicted_label: int
    losses: list
    posterior: list
    eliminated_at: list
    sample_id: int = -1
    true_label: int = -1

    @property
    def correct(self) -> bool:
        return self.predicted_label == self.true_label


def _row(num_classes: int, labels: list[int], losses: Tensor,
         eliminated_at: Optional[list] = None) -> tuple[int, EvalRow]:
    posterior = posterior_from_losses(losses.detach())
    full_losses = [None] * num_classes
    full_posterior = [None] * num_classes
    for y, loss, p in zip(labels, losses.detach().tolist(), posterior.tolist()):
        full_losses[y] = loss
        full_posterior[y] = p
    label = labels[_argmin(losses)]
    row = EvalRow(
        predicted_label=label,
        losses=full_losses,
        posterior=full_posterior,
        eliminated_at=eliminated_at or [None] * num_classes,
    )
    return label, row


def classify(model, x: Tensor, plan: MCPlan) -> tuple[int, EvalRow]:
    """argmin over all C labels of the plan's class losses."""
    labels = list(range(model.num_classes))
    return _row(model.num_classes, labels, class_losses(model, x, plan, labels))


@dataclass(frozen=True)
class StagePlan:
    """
    Stages of (num_timesteps, keep). Stage s evaluates the surviving labels
    on num_timesteps fresh pairs and keeps the `keep` lowest pooled losses.
    """

    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(n), int(k)) for n, k in self.stages))

    def validate(self, num_classes: int) -> None:
        if not self.stages:
            raise ValueError("stage plan is empty")
        counts = [n for n, _ in self.stages]
        keeps = [k for _, k in self.stages]
        if counts[0] < 1 or min(counts) < 0:
            raise ValueError(f"stage timestep counts must be >= 0 with a nonempty first stage: {counts}")
        if keeps[-1] != 1:
            raise ValueError(f"final stage must keep exactly one label: {self.stages}")
        if keeps[0] > num_classes or min(keeps) < 1:
            raise ValueError(f"stage keep counts must lie in [1, {num_classes}]: {keeps}")
        if any(b >= a for a, b in zip(keeps, keeps[1:])):
            raise ValueError(f"stage keep counts must be strictly decreasing: {keeps}")

    @property
    def total_pairs(self) -> int:
        return sum(n for n, _ in self.stages)

    @classmethod
    def halving(cls, num_classes: int, first: int = 10, second: int = 100) -> "StagePlan":
        """Keep half the labels after a short first stage, then decide."""
        if num_classes < 4:
            return cls(((first + second, 1),))
        return cls(((first, num_classes // 2), (second, 1)))


def classify_staged(model, x: Tensor, stage_plan: StagePlan, stream: RngStream,
                    sched: NoiseSchedule,
                    strategy: str = "evenly-spaced") -> tuple[int, EvalRow]:
    """
    Staged label elimination with pooled running means.

    Each stage draws its own plan from `stream`; a label's loss is the mean
    over every pair it has been evaluated on. The returned row holds the
    pooled losses of the labels that entered the final stage.
    """
    num_classes = model.num_classes
    stage_plan.validate(num_classes)
    survivors = list(range(num_classes))
    chunks: dict[int, list[Tensor]] = {y: [] for y in survivors}
    eliminated_at: list = [None] * num_classes

    for stage, (num_timesteps, keep) in enumerate(stage_plan.stages):
        if num_timesteps > 0:
            plan = make_mc_plan(sched, num_timesteps, x.shape[-1], strategy, stream)
            losses = pair_losses(model, x, plan, survivors)
            for i, y in enumerate(survivors):
                chunks[y].append(tc.take(losses, i))
        entrants = survivors
        pooled = tc.mean(tc.stack([tc.concat(chunks[y]) for y in entrants]), axis=1)
        order = torch.sort(pooled.detach(), stable=True).indices[:keep]
        survivors = sorted(entrants[int(i)] for i in order)
        for y in entrants:
            if y not in survivors:
                eliminated_at[y] = stage
        logger.debug(f"    stage {stage}: {len(entrants)} -> {len(survivors)} labels")

    return _row(num_classes, entrants, pooled, eliminated_at)


# ============================================================
# EVALUATION
# ============================================================

@with_config(STRICT_DOCUMENT)
@dataclass(frozen=True)
class EvalConfig:
    """
    Evaluation budget. With `stages` set, classify_staged is used and
    `num_pairs` is ignored.
    """

    num_pairs: int = 50
    strategy: str = "evenly-spaced"
    stages: Optional[tuple[tuple[int, int], ...]] = None
    seed: int = 0
    workers: int = 1
    subset_size: Optional[int] = None
    subset_seeds: tuple[int, ...] = ()
    progress: bool = False

    def validate(self, num_classes: Optional[int] = None) -> None:
        if self.num_pairs < 1:
            raise ValueError(f"num_pairs must be >= 1, got {self.num_pairs}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Unknown timestep strategy: {self.strategy}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.stages is not None and num_classes is not None:
            StagePlan(self.stages).validate(num_classes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = [list(s) for s in self.stages] if self.stages is not None else None
        out["subset_seeds"] = list(self.subset_seeds)
        return out


@dataclass
class EvalReport:
    """Per-sample rows plus aggregate accuracy of one evaluation pass."""

    rows: list
    num_classes: int
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def accuracy(self) -> float:
        if not self.rows:
            return float("nan")
        return sum(row.correct for row in self.rows) / len(self.rows)

    def predictions(self) -> np.ndarray:
        return np.array([row.predicted_label for row in self.rows], dtype=np.int64)

    def correct(self) -> np.ndarray:
        return np.array([row.correct for row in self.rows], dtype=bool)

    def per_class_accuracy(self) -> list:
        out = []
        for c in range(self.num_classes):
            hits = [row.correct for row in self.rows if row.true_label == c]
            out.append(sum(hits) / len(hits) if hits else None)
        return out

    def mean_losses(self) -> list:
        """Mean per-label loss over the samples where that label was evaluated."""
        out = []
        for c in range(self.num_classes):
            values = [row.losses[c] for row in self.rows if row.losses[c] is not None]
            out.append(sum(values) / len(values) if values else None)
        return out

    def subset_accuracies(self, size: int, seeds: Sequence[int]) -> dict:
        """Accuracy on seeded random subsets of `size` rows, keyed by seed."""
        correct = self.correct()
        size = min(int(size), len(correct))
        out = {}
        for seed in seeds:
            stream = RngStream(int(seed), stream_key("eval-subset"))
            index = stream.permutation(len(correct))[:size]
            out[int(seed)] = float(correct[index].mean())
        return out

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {
                "sample_id": row.sample_id,
                "true_label": row.true_label,
                "predicted_label": row.predicted_label,
            }
            for c in range(self.num_classes):
                record[f"loss_{c}"] = row.losses[c] if row.losses[c] is not None else math.nan
            for c in range(self.num_classes):
                record[f"post_{c}"] = row.posterior[c] if row.posterior[c] is not None else math.nan
            records.append(record)
        columns = (["sample_id", "true_label", "predicted_label"]
                   + [f"loss_{c}" for c in range(self.num_classes)]
                   + [f"post_{c}" for c in range(self.num_classes)])
        return pd.DataFrame.from_records(records, columns=columns)

    def summary(self, run_id: Optional[str] = None) -> dict:
        out = {
            "accuracy": self.accuracy,
            "num_samples": len(self.rows),
            "per_class_accuracy": self.per_class_accuracy(),
            "mean_losses": self.mean_losses(),
            "config": self.config,
            "seed": self.seed,
            "run_id": run_id,
        }
        if self.config.get("subset_size") and self.config.get("subset_seeds"):
            per_seed = self.subset_accuracies(self.config["subset_size"], self.config["subset_seeds"])
            values = np.array(list(per_seed.values()))
            out["subset_accuracy"] = {
                "per_seed": {str(k): v for k, v in per_seed.items()},
                "mean": float(values.mean()),
                "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
            }
        return out

    def save(self, csv_path: Path, json_path: Optional[Path] = None,
             run_id: Optional[str] = None) -> dict:
        """Write the per-sample CSV and the JSON summary next to it."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(csv_path, index=False, float_format=CSV_FLOAT_FORMAT)
        summary = self.summary(run_id)
        write_json_atomic(json_path or csv_path.with_suffix(".json"), summary)
        return summary


def _evaluate_sample(model, sched: NoiseSchedule, config: EvalConfig,
                     x: Tensor, label: int, sample_id: int) -> EvalRow:
    stream = mc_stream(config.seed, sample_id)
    with torch.no_grad():
        if config.stages is not None:
            _, row = classify_staged(model, x, StagePlan(config.stages), stream,
                                     sched, config.strategy)
        else:
            plan = make_mc_plan(sched, config.num_pairs, x.shape[-1], config.strategy, stream)
            _, row = classify(model, x, plan)
    return replace(row, sample_id=sample_id, true_label=label)


def evaluate(model, dataset: LabeledDataset, config: EvalConfig,
             sched: NoiseSchedule) -> EvalReport:
    """
    Classify every sample of `dataset`.

    Per-sample streams are keyed by sample id, so the result does not
    depend on `config.workers` or on the order of evaluation.
    """
    config.validate(model.num_classes)
    jobs = [
        (dataset.samples[i], int(dataset.labels[i]), int(dataset.sample_ids[i]))
        for i in range(len(dataset))
    ]

    def run(job):
        return _evaluate_sample(model, sched, config, *job)

    progress = dict(total=len(jobs), desc=f"eval {dataset.split}", disable=not config.progress)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            rows = list(tqdm(pool.map(run, jobs), **progress))
    else:
        rows = [run(job) for job in tqdm(jobs, **progress)]

    report = EvalReport(rows=rows, num_classes=model.num_classes,
                        config=config.to_dict(), seed=config.seed)
    logger.info(f"  Evaluated {len(report):,} {dataset.split} samples: accuracy {report.accuracy:.4f}")
    return report
