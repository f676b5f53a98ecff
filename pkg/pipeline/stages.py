"""
Pipeline stages. Each stage reads the files earlier stages declared and
writes its own declared outputs under the run directory; nothing else is
shared between stages.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import pandas as pd
import torch

from config import (
    CHECKPOINT_SUFFIX, CSV_FLOAT_FORMAT, MANIFEST_NAME, RUN_ATTACK_DIR,
    RUN_CHECKPOINT_DIR, RUN_DATA_DIR, RUN_METRICS_DIR, RUN_REPORT_DIR, RUN_TM_DIR,
)
from analysis.report import emit_report
from pipeline.experiment_config import ExperimentConfig
from src.attacks import AdvDataset, direct_attack_dataset, gen_adv_dataset
from src.baseline import adversarial_train, predict, train_discriminative
from src.checkpoint import file_hash, model_from_checkpoint, save_checkpoint, write_json_atomic
from src.classifier import EvalConfig, evaluate
from src.data import SPLITS, LabeledDataset, class_means, make_blobs, nearest_mean_accuracy, pairwise_error_bound
from src.diffusion import ancestral_sample, build_schedule, train_base
from src.models import DenoiserModel
from src.tensor_core import RngStream, stream_key
from src.tm_trainer import merge_lora, save_sweep, select_checkpoint, tm_finetune
from src.training import TrainConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "model", "eval_set", "attack", "label", "norm", "epsilon",
    "accuracy", "num_samples", "num_correct", "rows_file",
]


class RunLayout:
    """File names inside one run directory."""

    def __init__(self, run_dir: Path):
        self.root = Path(run_dir)

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST_NAME

    def data(self, split: str) -> Path:
        return self.root / RUN_DATA_DIR / f"{split}.csv"

    @property
    def diffusion_checkpoint(self) -> Path:
        return self.root / RUN_CHECKPOINT_DIR / f"diffusion{CHECKPOINT_SUFFIX}"

    def baseline_checkpoint(self, name: str, adversarial: bool = False) -> Path:
        suffix = "_adv" if adversarial else ""
        return self.root / RUN_CHECKPOINT_DIR / f"baseline_{name}{suffix}{CHECKPOINT_SUFFIX}"

    @property
    def tmdc_checkpoint(self) -> Path:
        return self.root / RUN_CHECKPOINT_DIR / f"tmdc{CHECKPOINT_SUFFIX}"

    def attack(self, name: str, split: str) -> Path:
        return self.root / RUN_ATTACK_DIR / f"{name}_{split}.csv"

    def metrics(self, name: str) -> Path:
        return self.root / RUN_METRICS_DIR / f"{name}.csv"

    def eval_rows(self, model: str, eval_set: str) -> Path:
        return self.root / RUN_METRICS_DIR / "rows" / f"{model}__{eval_set}.csv"

    @property
    def tm_dir(self) -> Path:
        return self.root / RUN_TM_DIR

    def sweep(self, attack: Optional[str] = None) -> Path:
        return self.tm_dir / ("sweep.csv" if attack is None else f"sweep_{attack}.csv")

    @property
    def selected(self) -> Path:
        return self.tm_dir / "selected.json"

    @property
    def report_csv(self) -> Path:
        return self.root / RUN_REPORT_DIR / "summary.csv"

    @property
    def report_json(self) -> Path:
        return self.root / RUN_REPORT_DIR / "summary.json"


@dataclass
class RunContext:
    config: ExperimentConfig
    run_dir: Path
    force: bool = False
    progress: bool = False

    @property
    def layout(self) -> RunLayout:
        return RunLayout(self.run_dir)

    @property
    def schedule(self):
        s = self.config.schedule
        return build_schedule(s.num_timesteps, s.beta_start, s.beta_end)

    @property
    def num_classes(self) -> int:
        return self.config.dataset.num_classes

    def split(self, split: str) -> LabeledDataset:
        return LabeledDataset.load_csv(self.layout.data(split), self.num_classes, split=split)

    def train_config(self, train: TrainConfig, component: str) -> TrainConfig:
        return replace(train, seed=self.config.component_seed(component, train.seed),
                       progress=self.progress)

    def eval_config(self) -> EvalConfig:
        ev = self.config.evaluation
        return replace(ev, seed=self.config.component_seed("evaluation", ev.seed),
                       progress=self.progress)

    def attack_config(self, name: str, attack):
        return replace(attack, seed=self.config.component_seed(f"attack:{name}", attack.seed))

    def attack_set(self, name: str, split: str, source: LabeledDataset) -> AdvDataset:
        return AdvDataset.load(self.layout.attack(name, split), self.num_classes, source=source)


@dataclass
class StageResult:
    outputs: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[RunContext], StageResult]
    outputs: Callable[[RunContext], list]


def _metric_row(model: str, eval_set: str, correct, provenance: Optional[dict] = None,
                rows_file: str = "") -> dict:
    provenance = provenance or {}
    correct = torch.as_tensor(correct, dtype=torch.bool)
    return {
        "model": model,
        "eval_set": eval_set,
        "attack": provenance.get("kind", "none"),
        "label": provenance.get("label", "clean"),
        "norm": provenance.get("norm", ""),
        "epsilon": float(provenance.get("epsilon", 0.0)),
        "accuracy": float(correct.double().mean()) if correct.numel() else float("nan"),
        "num_samples": int(correct.numel()),
        "num_correct": int(correct.sum()),
        "rows_file": rows_file,
    }


def write_metrics(path: Path, rows: list) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame.from_records(rows, columns=METRIC_COLUMNS).to_csv(
        path, index=False, float_format=CSV_FLOAT_FORMAT
    )
    return path


def _evaluate_diffusion(ctx: RunContext, model, model_name: str, eval_set: str,
                        dataset: LabeledDataset, provenance: Optional[dict]) -> dict:
    report = evaluate(model, dataset, ctx.eval_config(), ctx.schedule)
    rows_path = ctx.layout.eval_rows(model_name, eval_set)
    report.save(rows_path, run_id=ctx.config.run_id)
    return _metric_row(model_name, eval_set, report.correct(), provenance,
                       str(rows_path.relative_to(ctx.run_dir)))


def _evaluation_sets(ctx: RunContext, test: LabeledDataset) -> list:
    sets = [("clean", test, None)]
    for name in ctx.config.attacks:
        adv = ctx.attack_set(name, "test", test)
        sets.append((name, adv.dataset, adv.provenance))
    return sets


def _baseline_models(ctx: RunContext) -> list:
    out = []
    for name in ctx.config.baselines:
        out.append((name, ctx.layout.baseline_checkpoint(name)))
        adv_path = ctx.layout.baseline_checkpoint(name, adversarial=True)
        if adv_path.exists():
            out.append((f"{name}_adv", adv_path))
    return out


# ============================================================
# STAGES
# ============================================================

def _active_splits(ctx: RunContext) -> list:
    return [s for s in SPLITS if ctx.config.dataset.per_class(s) > 0]


def gen_data(ctx: RunContext) -> StageResult:
    spec = replace(ctx.config.dataset,
                   seed=ctx.config.component_seed("dataset", ctx.config.dataset.seed))
    outputs = []
    for split in _active_splits(ctx):
        outputs.append(make_blobs(spec, split).save_csv(ctx.layout.data(split)))
    test = ctx.split("test")
    means = class_means(spec.num_classes, spec.dim, spec.radius)
    metrics = {
        "nearest_mean_accuracy": nearest_mean_accuracy(test, means),
        "nearest_mean_error_bound": pairwise_error_bound(spec),
    }
    logger.info(f"  Nearest-mean accuracy on test: {metrics['nearest_mean_accuracy']:.4f}")
    return StageResult(outputs, metrics)


def train_diffusion(ctx: RunContext) -> StageResult:
    cfg = ctx.config.diffusion
    train = ctx.split("train")
    sched = ctx.schedule
    train_cfg = ctx.train_config(cfg.train, "diffusion")
    model = DenoiserModel(train.dim, ctx.num_classes, sched.num_timesteps, cfg.time_dim,
                          cfg.class_dim, cfg.hidden_dims, seed=train_cfg.seed)
    model, curve = train_base(model, train, train_cfg, sched)

    path = ctx.layout.diffusion_checkpoint
    save_checkpoint(path, model, metadata={"schedule": sched.to_dict(), "steps": train_cfg.steps})
    curve_path = write_curve(ctx.layout.metrics("diffusion_loss"), curve)

    metrics = {"first_loss": curve[0] if curve else None, "final_loss": curve[-1] if curve else None}
    if cfg.sanity_samples > 0:
        metrics["sample_mean_gap"] = _sampler_check(ctx, model, train, cfg.sanity_samples,
                                                    cfg.sampler_variance)
    return StageResult([path, curve_path], metrics)


def _sampler_check(ctx: RunContext, model, train: LabeledDataset, n: int, variance: str) -> list:
    """Distance between each class's sample mean and its data mean."""
    gaps = []
    stream = RngStream(ctx.config.component_seed("sampler"), stream_key("sanity"))
    for c in range(ctx.num_classes):
        samples = ancestral_sample(model, ctx.schedule, c, n, stream.spawn(c), variance=variance)
        data_mean = train.samples[train.labels == c].mean(dim=0)
        gaps.append(float((samples.mean(dim=0) - data_mean).norm()))
    logger.info(f"  Sampler check: class mean gaps {[round(g, 3) for g in gaps]}")
    return gaps


def write_curve(path: Path, curve: list) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"step": range(1, len(curve) + 1), "loss": curve}).to_csv(
        path, index=False, float_format=CSV_FLOAT_FORMAT
    )
    return path


def train_baseline(ctx: RunContext) -> StageResult:
    train, test = ctx.split("train"), ctx.split("test")
    result = StageResult()
    for name, spec in ctx.config.baselines.items():
        model, curves = train_discriminative(
            train, ctx.train_config(spec.train, f"baseline:{name}"), spec.hidden_dims, test
        )
        path = ctx.layout.baseline_checkpoint(name)
        save_checkpoint(path, model, metadata={"name": name})
        result.outputs += [path, write_curve(ctx.layout.metrics(f"baseline_{name}_loss"), curves["loss"])]
        result.metrics[name] = {k: v for k, v in curves.items() if k != "loss"}
    return result


def adv_train_baseline(ctx: RunContext) -> StageResult:
    adv_cfg = ctx.config.adversarial_training
    spec = ctx.config.baselines[adv_cfg.baseline]
    train, test = ctx.split("train"), ctx.split("test")
    model, curves = adversarial_train(
        train, ctx.attack_config("adversarial_training", adv_cfg.attack),
        ctx.train_config(spec.train, f"adversarial:{adv_cfg.baseline}"), spec.hidden_dims, test,
    )
    path = ctx.layout.baseline_checkpoint(adv_cfg.baseline, adversarial=True)
    save_checkpoint(path, model, metadata={"name": adv_cfg.baseline, "adversarial": True})
    curve_path = write_curve(ctx.layout.metrics(f"baseline_{adv_cfg.baseline}_adv_loss"), curves["loss"])
    return StageResult([path, curve_path], {k: v for k, v in curves.items() if k != "loss"})


def _attack_jobs(ctx: RunContext) -> list:
    jobs = [(name, "test") for name in ctx.config.attacks]
    if {"tm-finetune", "select-ckpt"} & set(ctx.config.stages):
        tm = ctx.config.tm
        jobs.append((tm.train_attack, "train"))
        for name in (tm.val_attack, *tm.sweep_attacks):
            if ctx.config.dataset.val_per_class > 0 and (name, "val") not in jobs:
                jobs.append((name, "val"))
    return jobs


def gen_attack(ctx: RunContext) -> StageResult:
    surrogate_path = ctx.layout.baseline_checkpoint(ctx.config.surrogate)
    surrogate = model_from_checkpoint(surrogate_path)
    surrogate_hash = file_hash(surrogate_path)
    result = StageResult()
    splits = {}
    for name, split in _attack_jobs(ctx):
        if split not in splits:
            splits[split] = ctx.split(split)
        adv = gen_adv_dataset(surrogate, splits[split], ctx.attack_config(name, ctx.config.attacks[name]),
                              surrogate_hash=surrogate_hash, progress=ctx.progress)
        path = adv.save(ctx.layout.attack(name, split))
        result.outputs += [path, path.with_suffix(".json")]
        result.metrics[f"{name}_{split}"] = {
            "surrogate_clean_accuracy": adv.provenance["surrogate_clean_accuracy"],
            "surrogate_robust_accuracy": adv.provenance["surrogate_robust_accuracy"],
            "mean_perturbation": float(adv.perturbation_norms().mean()),
        }
    return result


def eval_stage(ctx: RunContext) -> StageResult:
    test = ctx.split("test")
    sets = _evaluation_sets(ctx, test)
    rows = []

    diffusion = model_from_checkpoint(ctx.layout.diffusion_checkpoint)
    for eval_set, dataset, provenance in sets:
        logger.info(f"  Diffusion classifier on {eval_set}")
        rows.append(_evaluate_diffusion(ctx, diffusion, "diffusion", eval_set, dataset, provenance))

    for model_name, path in _baseline_models(ctx):
        model = model_from_checkpoint(path)
        for eval_set, dataset, provenance in sets:
            labels, _ = predict(model, dataset.samples)
            rows.append(_metric_row(model_name, eval_set, labels == dataset.labels, provenance))

    path = write_metrics(ctx.layout.metrics("eval"), rows)
    outputs = [path] + [ctx.run_dir / r["rows_file"] for r in rows if r["rows_file"]]
    outputs += [p.with_suffix(".json") for p in outputs[1:]]
    metrics = {f"{r['model']}/{r['eval_set']}": r["accuracy"] for r in rows}
    return StageResult(outputs, metrics)


def tm_finetune_stage(ctx: RunContext) -> StageResult:
    tm = ctx.config.tm
    base = model_from_checkpoint(ctx.layout.diffusion_checkpoint)
    train_adv = ctx.attack_set(tm.train_attack, "train", ctx.split("train"))
    run = replace(tm.run, seed=ctx.config.component_seed("tm", tm.run.seed), progress=ctx.progress)
    result = tm_finetune(base, train_adv, run, ctx.schedule, ctx.layout.tm_dir)
    curve = result.loss_curve
    return StageResult(
        [result.manifest_path, *result.paths],
        {"base_hash": result.base_hash, "first_loss": curve[0], "final_loss": curve[-1],
         "checkpoints": len(result.checkpoints)},
    )


def _tm_checkpoints(ctx: RunContext) -> list:
    manifest = json.loads((ctx.layout.tm_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
    return [ctx.layout.tm_dir / entry["path"] for entry in manifest["checkpoints"]]


def select_ckpt(ctx: RunContext) -> StageResult:
    tm = ctx.config.tm
    checkpoints = _tm_checkpoints(ctx)
    val = ctx.split("val")
    eval_cfg, sched = ctx.eval_config(), ctx.schedule

    best, sweep = select_checkpoint(checkpoints, ctx.attack_set(tm.val_attack, "val", val),
                                    eval_cfg, sched, clean_set=val)
    outputs = [save_sweep(sweep, ctx.layout.sweep())]
    for name in tm.sweep_attacks:
        _, extra = select_checkpoint(checkpoints, ctx.attack_set(name, "val", val),
                                     eval_cfg, sched, clean_set=val)
        outputs.append(save_sweep(extra, ctx.layout.sweep(name)))

    best_row = sweep.loc[sweep["robust_acc"].idxmax()]
    model = merge_lora(model_from_checkpoint(best))
    digest = save_checkpoint(ctx.layout.tmdc_checkpoint, model,
                             metadata={"source": best.name, "step": int(best_row["step"])})
    selected = {
        "checkpoint": best.name,
        "step": int(best_row["step"]),
        "robust_acc": float(best_row["robust_acc"]),
        "clean_acc": float(best_row["clean_acc"]),
        "final_step": int(sweep["step"].iloc[-1]),
        "final_robust_acc": float(sweep["robust_acc"].iloc[-1]),
        "merged_sha256": digest,
    }
    outputs += [write_json_atomic(ctx.layout.selected, selected), ctx.layout.tmdc_checkpoint]

    test = ctx.split("test")
    rows = [
        _evaluate_diffusion(ctx, model, "tmdc", eval_set, dataset, provenance)
        for eval_set, dataset, provenance in _evaluation_sets(ctx, test)
    ]
    outputs.append(write_metrics(ctx.layout.metrics("tm"), rows))
    outputs += [ctx.run_dir / r["rows_file"] for r in rows]
    return StageResult(outputs, {**selected, **{f"tmdc/{r['eval_set']}": r["accuracy"] for r in rows}})


def _direct_subset(ctx: RunContext, test: LabeledDataset) -> list:
    n = min(ctx.config.direct_attack.num_samples, len(test))
    stream = RngStream(ctx.config.component_seed("direct-subset"), stream_key("direct"))
    return sorted(int(i) for i in stream.permutation(len(test))[:n])


def direct_attack(ctx: RunContext) -> StageResult:
    direct = ctx.config.direct_attack
    test = ctx.split("test")
    index = _direct_subset(ctx, test)
    subset = test.subset(index)
    attack = ctx.attack_config("direct", direct.attack)
    eval_cfg, sched = ctx.eval_config(), ctx.schedule

    targets = [("diffusion", ctx.layout.diffusion_checkpoint)]
    if ctx.layout.tmdc_checkpoint.exists():
        targets.append(("tmdc", ctx.layout.tmdc_checkpoint))

    rows, outputs = [], []
    for model_name, path in targets:
        model = model_from_checkpoint(path)
        adv = direct_attack_dataset(model, subset, attack, eval_cfg, sched, progress=ctx.progress)
        adv_path = adv.save(ctx.layout.attack(f"direct_{model_name}", "test"))
        outputs += [adv_path, adv_path.with_suffix(".json")]
        sets = [("clean@subset", subset, None), ("direct@subset", adv.dataset, adv.provenance)]
        for name in ctx.config.attacks:
            transfer = ctx.attack_set(name, "test", test)
            sets.append((f"{name}@subset", transfer.dataset.subset(index), transfer.provenance))
        for eval_set, dataset, provenance in sets:
            rows.append(_evaluate_diffusion(ctx, model, model_name, eval_set, dataset, provenance))

    outputs.append(write_metrics(ctx.layout.metrics("direct"), rows))
    outputs += [ctx.run_dir / r["rows_file"] for r in rows]
    return StageResult(outputs, {f"{r['model']}/{r['eval_set']}": r["accuracy"] for r in rows})


def report_stage(ctx: RunContext) -> StageResult:
    emit_report(ctx.run_dir)
    return StageResult([ctx.layout.report_csv, ctx.layout.report_json])


# ============================================================
# REGISTRY
# ============================================================

def _gen_attack_outputs(ctx: RunContext) -> list:
    return [ctx.layout.attack(name, split) for name, split in _attack_jobs(ctx)]


STAGES = {
    "gen-data": Stage("gen-data", gen_data,
                      lambda ctx: [ctx.layout.data(s) for s in _active_splits(ctx)]),
    "train-diffusion": Stage("train-diffusion", train_diffusion,
                             lambda ctx: [ctx.layout.diffusion_checkpoint]),
    "train-baseline": Stage("train-baseline", train_baseline,
                            lambda ctx: [ctx.layout.baseline_checkpoint(n) for n in ctx.config.baselines]),
    "adv-train-baseline": Stage(
        "adv-train-baseline", adv_train_baseline,
        lambda ctx: [ctx.layout.baseline_checkpoint(ctx.config.adversarial_training.baseline, True)]),
    "gen-attack": Stage("gen-attack", gen_attack, _gen_attack_outputs),
    "eval": Stage("eval", eval_stage, lambda ctx: [ctx.layout.metrics("eval")]),
    "tm-finetune": Stage("tm-finetune", tm_finetune_stage,
                         lambda ctx: [ctx.layout.tm_dir / MANIFEST_NAME]),
    "select-ckpt": Stage("select-ckpt", select_ckpt,
                         lambda ctx: [ctx.layout.selected, ctx.layout.metrics("tm")]),
    "direct-attack": Stage("direct-attack", direct_attack, lambda ctx: [ctx.layout.metrics("direct")]),
    "report": Stage("report", report_stage,
                    lambda ctx: [ctx.layout.report_csv, ctx.layout.report_json]),
}
