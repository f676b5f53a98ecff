"""
Truth Maximization Module - LoRA fine-tuning on adversarial inputs

The base denoiser is frozen and low-rank adapters are trained to minimize
the diffusion loss of perturbed samples under their true labels:

    loss = mean_t || eps_theta(x_t(x_adv, eps), t, y_true) - eps ||^2

estimated with a few uniformly drawn timesteps per sample per step.
Checkpoints are written on a cadence and compared on a validation
attack set afterwards.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
import torch
from pydantic import with_config
from tqdm import tqdm

from config import CHECKPOINT_SUFFIX, CSV_FLOAT_FORMAT, STRICT_DOCUMENT
from src.attacks import AdvDataset
from src.checkpoint import (
    load_checkpoint, model_from_checkpoint, parameters_hash,
    run_id, save_checkpoint, write_json_atomic,
)
from src.classifier import EvalConfig, evaluate
from src.data import LabeledDataset
from src.diffusion import NoiseSchedule, diffusion_loss
from src.models import LoraStateError, adapter_info, attach_adapters
from src.tensor_core import ComputeTape, RngStream, stream_key
from src.training import (
    check_finite, constant_with_warmup, make_adamw, running_mean,
    sample_batch, trainable_parameters,
)

logger = logging.getLogger(__name__)

__all__ = [
    "FrozenBaseError", "LoraStateError", "TmResult", "TmRunConfig",
    "attach_lora", "merge_lora", "select_checkpoint", "tm_finetune",
]


class FrozenBaseError(AssertionError):
    """Base weights changed while only adapters were supposed to train."""


@with_config(STRICT_DOCUMENT)
@dataclass(frozen=True)
class TmRunConfig:
    """
    Defaults are rescaled for a small denoiser: lr 1e-4, rank 8, alpha 16,
    a checkpoint every 100 of 3 000 steps. With dense_until/sparse_cadence
    set, checkpoints follow `checkpoint_every` up to dense_until and
    `sparse_cadence` afterwards.
    """

    steps: int = 3000
    batch_size: int = 16
    learning_rate: float = 1e-4
    warmup_steps: int = 100
    checkpoint_every: int = 100
    dense_until: Optional[int] = None
    sparse_cadence: Optional[int] = None
    rank: int = 8
    alpha: float = 16.0
    timesteps_per_sample: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 100
    progress: bool = False

    def validate(self) -> None:
        if not self.steps >= self.checkpoint_every >= 1:
            raise ValueError(
                f"need steps >= checkpoint_every >= 1, got {self.steps}, {self.checkpoint_every}"
            )
        if self.rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.batch_size < 1 or self.timesteps_per_sample < 1:
            raise ValueError("batch_size and timesteps_per_sample must be >= 1")
        if self.learning_rate < 0 or self.warmup_steps < 0:
            raise ValueError("learning_rate and warmup_steps must be >= 0")
        if (self.dense_until is None) != (self.sparse_cadence is None):
            raise ValueError("dense_until and sparse_cadence must be set together")
        if self.sparse_cadence is not None and self.sparse_cadence < 1:
            raise ValueError("sparse_cadence must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def checkpoint_steps(self) -> list[int]:
        """Steps after which a checkpoint is written; always includes the last."""
        if self.dense_until is None:
            steps = set(range(self.checkpoint_every, self.steps + 1, self.checkpoint_every))
        else:
            dense_end = min(self.dense_until, self.steps)
            steps = set(range(self.checkpoint_every, dense_end + 1, self.checkpoint_every))
            steps |= {s for s in range(self.sparse_cadence, self.steps + 1, self.sparse_cadence)
                      if s > dense_end}
        steps.add(self.steps)
        return sorted(steps)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class TmResult:
    checkpoints: list = field(default_factory=list)
    loss_curve: list = field(default_factory=list)
    base_hash: str = ""
    run_id: str = ""
    manifest_path: Optional[Path] = None

    @property
    def paths(self) -> list[Path]:
        return [Path(entry["path"]) for entry in self.checkpoints]


def attach_lora(model, rank: int, alpha: float, seed: int = 0):
    """
    Adapter-form copy of `model`: A ~ N(0, 0.02^2), B = 0 on every affine
    layer, base weights and embeddings frozen. The input model is untouched.
    """
    adapted = attach_adapters(copy.deepcopy(model), rank, alpha, seed=seed)
    trainable = sum(p.numel() for p in trainable_parameters(adapted))
    total = sum(p.numel() for p in adapted.parameters())
    logger.info(f"  Attached LoRA r={rank} alpha={alpha}: {trainable:,} of {total:,} parameters trainable")
    return adapted


def merge_lora(model):
    """Fold W + (alpha/r) A B into every layer in place and unfreeze the model."""
    if adapter_info(model) is None:
        raise LoraStateError("model has no LoRA adapters to merge")
    for layer in model.adaptable_layers():
        layer.merge_adapter()
    for param in model.parameters():
        param.requires_grad_(True)
    return model


def _verify_frozen(model, base_hash: str, step: int) -> None:
    current = parameters_hash(model)
    if current != base_hash:
        raise FrozenBaseError(
            f"base weights changed during fine-tuning at step {step} "
            f"({base_hash[:12]} -> {current[:12]})"
        )


def tm_finetune(model, adv_dataset, config: TmRunConfig, sched: NoiseSchedule,
                output_dir: Path) -> TmResult:
    """
    Train LoRA adapters on (perturbed sample, true label) pairs.

    Args:
        model: base-trained denoiser, or one already in adapter form
        adv_dataset: AdvDataset (or a plain LabeledDataset for ordinary
            conditional fine-tuning)
        config: run configuration
        sched: noise schedule of the base model
        output_dir: receives ckpt_<step>.tmdc files and manifest.json

    Returns:
        TmResult with checkpoint entries, loss curve and the base hash
    """
    config.validate()
    dataset: LabeledDataset = getattr(adv_dataset, "dataset", adv_dataset)
    provenance = getattr(adv_dataset, "provenance", {"epsilon": 0.0})
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    if adapter_info(model) is None:
        model = attach_lora(model, config.rank, config.alpha, seed=config.seed)
    base_hash = parameters_hash(model)
    identity = run_id({"tm": config.to_dict(), "base": base_hash, "data": provenance})

    optimizer = make_adamw(trainable_parameters(model), config.learning_rate, config.betas,
                           config.weight_decay, config.adam_eps)
    scheduler = constant_with_warmup(optimizer, config.warmup_steps)
    stream = RngStream(config.seed, stream_key("tm-finetune"))
    save_at = set(config.checkpoint_steps())
    k = config.timesteps_per_sample
    result = TmResult(base_hash=base_hash, run_id=identity)

    logger.info(
        f"  Truth Maximization: {config.steps} steps, batch {config.batch_size} x {k} timesteps, "
        f"lr {config.learning_rate} (warmup {config.warmup_steps}), {len(save_at)} checkpoints"
    )
    for step in tqdm(range(config.steps), desc="tm", disable=not config.progress):
        index = sample_batch(stream, len(dataset), config.batch_size)
        x0 = dataset.samples[index].repeat_interleave(k, dim=0)
        y = dataset.labels[index].repeat_interleave(k)
        t = stream.integers(0, sched.num_timesteps, len(y))
        eps = stream.normal((len(y), dataset.dim))

        optimizer.zero_grad(set_to_none=True)
        with ComputeTape() as tape:
            try:
                loss = diffusion_loss(model, x0, y, t, eps, sched)
            except FloatingPointError as exc:
                raise FloatingPointError(f"{exc} at step {step}") from exc
            result.loss_curve.append(check_finite(loss, step))
            tape.backward(loss)
        optimizer.step()
        scheduler.step()

        done = step + 1
        if done % config.log_every == 0:
            logger.info(
                f"    step {done:>5}/{config.steps}: "
                f"loss {running_mean(result.loss_curve, config.log_every):.5f}"
            )
        if done in save_at:
            _verify_frozen(model, base_hash, done)
            path = output_dir / f"ckpt_{done}{CHECKPOINT_SUFFIX}"
            digest = save_checkpoint(path, model, metadata={"step": done, "run_id": identity})
            result.checkpoints.append({"step": done, "path": str(path), "sha256": digest})
            logger.debug(f"    checkpoint {path.name}")

    _verify_frozen(model, base_hash, config.steps)
    result.manifest_path = write_json_atomic(output_dir / "manifest.json", {
        "run_id": identity,
        "config": config.to_dict(),
        "data": provenance,
        "base_hash": base_hash,
        "loss_curve": result.loss_curve,
        "checkpoints": [{**entry, "path": Path(entry["path"]).name} for entry in result.checkpoints],
    })
    logger.info(f"  Wrote {len(result.checkpoints)} checkpoints to {output_dir}")
    return result


def select_checkpoint(checkpoints: Sequence[Path], val_set: AdvDataset,
                      eval_config: EvalConfig, sched: NoiseSchedule,
                      clean_set: Optional[LabeledDataset] = None) -> tuple[Path, pd.DataFrame]:
    """
    Robust accuracy of every checkpoint on `val_set`; the best one wins,
    the earliest step on ties.

    Returns:
        (best checkpoint path, sweep table with step, clean_acc, robust_acc)
    """
    if not checkpoints:
        raise ValueError("select_checkpoint needs at least one checkpoint")
    clean_set = clean_set if clean_set is not None else val_set.source

    records = []
    for path in checkpoints:
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt)
        robust = evaluate(model, val_set.dataset, eval_config, sched).accuracy
        clean = evaluate(model, clean_set, eval_config, sched).accuracy if clean_set is not None else float("nan")
        step = int(ckpt.metadata.get("step", -1))
        records.append({"step": step, "clean_acc": clean, "robust_acc": robust, "path": str(path)})
        logger.info(f"    checkpoint step {step}: clean {clean:.4f}, robust {robust:.4f}")

    sweep = pd.DataFrame.from_records(records).sort_values("step", kind="stable").reset_index(drop=True)
    best = sweep.loc[sweep["robust_acc"].idxmax()]
    logger.info(f"  Selected checkpoint step {int(best['step'])} (robust {best['robust_acc']:.4f})")
    return Path(best["path"]), sweep[["step", "clean_acc", "robust_acc"]]


def save_sweep(sweep: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sweep.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path
