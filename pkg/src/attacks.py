"""
Attacks Module - Adversarial example generation

    - project: l_inf / l2 ball projection
    - fgsm: single signed-gradient step (FGM along the unit gradient under l2)
    - pgd: random start + projected ascent, returns the final iterate
    - pgd_restarts: restarts with step halving ("AutoAttack-lite")
    - gen_adv_dataset: transfer attack against a discriminative surrogate
    - direct_attack_diffusion: white-box attack on the diffusion classifier

A loss-gradient function maps a batch (x, y) to (per-sample loss, dloss/dx).
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch
from pydantic import with_config
from tqdm import tqdm

from config import AUTOATTACK_LITE_LABEL, DATA_LOWER, DATA_UPPER, STRICT_DOCUMENT
from src import tensor_core as tc
from src.checkpoint import write_json_atomic
from src.classifier import (
    EvalConfig, MCPlan, class_losses, log_posterior_from_losses,
    make_mc_plan, mc_stream,
)
from src.data import LabeledDataset
from src.diffusion import NoiseSchedule
from src.tensor_core import RngStream, Tensor, input_gradient, stream_key

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "pgd", "pgd_restarts", "direct_diffusion")
NORMS = ("l_inf", "l2")
CONTRACT_TOL = 1e-9

LossGrad = Callable[[Tensor, Tensor], tuple]


class AttackContractError(AssertionError):
    """An adversarial sample left its epsilon-ball or the data bounds."""


@with_config(STRICT_DOCUMENT)
@dataclass(frozen=True)
class AttackConfig:
    """
    epsilon is in data units on [-1, 1]. step_size defaults to epsilon / 4;
    patience is the number of non-improving iterations before pgd_restarts
    halves its step (0 disables halving).
    """

    kind: str = "pgd"
    norm: str = "l_inf"
    epsilon: float = 0.05
    iters: int = 40
    step_size: Optional[float] = None
    restarts: int = 1
    patience: int = 5
    random_start: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"Unknown attack kind: {self.kind}")
        if self.norm not in NORMS:
            raise ValueError(f"Unknown attack norm: {self.norm}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.kind != "fgsm" and self.iters < 1:
            raise ValueError(f"iters must be >= 1 for {self.kind}, got {self.iters}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    @property
    def label(self) -> str:
        if self.kind == "pgd_restarts":
            return AUTOATTACK_LITE_LABEL
        return {"fgsm": "FGSM" if self.norm == "l_inf" else "FGM",
                "pgd": "PGD", "direct_diffusion": "PGD-direct"}[self.kind]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["step_size"] = self.step
        return out


# ============================================================
# PROJECTION AND CONTRACTS
# ============================================================

def _norms(delta: Tensor, norm: str) -> Tensor:
    if norm == "l_inf":
        return delta.abs().amax(dim=-1)
    return delta.norm(dim=-1)


def project(delta: Tensor, norm: str, epsilon: float) -> Tensor:
    """Nearest point of the epsilon-ball (rows are independent)."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if norm == "l_inf":
        return torch.clamp(delta, -epsilon, epsilon)
    if norm != "l2":
        raise ValueError(f"Unknown attack norm: {norm}")
    norms = delta.norm(dim=-1, keepdim=True)
    factor = torch.where(norms > epsilon, epsilon / norms.clamp_min(1e-300), torch.ones_like(norms))
    return delta * factor


def check_perturbation(x_adv: Tensor, x: Tensor, epsilon: float, norm: str,
                       bounds: tuple = (DATA_LOWER, DATA_UPPER)) -> float:
    """
    Raise AttackContractError unless every row is within epsilon of its
    source and inside the data bounds. Returns the largest perturbation norm.
    """
    if x_adv.shape != x.shape:
        raise AttackContractError(
            f"adversarial batch {tuple(x_adv.shape)} is not aligned with {tuple(x.shape)}"
        )
    if x_adv.numel() == 0:
        return 0.0
    largest = float(_norms(x_adv - x, norm).max())
    if largest > epsilon + CONTRACT_TOL:
        raise AttackContractError(f"perturbation {norm} norm {largest:.3e} exceeds epsilon {epsilon:.3e}")
    if float(x_adv.min()) < bounds[0] or float(x_adv.max()) > bounds[1]:
        raise AttackContractError(f"adversarial sample leaves data bounds {bounds}")
    return largest


# ============================================================
# ATTACKS
# ============================================================

def _check_gradient(grad: Tensor, where: str) -> None:
    if not bool(torch.isfinite(grad).all()):
        raise FloatingPointError(f"non-finite input gradient at {where}")


def _direction(grad: Tensor, norm: str) -> Tensor:
    if norm == "l_inf":
        return torch.sign(grad)
    norms = grad.norm(dim=-1, keepdim=True)
    return torch.where(norms > 0, grad / norms.clamp_min(1e-300), torch.zeros_like(grad))


def fgsm(loss_grad: LossGrad, x: Tensor, y: Tensor, epsilon: float,
         bounds: tuple = (DATA_LOWER, DATA_UPPER), norm: str = "l_inf") -> Tensor:
    """x + epsilon * sign(grad) clipped to bounds; sign(0) = 0."""
    _, grad = loss_grad(x, y)
    _check_gradient(grad, "fgsm")
    return tc.clip(x + epsilon * _direction(grad, norm), *bounds)


def _sample_ids(x: Tensor, sample_ids: Optional[Tensor]) -> list[int]:
    if sample_ids is None:
        return list(range(x.shape[0]))
    return [int(i) for i in sample_ids]


def random_start(x: Tensor, config: AttackConfig, sample_ids: Optional[Tensor] = None,
                 key: tuple = ()) -> Tensor:
    """Uniform draw from the epsilon-ball, one stream per sample id."""
    d = x.shape[-1]
    rows = []
    for sid in _sample_ids(x, sample_ids):
        stream = RngStream(config.seed, stream_key("attack-start", sid, *key))
        if config.norm == "l_inf":
            rows.append(stream.uniform(d, -config.epsilon, config.epsilon))
        else:
            direction = stream.normal(d)
            radius = config.epsilon * float(stream.uniform(1)[0]) ** (1.0 / d)
            rows.append(direction / direction.norm().clamp_min(1e-300) * radius)
    return torch.stack(rows)


def pgd(loss_grad: LossGrad, x: Tensor, y: Tensor, config: AttackConfig,
        sample_ids: Optional[Tensor] = None, bounds: tuple = (DATA_LOWER, DATA_UPPER),
        start_key: tuple = ()) -> Tensor:
    """
    Projected gradient ascent (Madry): random start in the ball, then
    `iters` steps of x <- clip(x0 + project(x + step * dir - x0)).

    Args:
        loss_grad: (x, y) -> (per-sample loss, gradient)
        x: clean batch (B, d)
        y: labels (B,)
        config: attack parameters
        sample_ids: ids keying the random-start streams (default 0..B-1)
        bounds: data range
        start_key: extra stream key parts (e.g. the training step)

    Returns:
        final iterate, same shape as x
    """
    config.validate()
    x = x.detach()
    if config.random_start:
        x_adv = tc.clip(x + random_start(x, config, sample_ids, start_key), *bounds)
    else:
        x_adv = x.clone()
    for iteration in range(config.iters):
        _, grad = loss_grad(x_adv, y)
        _check_gradient(grad, f"iteration {iteration}")
        x_adv = x_adv + config.step * _direction(grad, config.norm)
        x_adv = tc.clip(x + project(x_adv - x, config.norm, config.epsilon), *bounds)
    return x_adv


def pgd_restarts(loss_grad: LossGrad, x: Tensor, y: Tensor, config: AttackConfig,
                 sample_ids: Optional[Tensor] = None, bounds: tuple = (DATA_LOWER, DATA_UPPER),
                 is_adversarial: Optional[Callable[[Tensor, Tensor], Tensor]] = None,
                 history: Optional[list] = None, start_key: tuple = ()) -> Tensor:
    """
    Multi-restart PGD with per-sample step halving.

    Restart 0 starts like pgd; every later restart starts from the incumbent
    with the step size reset. Within a restart a sample's step halves after
    `patience` iterations without a new best loss. The incumbent is the
    restart endpoint with the highest loss, except that the first endpoint
    flagged by `is_adversarial` is kept for good.

    Args:
        history: if given, receives the batch-mean running best loss after
            every iteration (nondecreasing)
    """
    config.validate()
    x = x.detach()
    batch = x.shape[0]
    best_x = x.clone()
    best_loss = torch.full((batch,), -math.inf, dtype=tc.DTYPE)
    running_best = torch.full((batch,), -math.inf, dtype=tc.DTYPE)
    solved = torch.zeros(batch, dtype=torch.bool)

    for restart in range(config.restarts):
        if restart > 0:
            x_adv = best_x.clone()
        elif config.random_start:
            x_adv = tc.clip(x + random_start(x, config, sample_ids, start_key), *bounds)
        else:
            x_adv = x.clone()
        step = torch.full((batch, 1), config.step, dtype=tc.DTYPE)
        trajectory_best = torch.full((batch,), -math.inf, dtype=tc.DTYPE)
        stall = torch.zeros(batch, dtype=torch.long)

        for iteration in range(config.iters):
            values, grad = loss_grad(x_adv, y)
            _check_gradient(grad, f"restart {restart} iteration {iteration}")
            improved = values > trajectory_best
            trajectory_best = torch.where(improved, values, trajectory_best)
            running_best = torch.maximum(running_best, values)
            if history is not None:
                history.append(float(running_best.mean()))
            if config.patience > 0:
                stall = torch.where(improved, torch.zeros_like(stall), stall + 1)
                halve = stall >= config.patience
                if bool(halve.any()):
                    logger.debug(f"    restart {restart} iteration {iteration}: "
                                 f"halving step for {int(halve.sum())} samples")
                    step = torch.where(halve.unsqueeze(1), step / 2.0, step)
                    stall = torch.where(halve, torch.zeros_like(stall), stall)
            x_adv = x_adv + step * _direction(grad, config.norm)
            x_adv = tc.clip(x + project(x_adv - x, config.norm, config.epsilon), *bounds)

        values, _ = loss_grad(x_adv, y)
        take = (values > best_loss) & ~solved
        if is_adversarial is not None:
            hit = is_adversarial(x_adv, y) & ~solved
            take = take | hit
            solved = solved | hit
        best_x = torch.where(take.unsqueeze(1), x_adv, best_x)
        best_loss = torch.where(take, values, best_loss)
        logger.debug(f"    restart {restart}: mean best loss {float(best_loss.mean()):.5f}, "
                     f"{int(solved.sum())} solved")
    return best_x


# ============================================================
# LOSS GRADIENTS
# ============================================================

def surrogate_loss_grad(model) -> LossGrad:
    """Cross-entropy of a discriminative model and its input gradient."""
    def loss_grad(x: Tensor, y: Tensor) -> tuple:
        return input_gradient(lambda z: tc.cross_entropy(model(z), y), x)
    return loss_grad


def misclassified_by(model) -> Callable[[Tensor, Tensor], Tensor]:
    def is_adversarial(x: Tensor, y: Tensor) -> Tensor:
        with torch.no_grad():
            return model(x).argmax(dim=-1) != y
    return is_adversarial


def posterior_cross_entropy(model, x: Tensor, plan: MCPlan, y: int) -> Tensor:
    """-log p(y | x) under the diffusion classifier's posterior for one sample."""
    losses = class_losses(model, x, plan, range(model.num_classes))
    return tc.scale(tc.take(log_posterior_from_losses(losses), int(y)), -1.0)


def diffusion_loss_grad(model, plans: list) -> LossGrad:
    """Posterior cross-entropy per row, each row with its own fixed plan."""
    def objective(z: Tensor, y: Tensor) -> Tensor:
        return tc.stack([
            posterior_cross_entropy(model, tc.take(z, i), plans[i], int(y[i])) for i in range(z.shape[0])
        ])

    def loss_grad(x: Tensor, y: Tensor) -> tuple:
        return input_gradient(lambda z: objective(z, y), x)
    return loss_grad


# ============================================================
# ADVERSARIAL DATASETS
# ============================================================

@dataclass
class AdvDataset:
    """Perturbed samples aligned row-for-row with their clean source."""

    dataset: LabeledDataset
    provenance: dict = field(default_factory=dict)
    source: Optional[LabeledDataset] = None

    def __len__(self) -> int:
        return len(self.dataset)

    def validate(self) -> float:
        if self.source is None:
            raise ValueError("AdvDataset has no source dataset to validate against")
        if not torch.equal(self.dataset.sample_ids, self.source.sample_ids) or \
                not torch.equal(self.dataset.labels, self.source.labels):
            raise AttackContractError("adversarial set is not aligned with its source")
        return check_perturbation(
            self.dataset.samples, self.source.samples,
            self.provenance["epsilon"], self.provenance["norm"],
            (self.dataset.lower, self.dataset.upper),
        )

    def perturbation_norms(self) -> Tensor:
        if self.source is None:
            raise ValueError("AdvDataset has no source dataset")
        return _norms(self.dataset.samples - self.source.samples, self.provenance["norm"])

    def save(self, path: Path) -> Path:
        """CSV in the dataset layout plus a sidecar JSON provenance record."""
        path = Path(path)
        self.dataset.save_csv(path)
        write_json_atomic(path.with_suffix(".json"), self.provenance)
        return path

    @classmethod
    def load(cls, path: Path, num_classes: int,
             source: Optional[LabeledDataset] = None) -> "AdvDataset":
        path = Path(path)
        provenance = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        dataset = LabeledDataset.load_csv(path, num_classes, split=provenance.get("split"))
        adv = cls(dataset=dataset, provenance=provenance, source=source)
        if source is not None:
            adv.validate()
        return adv


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def gen_adv_dataset(surrogate, dataset: LabeledDataset, config: AttackConfig,
                    surrogate_hash: Optional[str] = None, batch_size: int = 256,
                    progress: bool = False) -> AdvDataset:
    """
    Attack every sample against the surrogate's cross-entropy (transfer
    protocol). Deterministic per config.seed; batching does not change
    the result.
    """
    config.validate()
    if config.kind == "direct_diffusion":
        raise ValueError("direct_diffusion attacks the diffusion classifier; use direct_attack_dataset")
    loss_grad = surrogate_loss_grad(surrogate)
    adversarial = misclassified_by(surrogate)

    chunks = []
    for part in tqdm(list(_batches(len(dataset), batch_size)), desc=config.label, disable=not progress):
        x, y, ids = dataset.samples[part], dataset.labels[part], dataset.sample_ids[part]
        if config.kind == "fgsm":
            chunks.append(fgsm(loss_grad, x, y, config.epsilon, norm=config.norm))
        elif config.kind == "pgd":
            chunks.append(pgd(loss_grad, x, y, config, sample_ids=ids))
        else:
            chunks.append(pgd_restarts(loss_grad, x, y, config, sample_ids=ids,
                                       is_adversarial=adversarial))
    samples = torch.cat(chunks)

    with torch.no_grad():
        clean_acc = float((surrogate(dataset.samples).argmax(-1) == dataset.labels).double().mean())
        robust_acc = float((surrogate(samples).argmax(-1) == dataset.labels).double().mean())
    provenance = {
        **config.to_dict(),
        "label": config.label,
        "split": f"{dataset.split}_adv",
        "target": "surrogate",
        "surrogate_checkpoint": surrogate_hash,
        "surrogate_clean_accuracy": clean_acc,
        "surrogate_robust_accuracy": robust_acc,
    }
    adv = AdvDataset(dataset.with_samples(samples, split=provenance["split"]), provenance, dataset)
    largest = adv.validate()
    logger.info(
        f"  {config.label} ({config.norm}, eps={config.epsilon}): {len(adv):,} samples, "
        f"max norm {largest:.4f}, surrogate accuracy {clean_acc:.4f} -> {robust_acc:.4f}"
    )
    return adv


def direct_attack_diffusion(model, plan: MCPlan, x: Tensor, y: int,
                            config: AttackConfig, sample_id: int = 0) -> Tensor:
    """
    White-box PGD on the diffusion classifier's posterior cross-entropy for
    one sample. The plan stays fixed across iterations.
    """
    loss_grad = diffusion_loss_grad(model, [plan])
    labels = torch.as_tensor([int(y)], dtype=torch.long)
    ids = torch.as_tensor([int(sample_id)], dtype=torch.long)
    return pgd(loss_grad, x.unsqueeze(0), labels, config, sample_ids=ids)[0]


def direct_attack_dataset(model, dataset: LabeledDataset, config: AttackConfig,
                          eval_config: EvalConfig, sched: NoiseSchedule,
                          progress: bool = False) -> AdvDataset:
    """
    Direct attack on every sample, each with the plan the evaluator draws
    for that sample (flat budget of eval_config.num_pairs pairs).
    """
    config.validate()
    rows = []
    for i in tqdm(range(len(dataset)), desc="direct", disable=not progress):
        sample_id = int(dataset.sample_ids[i])
        plan = make_mc_plan(sched, eval_config.num_pairs, dataset.dim, eval_config.strategy,
                            mc_stream(eval_config.seed, sample_id))
        rows.append(direct_attack_diffusion(model, plan, dataset.samples[i],
                                            int(dataset.labels[i]), config, sample_id))
    samples = torch.stack(rows)
    provenance = {
        **config.to_dict(),
        "kind": "direct_diffusion",
        "label": "PGD-direct",
        "split": f"{dataset.split}_direct",
        "target": "diffusion",
        "num_pairs": eval_config.num_pairs,
        "eval_seed": eval_config.seed,
    }
    adv = AdvDataset(dataset.with_samples(samples, split=provenance["split"]), provenance, dataset)
    largest = adv.validate()
    logger.info(f"  Direct attack: {len(adv):,} samples, max norm {largest:.4f}")
    return adv
