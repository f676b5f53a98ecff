"""
Training utilities shared by base diffusion training, the discriminative
baseline and Truth Maximization fine-tuning.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import torch
from pydantic import with_config

from config import STRICT_DOCUMENT
from src.tensor_core import RngStream, Tensor

logger = logging.getLogger(__name__)


@with_config(STRICT_DOCUMENT)
@dataclass(frozen=True)
class TrainConfig:
    """Steps, batch size, learning rate and seed of a training run."""

    steps: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    log_every: int = 100
    progress: bool = False

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError(f"invalid training config: {asdict(self)}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


def trainable_parameters(model: torch.nn.Module) -> list:
    return [p for p in model.parameters() if p.requires_grad]


def make_adam(params: Iterable, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(list(params), lr=learning_rate)


def make_adamw(params: Iterable, learning_rate: float, betas=(0.9, 0.999),
               weight_decay: float = 1e-2, eps: float = 1e-8) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(params), lr=learning_rate, betas=tuple(betas),
                             weight_decay=weight_decay, eps=eps)


def constant_with_warmup(optimizer: torch.optim.Optimizer,
                         warmup_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear ramp over `warmup_steps`, then constant."""
    def factor(step: int) -> float:
        if warmup_steps <= 0:
            return 1.0
        return min(1.0, (step + 1) / warmup_steps)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def sample_batch(stream: RngStream, dataset_size: int, batch_size: int) -> Tensor:
    """Indices of a batch drawn uniformly with replacement."""
    return stream.integers(0, dataset_size, batch_size)


def check_finite(loss: Tensor, step: int, what: str = "loss") -> float:
    value = float(loss)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {what} {value} at step {step}")
    return value


def running_mean(values: list, window: int) -> float:
    tail = values[-window:]
    return sum(tail) / max(len(tail), 1)
