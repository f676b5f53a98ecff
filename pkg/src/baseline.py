"""
Baseline Module - Discriminative reference classifiers

Standard cross-entropy training, PGD adversarial training (fresh attack
per batch) and softmax prediction. A trained baseline also serves as the
surrogate that generates transfer attacks.
"""

import logging
from typing import Optional, Sequence

import torch
from tqdm import tqdm

from src import tensor_core as tc
from src.attacks import AttackConfig, check_perturbation, pgd, surrogate_loss_grad
from src.data import LabeledDataset
from src.models import DiscriminativeModel
from src.tensor_core import ComputeTape, RngStream, Tensor, stream_key
from src.training import (
    TrainConfig, check_finite, make_adam, running_mean,
    sample_batch, trainable_parameters,
)

logger = logging.getLogger(__name__)


def predict(model, x: Tensor) -> tuple[Tensor, Tensor]:
    """
    Args:
        model: discriminative model
        x: (d,) or (B, d)

    Returns:
        (argmax labels, softmax probabilities)
    """
    with torch.no_grad():
        probs = torch.exp(tc.log_softmax(model(x)))
    return probs.argmax(dim=-1), probs


def accuracy(model, dataset: LabeledDataset) -> float:
    labels, _ = predict(model, dataset.samples)
    return float((labels == dataset.labels).to(tc.DTYPE).mean())


def _fit(model, dataset: LabeledDataset, config: TrainConfig, name: str,
         attack: Optional[AttackConfig] = None) -> list:
    stream = RngStream(config.seed, stream_key(name))
    optimizer = make_adam(trainable_parameters(model), config.learning_rate)
    loss_grad = surrogate_loss_grad(model) if attack is not None else None
    curve: list[float] = []

    for step in tqdm(range(config.steps), desc=name, disable=not config.progress):
        index = sample_batch(stream, len(dataset), config.batch_size)
        x, y = dataset.samples[index], dataset.labels[index]
        if attack is not None:
            x_adv = pgd(loss_grad, x, y, attack, sample_ids=dataset.sample_ids[index],
                        start_key=(name, step))
            check_perturbation(x_adv, x, attack.epsilon, attack.norm)
            x = x_adv

        optimizer.zero_grad(set_to_none=True)
        with ComputeTape() as tape:
            try:
                loss = tc.mean(tc.cross_entropy(model(x), y))
            except FloatingPointError as exc:
                raise FloatingPointError(f"{exc} at step {step}") from exc
            curve.append(check_finite(loss, step))
            tape.backward(loss)
        optimizer.step()

        if (step + 1) % config.log_every == 0:
            logger.info(
                f"    step {step + 1:>5}/{config.steps}: "
                f"loss {running_mean(curve, config.log_every):.5f}"
            )
    return curve


def train_discriminative(dataset: LabeledDataset, config: TrainConfig,
                         hidden_dims: Sequence[int] = (128, 128),
                         test_set: Optional[LabeledDataset] = None) -> tuple:
    """
    Minimize softmax cross-entropy on `dataset`.

    Returns:
        (model, curves) where curves holds the loss curve and the final
        train/test accuracies
    """
    config.validate()
    model = DiscriminativeModel(dataset.dim, dataset.num_classes, hidden_dims, seed=config.seed)
    logger.info(
        f"  Training baseline {list(hidden_dims)}: {config.steps} steps, "
        f"batch {config.batch_size}, lr {config.learning_rate}"
    )
    curve = _fit(model, dataset, config, "baseline")
    return model, _curves(model, curve, dataset, test_set)


def adversarial_train(dataset: LabeledDataset, attack_config: AttackConfig,
                      config: TrainConfig, hidden_dims: Sequence[int] = (128, 128),
                      test_set: Optional[LabeledDataset] = None) -> tuple:
    """
    Madry loop: every batch is replaced by PGD perturbations against the
    current model before the gradient step.
    """
    config.validate()
    attack_config.validate()
    if attack_config.kind != "pgd":
        raise ValueError(f"adversarial training expects a pgd attack, got {attack_config.kind}")
    model = DiscriminativeModel(dataset.dim, dataset.num_classes, hidden_dims, seed=config.seed)
    logger.info(
        f"  Adversarial training {list(hidden_dims)}: {config.steps} steps, "
        f"PGD eps={attack_config.epsilon} x{attack_config.iters} ({attack_config.norm})"
    )
    curve = _fit(model, dataset, config, "adversarial", attack=attack_config)
    return model, _curves(model, curve, dataset, test_set)


def _curves(model, curve: list, dataset: LabeledDataset,
            test_set: Optional[LabeledDataset]) -> dict:
    out = {"loss": curve, "train_accuracy": accuracy(model, dataset)}
    if test_set is not None:
        out["test_accuracy"] = accuracy(model, test_set)
    logger.info(
        f"  Baseline accuracy: train {out['train_accuracy']:.4f}"
        + (f", test {out['test_accuracy']:.4f}" if test_set is not None else "")
    )
    return out
