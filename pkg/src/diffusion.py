"""
Diffusion Module - noise schedule, forward noising, diffusion loss,
base generative training and the ancestral sampler.

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    loss = mean_coords || eps - eps_theta(x_t, t, y) ||^2      (w_t = 1)
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
from tqdm import tqdm

from src import tensor_core as tc
from src.data import LabeledDataset
from src.tensor_core import ComputeTape, RngStream, Tensor, stream_key
from src.training import (
    TrainConfig, check_finite, make_adam, running_mean,
    sample_batch, trainable_parameters,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-timestep beta, alpha = 1 - beta and alpha_bar = cumprod(alpha)."""

    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor

    @property
    def num_timesteps(self) -> int:
        return int(self.beta.shape[0])

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = tc.tensor(beta)
        if beta.dim() != 1 or beta.numel() < 1:
            raise ValueError("beta must be a nonempty 1-D sequence")
        if bool((beta <= 0).any()) or bool((beta >= 1).any()):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))

    def to_dict(self) -> dict:
        return {"num_timesteps": self.num_timesteps,
                "beta_start": float(self.beta[0]),
                "beta_end": float(self.beta[-1])}


def build_schedule(num_timesteps: int = 100, beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if num_timesteps < 2:
        raise ValueError(f"need at least 2 timesteps, got {num_timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = torch.linspace(beta_start, beta_end, num_timesteps, dtype=tc.DTYPE)
    return NoiseSchedule.from_betas(beta)


def _timesteps(t: Union[int, Tensor], sched: NoiseSchedule) -> Tensor:
    index = torch.as_tensor(t, dtype=torch.long)
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= sched.num_timesteps):
        raise ValueError(f"timestep out of range [0, {sched.num_timesteps})")
    return index


def forward_noise(x0: Tensor, t: Union[int, Tensor], eps: Tensor,
                  sched: NoiseSchedule) -> Tensor:
    """
    Noise x0 to timestep t with the given noise draw.

    Args:
        x0: clean data, (d,) or (B, d)
        t: scalar timestep or one per row
        eps: noise with the shape of x0
        sched: noise schedule

    Returns:
        sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    """
    if x0.shape != eps.shape:
        raise tc.ShapeError(
            f"forward_noise: shape mismatch {tuple(x0.shape)} vs {tuple(eps.shape)}"
        )
    index = _timesteps(t, sched)
    alpha_bar = sched.alpha_bar[index]
    if alpha_bar.dim() == 1:
        alpha_bar = alpha_bar.unsqueeze(-1)
    signal = tc.multiply(alpha_bar.sqrt(), x0)
    noise = tc.multiply((1.0 - alpha_bar).sqrt(), eps)
    return tc.add(signal, noise)


def denoiser_predict(model, x_t: Tensor, t: Union[int, Tensor],
                     y: Union[int, Tensor]) -> Tensor:
    """eps_theta(x_t, t, y); same shape as x_t."""
    return model(x_t, t, y)


def per_sample_diffusion_loss(model, x0: Tensor, y, t, eps: Tensor,
                              sched: NoiseSchedule) -> Tensor:
    """Mean squared noise-prediction error per row, shape (B,) or ()."""
    x_t = forward_noise(x0, t, eps, sched)
    prediction = denoiser_predict(model, x_t, t, y)
    return tc.scale(tc.squared_l2(eps, prediction), 1.0 / x0.shape[-1])


def diffusion_loss(model, x0: Tensor, y, t, eps: Tensor,
                   sched: NoiseSchedule) -> Tensor:
    """Scalar diffusion loss (mean over coordinates and rows)."""
    return tc.mean(per_sample_diffusion_loss(model, x0, y, t, eps, sched))


def train_base(model, dataset: LabeledDataset, config: TrainConfig,
               sched: NoiseSchedule) -> tuple:
    """
    Minimize the diffusion loss over random (batch, t, eps) draws with the
    labels as conditions.

    Returns:
        (model, loss_curve) - the model is trained in place
    """
    config.validate()
    stream = RngStream(config.seed, stream_key("train-base"))
    optimizer = make_adam(trainable_parameters(model), config.learning_rate)
    curve: list[float] = []

    logger.info(
        f"  Training denoiser: {config.steps} steps, batch {config.batch_size}, "
        f"lr {config.learning_rate}, T={sched.num_timesteps}"
    )
    for step in tqdm(range(config.steps), desc="diffusion", disable=not config.progress):
        index = sample_batch(stream, len(dataset), config.batch_size)
        t = stream.integers(0, sched.num_timesteps, config.batch_size)
        eps = stream.normal((config.batch_size, dataset.dim))

        optimizer.zero_grad(set_to_none=True)
        with ComputeTape() as tape:
            try:
                loss = diffusion_loss(model, dataset.samples[index], dataset.labels[index],
                                      t, eps, sched)
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
    return model, curve


def ancestral_sample(model, sched: NoiseSchedule, y: int, n: int,
                     stream: RngStream, variance: str = "beta",
                     x_T: Optional[Tensor] = None) -> Tensor:
    """
    DDPM reverse chain from x_T ~ N(0, I) conditioned on label y.

    Args:
        variance: "beta" (sigma_t^2 = beta_t) or "posterior"
            (sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t))
        x_T: optional starting point instead of a fresh draw

    Returns:
        n samples in data space
    """
    if variance not in ("beta", "posterior"):
        raise ValueError(f"Unknown sampler variance: {variance}")
    x = x_T.detach().clone() if x_T is not None else stream.normal((n, model.input_dim))

    with torch.no_grad():
        for t in reversed(range(sched.num_timesteps)):
            beta = float(sched.beta[t])
            alpha = float(sched.alpha[t])
            alpha_bar = float(sched.alpha_bar[t])
            eps_hat = denoiser_predict(model, x, t, y)
            x = (x - beta / math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha)
            if t > 0:
                if variance == "beta":
                    sigma2 = beta
                else:
                    sigma2 = beta * (1.0 - float(sched.alpha_bar[t - 1])) / (1.0 - alpha_bar)
                x = x + math.sqrt(sigma2) * stream.normal(tuple(x.shape))
    return x
