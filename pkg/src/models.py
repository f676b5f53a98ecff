"""
Models Module - Neural Network Architectures

MLP architectures shared by the generative and discriminative sides:

    - AdaptableLinear: affine layer with an optional low-rank adapter
    - SinusoidalTimeEmbedding: fixed timestep encoding
    - DenoiserModel: conditional noise predictor eps_theta(x_t, t, y)
    - DiscriminativeModel: softmax classifier used as baseline and surrogate

All layers compute through src.tensor_core primitives in float64.
"""

import math
from typing import Sequence, Union

import torch
import torch.nn as nn

from src import tensor_core as tc
from src.tensor_core import RngStream, Tensor, stream_key


class LoraStateError(RuntimeError):
    """Adapter attach/merge requested in the wrong state."""


def _xavier_normal(stream: RngStream, fan_out: int, fan_in: int) -> Tensor:
    # nn.init would draw from torch's global generator; weights come from the keyed stream only
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return tc.scale(stream.normal((fan_out, fan_in)), std)


class AdaptableLinear(nn.Module):
    """
    Affine layer W x + b with an optional LoRA adapter.

    Effective weight is W + (alpha / r) * A @ B with A: (d_out, r) and
    B: (r, d_in). While an adapter is attached, W and b are frozen.
    """

    def __init__(self, in_features: int, out_features: int,
                 stream: RngStream, zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features

        if zero_init:
            weight = torch.zeros(out_features, in_features, dtype=tc.DTYPE)
        else:
            weight = _xavier_normal(stream, out_features, in_features)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=tc.DTYPE))

        self.register_parameter("lora_A", None)
        self.register_parameter("lora_B", None)
        self.rank = 0
        self.alpha = 0.0

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    def attach_adapter(self, rank: int, alpha: float, stream: RngStream,
                       init_std: float = 0.02) -> None:
        if self.has_adapter:
            raise LoraStateError("adapter already attached")
        if not 1 <= rank < min(self.in_features, self.out_features):
            raise ValueError(
                f"LoRA rank {rank} must satisfy 1 <= r < "
                f"min({self.in_features}, {self.out_features})"
            )
        self.rank = rank
        self.alpha = float(alpha)
        self.lora_A = nn.Parameter(tc.scale(stream.normal((self.out_features, rank)), init_std))
        self.lora_B = nn.Parameter(torch.zeros(rank, self.in_features, dtype=tc.DTYPE))
        self.weight.requires_grad_(False)
        self.bias.requires_grad_(False)

    def effective_weight(self) -> Tensor:
        if not self.has_adapter:
            return self.weight
        update = tc.matmul(self.lora_A, self.lora_B)
        return tc.add(self.weight, tc.scale(update, self.alpha / self.rank))

    def merge_adapter(self) -> None:
        """Fold the adapter into W and drop it."""
        if not self.has_adapter:
            raise LoraStateError("no adapter to merge")
        with torch.no_grad():
            merged = self.effective_weight().detach().clone()
        self.weight = nn.Parameter(merged)
        self.bias.requires_grad_(True)
        self.lora_A = None
        self.lora_B = None
        self.rank = 0
        self.alpha = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return tc.affine(x, self.effective_weight(), self.bias)


class SinusoidalTimeEmbedding(nn.Module):
    """Fixed sin/cos encoding of integer timesteps (not learned)."""

    def __init__(self, dim: int = 32, max_period: float = 10000.0):
        super().__init__()
        if dim % 2:
            raise ValueError(f"time embedding dim must be even, got {dim}")
        half = dim // 2
        freqs = torch.exp(
            -math.log(max_period) * torch.arange(half, dtype=tc.DTYPE) / half
        )
        self.dim = dim
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: Tensor) -> Tensor:
        args = t.to(tc.DTYPE).unsqueeze(-1) * self.freqs
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _as_index(value: Union[int, Tensor], batch: int) -> Tensor:
    index = torch.as_tensor(value, dtype=torch.long)
    if index.dim() == 0:
        index = index.expand(batch)
    return index


class DenoiserModel(nn.Module):
    """
    Conditional noise predictor eps_theta(x_t, t, y).

    Input is concat[x_t, time embedding, class embedding] fed through
    affine+SiLU hidden layers and a zero-initialized output layer, so a
    fresh model predicts exactly zero noise.
    """

    kind = "denoiser"

    def __init__(self, input_dim: int, num_classes: int, num_timesteps: int,
                 time_dim: int = 32, class_dim: int = 16,
                 hidden_dims: Sequence[int] = (128, 128), seed: int = 0):
        """
        Args:
            input_dim: data dimensionality d
            num_classes: number of labels C
            num_timesteps: schedule length T (valid t are 0..T-1)
            time_dim: sinusoidal embedding size
            class_dim: learned class embedding size
            hidden_dims: hidden layer widths
            seed: parameter initialization seed
        """
        super().__init__()
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.num_timesteps = num_timesteps
        self.time_dim = time_dim
        self.class_dim = class_dim
        self.hidden_dims = tuple(hidden_dims)
        self.seed = seed

        stream = RngStream(seed, stream_key("denoiser-init"))
        self.time_embedding = SinusoidalTimeEmbedding(time_dim)
        self.class_embedding = nn.Parameter(
            torch.zeros(num_classes, class_dim, dtype=tc.DTYPE)
        )

        layers = []
        prev_dim = input_dim + time_dim + class_dim
        for hidden_dim in self.hidden_dims:
            layers.append(AdaptableLinear(prev_dim, hidden_dim, stream))
            prev_dim = hidden_dim
        self.hidden = nn.ModuleList(layers)
        self.output = AdaptableLinear(prev_dim, input_dim, stream, zero_init=True)

    def hparams(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "num_timesteps": self.num_timesteps,
            "time_dim": self.time_dim,
            "class_dim": self.class_dim,
            "hidden_dims": list(self.hidden_dims),
            "seed": self.seed,
        }

    def adaptable_layers(self) -> list[AdaptableLinear]:
        return [*self.hidden, self.output]

    def forward(self, x_t: Tensor, t: Union[int, Tensor], y: Union[int, Tensor]) -> Tensor:
        """
        Args:
            x_t: noisy data, shape (B, d) or (d,)
            t: timestep(s) in [0, T)
            y: label(s) in [0, C)

        Returns:
            predicted noise with the shape of x_t
        """
        single = x_t.dim() == 1
        if single:
            x_t = tc.reshape(x_t, (1, -1))
        batch = x_t.shape[0]
        t = _as_index(t, batch)
        y = _as_index(y, batch)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_timesteps):
            raise ValueError(f"timestep out of range [0, {self.num_timesteps})")
        if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")

        h = tc.concat([x_t, self.time_embedding(t), tc.embedding(y, self.class_embedding)])
        for layer in self.hidden:
            h = tc.silu(layer(h))
        out = self.output(h)
        return tc.reshape(out, (-1,)) if single else out


class DiscriminativeModel(nn.Module):
    """
    MLP classifier d -> hidden -> C with SiLU, trained with softmax
    cross-entropy. Serves as the comparison baseline and attack surrogate.
    """

    kind = "discriminative"

    def __init__(self, input_dim: int, num_classes: int,
                 hidden_dims: Sequence[int] = (128, 128), seed: int = 0):
        super().__init__()
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden_dims = tuple(hidden_dims)
        self.seed = seed

        stream = RngStream(seed, stream_key("discriminative-init"))
        layers = []
        prev_dim = input_dim
        for hidden_dim in self.hidden_dims:
            layers.append(AdaptableLinear(prev_dim, hidden_dim, stream))
            prev_dim = hidden_dim
        self.hidden = nn.ModuleList(layers)
        self.output = AdaptableLinear(prev_dim, num_classes, stream)

    def hparams(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dims": list(self.hidden_dims),
            "seed": self.seed,
        }

    def forward(self, x: Tensor) -> Tensor:
        """Logits of shape (B, C)."""
        h = x
        for layer in self.hidden:
            h = tc.silu(layer(h))
        return self.output(h)


MODEL_KINDS = {
    DenoiserModel.kind: DenoiserModel,
    DiscriminativeModel.kind: DiscriminativeModel,
}


def build_model(kind: str, hparams: dict) -> nn.Module:
    """Instantiate a model from its kind and hyperparameters."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"Unknown model kind: {kind}")
    return MODEL_KINDS[kind](**hparams)


def attach_adapters(model: nn.Module, rank: int, alpha: float, seed: int = 0) -> nn.Module:
    """
    Attach LoRA adapters to every adaptable layer in place and freeze
    everything else. Returns the same model.
    """
    stream = RngStream(seed, stream_key("lora-init"))
    layers = model.adaptable_layers()
    for layer in layers:
        if not 1 <= rank < min(layer.in_features, layer.out_features):
            raise ValueError(
                f"LoRA rank {rank} must satisfy 1 <= r < "
                f"min({layer.in_features}, {layer.out_features})"
            )
    for layer in layers:
        layer.attach_adapter(rank, alpha, stream)
    for name, param in model.named_parameters():
        param.requires_grad_("lora_" in name)
    return model


def adapter_info(model: nn.Module) -> dict | None:
    """Rank/alpha of the attached adapters, or None for a plain model."""
    layers = getattr(model, "adaptable_layers", lambda: [])()
    attached = [layer for layer in layers if layer.has_adapter]
    if not attached:
        return None
    return {"rank": attached[0].rank, "alpha": attached[0].alpha}
