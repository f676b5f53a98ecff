"""Tests for the model layers and LoRA adapters."""

import copy

import pytest
import torch

from src.models import (
    AdaptableLinear, DenoiserModel, LoraStateError, SinusoidalTimeEmbedding,
    attach_adapters, build_model,
)
from src.tensor_core import RngStream
from src.tm_trainer import attach_lora, merge_lora


def _inputs(n: int = 100, seed: int = 0):
    stream = RngStream(seed, 11)
    return (stream.uniform((n, 4), -1, 1), stream.integers(0, 10, n), stream.integers(0, 3, n))


class TestDenoiserModel:

    def test_fresh_model_predicts_zero(self):
        model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,))
        x, t, y = _inputs(5)
        assert torch.equal(model(x, t, y), torch.zeros(5, 4, dtype=torch.float64))

    def test_single_sample_shape(self, random_denoiser):
        assert random_denoiser(torch.zeros(4, dtype=torch.float64), 3, 1).shape == (4,)

    @pytest.mark.parametrize("t,y", [(10, 0), (-1, 0), (0, 3)])
    def test_range_checks(self, random_denoiser, t, y):
        with pytest.raises(ValueError):
            random_denoiser(torch.zeros(1, 4, dtype=torch.float64), t, y)

    def test_time_embedding_needs_even_dim(self):
        with pytest.raises(ValueError):
            SinusoidalTimeEmbedding(7)

    def test_build_model_by_kind(self, random_denoiser):
        rebuilt = build_model("denoiser", random_denoiser.hparams())
        assert rebuilt.hparams() == random_denoiser.hparams()
        with pytest.raises(ValueError):
            build_model("unet", {})


class TestLora:

    def test_zero_b_reproduces_base_exactly(self, random_denoiser):
        """Freshly attached adapters (B = 0) leave outputs bit-identical."""
        adapted = attach_lora(random_denoiser, rank=2, alpha=4.0, seed=3)
        x, t, y = _inputs()
        assert torch.equal(adapted(x, t, y), random_denoiser(x, t, y))

    def test_attach_freezes_base_and_copies(self, random_denoiser):
        adapted = attach_lora(random_denoiser, rank=2, alpha=4.0)
        trainable = {name for name, p in adapted.named_parameters() if p.requires_grad}
        assert trainable and all("lora_" in name for name in trainable)
        assert all(p.requires_grad for p in random_denoiser.parameters())
        assert random_denoiser.output.lora_A is None

    def test_adapter_init(self, random_denoiser):
        adapted = attach_lora(random_denoiser, rank=2, alpha=4.0)
        layer = adapted.output
        assert layer.lora_A.shape == (4, 2)
        assert layer.lora_B.shape == (2, 16)
        assert torch.equal(layer.lora_B, torch.zeros_like(layer.lora_B))
        assert 0.005 < float(layer.lora_A.std()) < 0.05

    def test_merge_matches_adapter_form(self, random_denoiser):
        """Merged weights reproduce the adapter-form outputs within 1e-9."""
        adapted = attach_lora(random_denoiser, rank=2, alpha=4.0)
        stream = RngStream(7)
        with torch.no_grad():
            for layer in adapted.adaptable_layers():
                layer.lora_B.copy_(0.1 * stream.normal(tuple(layer.lora_B.shape)))
        x, t, y = _inputs()
        expected = adapted(x, t, y)
        merged = merge_lora(copy.deepcopy(adapted))
        assert all(not layer.has_adapter for layer in merged.adaptable_layers())
        assert all(p.requires_grad for p in merged.parameters())
        assert float((merged(x, t, y) - expected).abs().max()) < 1e-9
        assert not torch.allclose(expected, random_denoiser(x, t, y))

    def test_attach_twice(self, random_denoiser):
        adapted = attach_lora(random_denoiser, rank=2, alpha=4.0)
        with pytest.raises(LoraStateError):
            attach_adapters(adapted, 2, 4.0)

    def test_merge_without_adapters(self, random_denoiser):
        with pytest.raises(LoraStateError):
            merge_lora(random_denoiser)

    def test_rank_bounds(self, random_denoiser):
        """Rank must stay below the smaller side of every layer."""
        with pytest.raises(ValueError):
            attach_lora(random_denoiser, rank=4, alpha=8.0)
        layer = AdaptableLinear(3, 5, RngStream(0))
        with pytest.raises(ValueError):
            layer.attach_adapter(0, 1.0, RngStream(0))


class TestInitialization:

    def test_global_generator_untouched(self):
        torch.manual_seed(123)
        before = torch.get_rng_state()
        DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16, 16), seed=5)
        AdaptableLinear(8, 6, RngStream(1))
        assert torch.equal(torch.get_rng_state(), before)

    def test_xavier_scale(self):
        layer = AdaptableLinear(400, 400, RngStream(2))
        expected = (2.0 / 800) ** 0.5
        assert abs(float(layer.weight.mean())) < 1e-3
        assert abs(float(layer.weight.std()) / expected - 1.0) < 0.05

    def test_same_seed_same_weights(self):
        a = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,), seed=9)
        b = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,), seed=9)
        c = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,), seed=10)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        assert not torch.equal(a.hidden[0].weight, c.hidden[0].weight)
