"""Tests for the noise schedule, forward noising, diffusion loss, training and sampling."""

import math

import pytest
import torch

from src import tensor_core as tc
from src.classifier import class_losses, make_mc_plan
from src.data import class_means
from src.diffusion import (
    NoiseSchedule, ancestral_sample, build_schedule, diffusion_loss,
    forward_noise, per_sample_diffusion_loss, train_base,
)
from src.models import DenoiserModel
from src.tensor_core import RngStream, ShapeError
from src.training import TrainConfig

from conftest import OracleDenoiser


class TestSchedule:

    def test_linear_schedule(self):
        """alpha_bar is the cumulative product of 1 - beta and strictly decreasing."""
        sched = build_schedule(100, 1e-4, 0.02)
        assert sched.num_timesteps == 100
        assert float(sched.beta[0]) == pytest.approx(1e-4)
        assert float(sched.beta[-1]) == pytest.approx(0.02)
        assert float(sched.alpha_bar[0]) == pytest.approx(1 - 1e-4)
        assert bool((sched.alpha_bar[1:] < sched.alpha_bar[:-1]).all())
        assert torch.allclose(sched.alpha_bar, torch.cumprod(1 - sched.beta, 0))

    @pytest.mark.parametrize("args", [(1,), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid_schedules(self, args):
        with pytest.raises(ValueError):
            build_schedule(*args)

    def test_single_step_from_betas(self):
        """A one-step schedule is allowed when built from explicit betas."""
        sched = NoiseSchedule.from_betas([0.5])
        assert sched.num_timesteps == 1
        assert float(sched.alpha_bar[0]) == 0.5


class TestForwardNoise:

    def test_formula(self, schedule):
        x0 = tc.tensor([[0.5, -0.5], [0.1, 0.2]])
        eps = tc.tensor([[1.0, 0.0], [-1.0, 2.0]])
        t = torch.tensor([0, 9])
        ab = schedule.alpha_bar[t].unsqueeze(-1)
        expected = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
        assert torch.allclose(forward_noise(x0, t, eps, schedule), expected, atol=0, rtol=1e-15)

    def test_monte_carlo_moments(self, schedule):
        """Noised samples have mean sqrt(alpha_bar) x0 and variance 1 - alpha_bar."""
        n = 100_000
        x0 = tc.tensor([0.6, -0.3])
        x_t = forward_noise(x0.expand(n, -1), 5, RngStream(11).normal((n, 2)), schedule)
        alpha_bar = float(schedule.alpha_bar[5])
        assert torch.allclose(x_t.mean(0), math.sqrt(alpha_bar) * x0, rtol=0,
                              atol=5 * math.sqrt((1 - alpha_bar) / n))
        assert torch.allclose(x_t.var(0), torch.full((2,), 1 - alpha_bar, dtype=tc.DTYPE), rtol=0.03)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(ShapeError):
            forward_noise(tc.tensor([0.0, 1.0]), 0, tc.tensor([0.0]), schedule)

    def test_timestep_out_of_range(self, schedule):
        with pytest.raises(ValueError):
            forward_noise(tc.tensor([0.0]), 10, tc.tensor([0.0]), schedule)


class TestDiffusionLoss:

    def test_fresh_model_predicts_zero_noise(self, schedule):
        """With a zero output layer the loss is the mean squared noise."""
        model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,))
        eps = RngStream(0).normal((5, 4))
        x0 = tc.tensor(torch.zeros(5, 4))
        losses = per_sample_diffusion_loss(model, x0, torch.zeros(5, dtype=torch.long),
                                           torch.arange(5), eps, schedule)
        assert torch.allclose(losses, (eps ** 2).sum(-1) / 4, rtol=1e-15)

    def test_scalar_loss_is_mean(self, random_denoiser, schedule):
        eps = RngStream(1).normal((6, 4))
        x0 = RngStream(2).uniform((6, 4), -1, 1)
        y = torch.tensor([0, 1, 2, 0, 1, 2])
        t = torch.tensor([0, 1, 2, 3, 4, 5])
        per_sample = per_sample_diffusion_loss(random_denoiser, x0, y, t, eps, schedule)
        assert float(diffusion_loss(random_denoiser, x0, y, t, eps, schedule)) == \
            pytest.approx(float(per_sample.mean()), rel=1e-15)

    def test_label_out_of_range(self, random_denoiser, schedule):
        with pytest.raises(ValueError):
            diffusion_loss(random_denoiser, tc.tensor([[0.0] * 4]), torch.tensor([3]),
                           torch.tensor([0]), tc.tensor([[0.0] * 4]), schedule)


class TestTrainBase:

    def test_loss_decreases(self, trained_denoiser):
        _, curve = trained_denoiser
        assert len(curve) == 300
        assert sum(curve[-30:]) / 30 < 0.8 * sum(curve[:30]) / 30

    def test_loss_depends_on_label_after_training(self, trained_denoiser, test_set, schedule):
        """A fresh model scores every label alike; training makes the loss label-dependent."""
        fresh = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(32, 32), seed=0)
        plan = make_mc_plan(schedule, 10, 4, "evenly-spaced", RngStream(0))
        spread = {}
        for name, model in (("fresh", fresh), ("trained", trained_denoiser[0])):
            with torch.no_grad():
                losses = torch.stack([class_losses(model, x, plan, [0, 1, 2]) for x in test_set.samples])
            spread[name] = float((losses.max(dim=1).values - losses.min(dim=1).values).mean())
        assert spread["fresh"] == 0.0
        assert spread["trained"] > 1e-3

    def test_deterministic_per_seed(self, train_set, schedule):
        config = TrainConfig(steps=5, batch_size=8, learning_rate=1e-2, seed=3)
        runs = []
        for _ in range(2):
            model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,), seed=3)
            runs.append(train_base(model, train_set, config, schedule))
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][0].parameters(), runs[1][0].parameters()):
            assert torch.equal(a, b)

    def test_zero_learning_rate_keeps_weights(self, train_set, schedule):
        """A run with learning rate 0 leaves every weight bit-identical."""
        model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,), seed=4)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train_base(model, train_set, TrainConfig(steps=3, batch_size=8, learning_rate=0.0), schedule)
        for name, value in model.state_dict().items():
            assert torch.equal(value, before[name]), name

    def test_rejects_invalid_config(self, train_set, schedule, random_denoiser):
        with pytest.raises(ValueError):
            train_base(random_denoiser, train_set, TrainConfig(batch_size=0), schedule)


class TestAncestralSample:

    def test_shape_and_determinism(self, random_denoiser, schedule):
        a = ancestral_sample(random_denoiser, schedule, 1, 5, RngStream(0, 1))
        b = ancestral_sample(random_denoiser, schedule, 1, 5, RngStream(0, 1))
        assert a.shape == (5, 4)
        assert torch.equal(a, b)

    def test_posterior_variance_from_given_start(self, schedule):
        """Sampling can start from a supplied x_T and use the posterior variance."""
        model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,))
        x_T = RngStream(0).normal((2, 4))
        out = ancestral_sample(model, schedule, 0, 2, RngStream(1), variance="posterior", x_T=x_T)
        assert out.shape == x_T.shape
        assert bool(torch.isfinite(out).all())

    def test_single_step_oracle_recovers_x0(self):
        """With T=1 and the exact noise predictor the chain returns the class mean from any start."""
        sched = NoiseSchedule.from_betas([0.5])
        means = class_means(3, 4, 0.8)
        model = OracleDenoiser(means, sched)
        x_T = RngStream(2).normal((6, 4))
        for y in range(3):
            out = ancestral_sample(model, sched, y, 6, RngStream(0), x_T=x_T)
            assert torch.allclose(out, means[y].expand(6, -1), rtol=0, atol=1e-12)

    @pytest.mark.slow
    def test_samples_land_near_their_class_means(self, trained_denoiser, schedule, blob_spec):
        """The average sample of each label is closest to that label's mean."""
        means = class_means(blob_spec.num_classes, blob_spec.dim, blob_spec.radius)
        for y in range(blob_spec.num_classes):
            samples = ancestral_sample(trained_denoiser[0], schedule, y, 200, RngStream(5, y))
            centre = samples.mean(dim=0, keepdim=True)
            assert int(torch.cdist(centre, means).argmin()) == y

    def test_unknown_variance(self, random_denoiser, schedule):
        with pytest.raises(ValueError):
            ancestral_sample(random_denoiser, schedule, 0, 2, RngStream(0), variance="learned")

