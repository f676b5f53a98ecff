"""Tests for Monte Carlo plans, the label posterior and staged classification."""

import json

import numpy as np
import pandas as pd
import pytest
import torch

from src import tensor_core as tc
from src.classifier import (
    EvalConfig, MCPlan, StagePlan, class_losses, classify, classify_staged,
    evaluate, make_mc_plan, mc_stream, posterior_from_losses,
)
from src.data import LabeledDataset
from src.models import DenoiserModel
from src.tensor_core import RngStream, ShapeError


# =============================================================================
# Posterior
# =============================================================================

class TestPosterior:

    def test_normalized_and_shift_invariant(self):
        """1000 random loss vectors: sums to one, invariant to constant shifts."""
        stream = RngStream(0, 5)
        for _ in range(1000):
            losses = stream.uniform(5, 0.0, 10.0)
            shift = float(stream.uniform(1, -50.0, 50.0)[0])
            p = posterior_from_losses(losses)
            assert abs(float(p.sum()) - 1.0) < 1e-9
            assert float((posterior_from_losses(losses + shift) - p).abs().max()) < 1e-12
            assert int(p.argmax()) == int(losses.argmin())

    def test_large_losses_do_not_underflow(self):
        p = posterior_from_losses(tc.tensor([1e4, 1e4 + 1.0]))
        assert float(p.sum()) == pytest.approx(1.0)
        assert float(p[0]) > float(p[1])

    @pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            posterior_from_losses(tc.tensor([0.5, bad]))


# =============================================================================
# Plans and losses
# =============================================================================

class TestMCPlan:

    def test_evenly_spaced_timesteps(self, schedule):
        plan = make_mc_plan(schedule, 5, 4, "evenly-spaced", RngStream(0))
        assert plan.timesteps.tolist() == [1, 3, 5, 7, 9]
        assert plan.noise.shape == (5, 4)

    def test_uniform_random_in_range(self, schedule):
        plan = make_mc_plan(schedule, 200, 4, "uniform-random", RngStream(1))
        assert 0 <= int(plan.timesteps.min()) and int(plan.timesteps.max()) < 10

    def test_same_stream_same_plan(self, schedule):
        a = make_mc_plan(schedule, 6, 4, "uniform-random", mc_stream(3, 17))
        b = make_mc_plan(schedule, 6, 4, "uniform-random", mc_stream(3, 17))
        assert torch.equal(a.timesteps, b.timesteps) and torch.equal(a.noise, b.noise)

    @pytest.mark.parametrize("k,strategy", [(0, "evenly-spaced"), (4, "log-spaced")])
    def test_invalid_plans(self, schedule, k, strategy):
        with pytest.raises(ValueError):
            make_mc_plan(schedule, k, 4, strategy, RngStream(0))

    def test_losses_decompose_over_pairs(self, random_denoiser, schedule):
        """The full-plan loss is the mean of the two half-plan losses."""
        plan = make_mc_plan(schedule, 10, 4, "uniform-random", RngStream(2))
        x = RngStream(3).uniform(4, -1, 1)
        full = class_losses(random_denoiser, x, plan, [0, 1, 2])
        halves = (class_losses(random_denoiser, x, plan.subset(range(5)), [0, 1, 2])
                  + class_losses(random_denoiser, x, plan.subset(range(5, 10)), [0, 1, 2])) / 2
        assert float((full - halves).abs().max()) < 1e-12

    def test_label_and_shape_errors(self, random_denoiser, schedule):
        plan = make_mc_plan(schedule, 3, 4, "evenly-spaced", RngStream(0))
        with pytest.raises(ValueError):
            class_losses(random_denoiser, tc.tensor([0.0] * 4), plan, [])
        with pytest.raises(ValueError):
            class_losses(random_denoiser, tc.tensor([0.0] * 4), plan, [3])
        with pytest.raises(ShapeError):
            class_losses(random_denoiser, tc.tensor([0.0] * 3), plan, [0])


# =============================================================================
# Classification
# =============================================================================

class TestClassify:

    def test_untrained_model_ties_to_label_zero(self, schedule):
        """A fresh model gives every label the same loss; ties go to the smallest label."""
        model = DenoiserModel(4, 3, 10, time_dim=8, class_dim=4, hidden_dims=(16,))
        plan = make_mc_plan(schedule, 4, 4, "evenly-spaced", RngStream(0))
        label, row = classify(model, tc.tensor([0.2, -0.1, 0.3, 0.0]), plan)
        assert label == 0
        assert row.losses[0] == row.losses[1] == row.losses[2]
        assert row.posterior == pytest.approx([1 / 3] * 3)

    def test_single_stage_matches_flat(self, random_denoiser, schedule):
        """One stage keeping one label is bit-identical to classify."""
        x = RngStream(4).uniform(4, -1, 1)
        plan = make_mc_plan(schedule, 8, 4, "evenly-spaced", mc_stream(0, 5))
        flat_label, flat = classify(random_denoiser, x, plan)
        staged_label, staged = classify_staged(random_denoiser, x, StagePlan(((8, 1),)),
                                               mc_stream(0, 5), schedule)
        assert staged_label == flat_label
        assert staged.losses == flat.losses
        assert staged.posterior == flat.posterior

    def test_keep_all_stage_pools_pairs(self, random_denoiser, schedule):
        """Keeping every label after stage one equals classify on the concatenated plan."""
        x = RngStream(6).uniform(4, -1, 1)
        stream = RngStream(0, 42)
        first = make_mc_plan(schedule, 10, 4, "evenly-spaced", stream)
        second = make_mc_plan(schedule, 40, 4, "evenly-spaced", stream)
        joined = MCPlan(torch.cat([first.timesteps, second.timesteps]),
                        torch.cat([first.noise, second.noise]), schedule)
        flat_label, flat = classify(random_denoiser, x, joined)
        staged_label, staged = classify_staged(random_denoiser, x, StagePlan(((10, 3), (40, 1))),
                                               RngStream(0, 42), schedule)
        assert staged_label == flat_label
        assert staged.losses == pytest.approx(flat.losses, rel=1e-12)

    def test_staged_marks_eliminated_labels(self, random_denoiser, schedule):
        _, row = classify_staged(random_denoiser, RngStream(7).uniform(4, -1, 1),
                                 StagePlan(((4, 2), (6, 1))), RngStream(1), schedule)
        assert row.losses.count(None) == 1
        dropped = row.losses.index(None)
        assert row.eliminated_at[dropped] == 0
        assert row.predicted_label != dropped

    @pytest.mark.parametrize("stages", [
        (),
        ((4, 2),),
        ((4, 2), (4, 2), (4, 1)),
        ((4, 4), (4, 1)),
        ((0, 2), (4, 1)),
    ])
    def test_stage_plan_validation(self, stages):
        with pytest.raises(ValueError):
            StagePlan(stages).validate(3)

    def test_halving_plan(self):
        assert StagePlan.halving(4).stages == ((10, 2), (100, 1))
        assert StagePlan.halving(2).stages == ((110, 1),)
        StagePlan.halving(3).validate(3)


# =============================================================================
# Evaluation
# =============================================================================

class TestEvaluate:

    def test_workers_do_not_change_results(self, random_denoiser, test_set, schedule):
        serial = evaluate(random_denoiser, test_set, EvalConfig(num_pairs=6, seed=1), schedule)
        threaded = evaluate(random_denoiser, test_set, EvalConfig(num_pairs=6, seed=1, workers=3), schedule)
        pd.testing.assert_frame_equal(serial.to_frame(), threaded.to_frame())

    def test_duplicate_ids_share_noise(self, random_denoiser, schedule):
        x = tc.tensor([[0.1, 0.2, -0.3, 0.4]] * 2)
        data = LabeledDataset(x, [1, 1], num_classes=3, sample_ids=[7, 7])
        report = evaluate(random_denoiser, data, EvalConfig(num_pairs=5), schedule)
        assert report.rows[0].losses == report.rows[1].losses

    def test_eliminated_labels_are_nan(self, random_denoiser, test_set, schedule):
        config = EvalConfig(stages=((4, 2), (6, 1)))
        frame = evaluate(random_denoiser, test_set, config, schedule).to_frame()
        loss_cols = [f"loss_{c}" for c in range(3)]
        assert (frame[loss_cols].isna().sum(axis=1) == 1).all()
        assert list(frame.columns[:3]) == ["sample_id", "true_label", "predicted_label"]

    def test_save_and_subset_summary(self, random_denoiser, test_set, schedule, tmp_path):
        config = EvalConfig(num_pairs=4, subset_size=5, subset_seeds=(0, 1, 2))
        report = evaluate(random_denoiser, test_set, config, schedule)
        summary = report.save(tmp_path / "eval.csv", run_id="abc")

        written = json.loads((tmp_path / "eval.json").read_text())
        assert written["run_id"] == "abc"
        assert written["num_samples"] == len(test_set)
        assert set(summary["subset_accuracy"]["per_seed"]) == {"0", "1", "2"}
        frame = pd.read_csv(tmp_path / "eval.csv")
        assert np.array_equal(frame["predicted_label"].to_numpy(), report.predictions())

    def test_invalid_config(self, random_denoiser, test_set, schedule):
        with pytest.raises(ValueError):
            evaluate(random_denoiser, test_set, EvalConfig(num_pairs=0), schedule)
        with pytest.raises(ValueError):
            evaluate(random_denoiser, test_set, EvalConfig(stages=((4, 5), (4, 1))), schedule)


# =============================================================================
# Exact noise predictor
# =============================================================================

class TestOracle:

    def test_true_label_loss_is_zero(self, oracle, schedule):
        """At a class mean the exact predictor has zero loss for that label only."""
        plan = make_mc_plan(schedule, 10, 4, "evenly-spaced", RngStream(0))
        for y in range(3):
            losses = class_losses(oracle, oracle.means[y], plan, [0, 1, 2])
            assert float(losses[y]) < 1e-20
            assert all(float(losses[j]) > 1e-3 for j in range(3) if j != y)
            label, _ = classify(oracle, oracle.means[y], plan)
            assert label == y

    @pytest.mark.parametrize("config", [
        EvalConfig(num_pairs=8),
        EvalConfig(num_pairs=8, strategy="uniform-random"),
        EvalConfig(stages=((4, 2), (6, 1))),
    ])
    def test_evaluate_is_exact(self, oracle, schedule, config):
        """Samples close to their means are all classified correctly."""
        labels = torch.arange(3).repeat_interleave(5)
        samples = oracle.means[labels] + 0.01 * RngStream(3).normal((15, 4))
        dataset = LabeledDataset(samples, labels, num_classes=3, split="test")
        report = evaluate(oracle, dataset, config, schedule)
        assert report.accuracy == 1.0
        assert report.per_class_accuracy() == [1.0, 1.0, 1.0]
