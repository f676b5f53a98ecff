"""Tests for the discriminative baselines."""

import pytest
import torch

from src.attacks import AttackConfig, pgd, surrogate_loss_grad
from src.baseline import accuracy, adversarial_train, predict, train_discriminative
from src.models import DiscriminativeModel
from src.training import TrainConfig


def test_clean_training_fits_blobs(trained_baseline, train_set):
    model, curves = trained_baseline
    assert curves["train_accuracy"] >= 0.9
    assert "test_accuracy" in curves
    assert len(curves["loss"]) == 200
    assert accuracy(model, train_set) == curves["train_accuracy"]


def test_predict_returns_distribution(trained_baseline, test_set):
    model, _ = trained_baseline
    labels, probs = predict(model, test_set.samples)
    assert probs.shape == (len(test_set), 3)
    assert torch.allclose(probs.sum(-1), torch.ones(len(test_set), dtype=torch.float64))
    assert torch.equal(labels, probs.argmax(-1))

    label, single = predict(model, test_set.samples[0])
    assert single.shape == (3,)
    assert int(label) == int(labels[0])


def test_training_is_deterministic(train_set):
    config = TrainConfig(steps=5, batch_size=8, learning_rate=1e-2, seed=4)
    a, curves_a = train_discriminative(train_set, config, hidden_dims=(8,))
    b, curves_b = train_discriminative(train_set, config, hidden_dims=(8,))
    assert curves_a["loss"] == curves_b["loss"]
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_zero_learning_rate_keeps_weights(train_set):
    config = TrainConfig(steps=3, batch_size=8, learning_rate=0.0, seed=1)
    model, _ = train_discriminative(train_set, config, hidden_dims=(8,))
    fresh = DiscriminativeModel(4, 3, (8,), seed=1)
    for name, value in fresh.state_dict().items():
        assert torch.equal(model.state_dict()[name], value), name


class TestAdversarialTraining:

    def test_runs_with_pgd(self, train_set, test_set):
        attack = AttackConfig(kind="pgd", epsilon=0.05, iters=2)
        config = TrainConfig(steps=3, batch_size=8, learning_rate=1e-2)
        model, curves = adversarial_train(train_set, attack, config, hidden_dims=(8,), test_set=test_set)
        assert len(curves["loss"]) == 3
        assert 0.0 <= curves["test_accuracy"] <= 1.0
        assert isinstance(model, DiscriminativeModel)

    def test_more_robust_than_clean_training(self, trained_baseline, train_set, test_set):
        """Under white-box PGD the adversarially trained MLP keeps more accuracy and lower loss."""
        config = TrainConfig(steps=200, batch_size=32, learning_rate=1e-2, seed=0, log_every=100)
        robust_model, _ = adversarial_train(train_set, AttackConfig(kind="pgd", epsilon=0.35, iters=5),
                                            config, hidden_dims=(16,))
        attack = AttackConfig(kind="pgd", epsilon=0.35, iters=20, seed=1)
        scores = {}
        for name, model in (("clean", trained_baseline[0]), ("adversarial", robust_model)):
            loss_grad = surrogate_loss_grad(model)
            x_adv = pgd(loss_grad, test_set.samples, test_set.labels, attack, sample_ids=test_set.sample_ids)
            losses, _ = loss_grad(x_adv, test_set.labels)
            scores[name] = (accuracy(model, test_set.with_samples(x_adv)), float(losses.mean()))
        assert scores["adversarial"][0] >= scores["clean"][0]
        assert scores["adversarial"][1] < scores["clean"][1]

    def test_rejects_fgsm(self, train_set):
        with pytest.raises(ValueError, match="pgd"):
            adversarial_train(train_set, AttackConfig(kind="fgsm"), TrainConfig(steps=1))

    def test_rejects_invalid_attack(self, train_set):
        with pytest.raises(ValueError):
            adversarial_train(train_set, AttackConfig(epsilon=-0.1), TrainConfig(steps=1))
