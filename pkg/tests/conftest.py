"""
Shared fixtures: tiny schedules, tiny blob datasets and session-scoped
trained models, plus the --runslow switch for reference-scale tests.
"""

import pytest
import torch
import torch.nn as nn

from src.baseline import train_discriminative
from src.data import BlobSpec, class_means, make_blobs
from src.diffusion import build_schedule, train_base
from src.models import DenoiserModel
from src.tensor_core import RngStream, stream_key
from src.training import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale reference tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# Data
# =============================================================================

@pytest.fixture(scope="session")
def schedule():
    """Ten-step linear schedule."""
    return build_schedule(10)


@pytest.fixture(scope="session")
def blob_spec():
    """Three well-separated classes in four dimensions."""
    return BlobSpec(num_classes=3, dim=4, train_per_class=16, val_per_class=4,
                    test_per_class=6, radius=0.8, sigma=0.1, seed=1)


@pytest.fixture(scope="session")
def train_set(blob_spec):
    return make_blobs(blob_spec, "train")


@pytest.fixture(scope="session")
def test_set(blob_spec):
    return make_blobs(blob_spec, "test")


# =============================================================================
# Models
# =============================================================================

def make_denoiser(seed: int = 0, num_timesteps: int = 10) -> DenoiserModel:
    """Tiny denoiser whose output layer is randomized (a fresh one predicts zero)."""
    model = DenoiserModel(4, 3, num_timesteps, time_dim=8, class_dim=4, hidden_dims=(16,), seed=seed)
    stream = RngStream(seed, stream_key("test-output-layer"))
    with torch.no_grad():
        model.output.weight.copy_(0.3 * stream.normal(tuple(model.output.weight.shape)))
        model.class_embedding.copy_(stream.normal(tuple(model.class_embedding.shape)))
    return model


@pytest.fixture
def random_denoiser():
    return make_denoiser()


@pytest.fixture(scope="session")
def trained_denoiser(train_set, schedule):
    """Denoiser trained for a few hundred steps on the tiny blobs."""
    model = DenoiserModel(4, 3, schedule.num_timesteps, time_dim=8, class_dim=4,
                          hidden_dims=(32, 32), seed=0)
    config = TrainConfig(steps=300, batch_size=32, learning_rate=3e-3, seed=0, log_every=100)
    model, curve = train_base(model, train_set, config, schedule)
    return model, curve


@pytest.fixture(scope="session")
def trained_baseline(train_set, test_set):
    """Clean-trained MLP surrogate."""
    config = TrainConfig(steps=200, batch_size=32, learning_rate=1e-2, seed=0, log_every=100)
    return train_discriminative(train_set, config, hidden_dims=(16,), test_set=test_set)


class OracleDenoiser(nn.Module):
    """
    Exact noise predictor for data sitting on the class means: inverts the
    forward noising under the assumption x0 = means[y].
    """

    def __init__(self, means: torch.Tensor, sched):
        super().__init__()
        self.means = means
        self.sched = sched
        self.num_classes, self.input_dim = means.shape
        self.num_timesteps = sched.num_timesteps

    def forward(self, x_t, t, y):
        batch = x_t.shape[0]
        alpha_bar = self.sched.alpha_bar[torch.as_tensor(t, dtype=torch.long).expand(batch)].unsqueeze(-1)
        mean = self.means[torch.as_tensor(y, dtype=torch.long).expand(batch)]
        return (x_t - alpha_bar.sqrt() * mean) / (1.0 - alpha_bar).sqrt()


@pytest.fixture(scope="session")
def oracle(blob_spec, schedule):
    return OracleDenoiser(class_means(blob_spec.num_classes, blob_spec.dim, blob_spec.radius), schedule)
