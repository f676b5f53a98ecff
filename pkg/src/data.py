"""
Data Module - Labeled datasets and synthetic blob generation

This module contains:
- LabeledDataset: samples in [-1, 1]^d with integer labels and stable ids
- BlobSpec / make_blobs: Gaussian class blobs around maximally separated means
- CSV persistence (sample_id,label,f0..f{d-1}, 17 significant digits)
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy import linalg
from scipy import stats as scipy_stats
from pydantic import with_config

from config import CSV_FLOAT_FORMAT, DATA_LOWER, DATA_UPPER, STRICT_DOCUMENT
from src import tensor_core as tc
from src.tensor_core import RngStream, Tensor, stream_key

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class LabeledDataset:
    """
    N samples of dimension d, each coordinate within [lower, upper], with
    labels in [0, num_classes) and a sample id per row. Sample ids key the
    per-sample random streams, so copies of a row share its noise.
    """

    samples: Tensor
    labels: Tensor
    num_classes: int
    split: str = "train"
    sample_ids: Optional[Tensor] = None
    lower: float = DATA_LOWER
    upper: float = DATA_UPPER

    def __post_init__(self):
        self.samples = tc.tensor(self.samples)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long).clone()
        if self.sample_ids is None:
            self.sample_ids = torch.arange(len(self.labels), dtype=torch.long)
        else:
            self.sample_ids = torch.as_tensor(self.sample_ids, dtype=torch.long).clone()
        self.validate()

    def validate(self) -> None:
        n = self.samples.shape[0]
        if self.samples.dim() != 2 or n == 0:
            raise ValueError(f"samples must be a nonempty (N, d) array, got {tuple(self.samples.shape)}")
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise ValueError("labels and sample_ids must have one entry per sample")
        if int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if float(self.samples.min()) < self.lower or float(self.samples.max()) > self.upper:
            raise ValueError(f"sample coordinates must lie in [{self.lower}, {self.upper}]")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        index = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledDataset(
            self.samples[index], self.labels[index], self.num_classes,
            split=self.split, sample_ids=self.sample_ids[index],
            lower=self.lower, upper=self.upper,
        )

    def with_samples(self, samples: Tensor, split: Optional[str] = None) -> "LabeledDataset":
        """Same labels and ids, replaced samples (e.g. perturbed copies)."""
        return LabeledDataset(
            samples, self.labels, self.num_classes,
            split=split or self.split, sample_ids=self.sample_ids,
            lower=self.lower, upper=self.upper,
        )

    def to_frame(self) -> pd.DataFrame:
        features = pd.DataFrame(
            self.samples.numpy(), columns=[f"f{i}" for i in range(self.dim)]
        )
        features.insert(0, "label", self.labels.numpy())
        features.insert(0, "sample_id", self.sample_ids.numpy())
        return features

    def save_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"  Saved {self.split} set: {path.name} ({len(self):,} samples)")
        return path

    @classmethod
    def load_csv(cls, path: Path, num_classes: int, split: Optional[str] = None) -> "LabeledDataset":
        df = pd.read_csv(path, float_precision="round_trip")
        feature_cols = [c for c in df.columns if c.startswith("f")]
        return cls(
            samples=df[feature_cols].to_numpy(dtype=np.float64),
            labels=df["label"].to_numpy(),
            num_classes=num_classes,
            split=split or Path(path).stem,
            sample_ids=df["sample_id"].to_numpy(),
        )


@with_config(STRICT_DOCUMENT)
@dataclass(frozen=True)
class BlobSpec:
    """Synthetic Gaussian blobs; defaults give 2 000 train / 512 test samples."""

    kind: str = "blobs"
    num_classes: int = 4
    dim: int = 16
    train_per_class: int = 500
    val_per_class: int = 64
    test_per_class: int = 128
    radius: float = 0.8
    sigma: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.kind != "blobs":
            raise ValueError(f"Unknown dataset kind: {self.kind}")
        if self.num_classes < 2 or self.dim < 2:
            raise ValueError("blobs need num_classes >= 2 and dim >= 2")
        if self.num_classes > self.dim + 1:
            raise ValueError(
                f"{self.num_classes} maximally separated means do not fit in {self.dim} dimensions"
            )
        if self.sigma <= 0 or self.radius <= 0:
            raise ValueError("sigma and radius must be positive")
        if min(self.train_per_class, self.test_per_class) < 1 or self.val_per_class < 0:
            raise ValueError("per-class counts must be positive")

    def per_class(self, split: str) -> int:
        return {"train": self.train_per_class,
                "val": self.val_per_class,
                "test": self.test_per_class}[split]


def class_means(num_classes: int, dim: int, radius: float) -> Tensor:
    """
    Vertices of a regular simplex centred at the origin, scaled to `radius`:
    the configuration with maximal pairwise angular separation.
    """
    vertices = np.eye(num_classes) - 1.0 / num_classes
    if num_classes <= dim:
        coords = np.zeros((num_classes, dim))
        coords[:, :num_classes] = vertices
    else:
        # C = d + 1: express the vertices in a basis of their (C-1)-dim span
        coords = vertices @ linalg.orth(vertices.T)
    coords = coords / np.linalg.norm(coords, axis=1, keepdims=True) * radius
    return tc.tensor(coords)


def make_blobs(spec: BlobSpec, split: str = "train") -> LabeledDataset:
    """Gaussian samples around the class means, clipped to the data range."""
    spec.validate()
    means = class_means(spec.num_classes, spec.dim, spec.radius)
    n_per_class = spec.per_class(split)
    stream = RngStream(spec.seed, stream_key("blobs", split))

    labels = torch.arange(spec.num_classes).repeat_interleave(n_per_class)
    noise = stream.normal((len(labels), spec.dim))
    samples = tc.clip(means[labels] + spec.sigma * noise, DATA_LOWER, DATA_UPPER)

    offset = {"train": 0, "val": 1_000_000, "test": 2_000_000}[split]
    sample_ids = torch.arange(len(labels), dtype=torch.long) + offset
    return LabeledDataset(samples, labels, spec.num_classes, split=split, sample_ids=sample_ids)


def nearest_mean_accuracy(dataset: LabeledDataset, means: Tensor) -> float:
    """Accuracy of the nearest-class-mean rule (sanity check for blob specs)."""
    distances = torch.cdist(dataset.samples, means)
    return float((distances.argmin(dim=1) == dataset.labels).to(torch.float64).mean())


def pairwise_error_bound(spec: BlobSpec) -> float:
    """
    Union bound on the nearest-mean error rate: each wrong class contributes
    the Gaussian tail beyond half the inter-mean distance.
    """
    gap = spec.radius * np.sqrt(2.0 * spec.num_classes / (spec.num_classes - 1))
    tail = scipy_stats.norm.sf(gap / 2.0 / spec.sigma)
    return float((spec.num_classes - 1) * tail)
