"""Evaluation: negative test ELBO and Frechet distance on classifier features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .distributions import sample_noise
from .errors import FormatError, NumericError, TrainingError
from .networks import VAE, _decode_tensors, _encode_tensors, param_digest
from .objective import per_sample_neg_elbo

EIG_CLAMP_REL = 1e-6


def _as_tensor(data, dtype: torch.dtype) -> torch.Tensor:
    images = getattr(data, "images", data)
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    return images.to(dtype)


def neg_elbo_per_image(
    model: VAE, testset, n_mc: int = 1, seed: int = 0, tau: float = 0.5, batch_size: int = 1024
) -> torch.Tensor:
    """Per-image negative ELBO averaged over ``n_mc`` single-sample draws."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x = _as_tensor(testset, model.dtype)
    if len(x) == 0:
        raise ValueError("empty test set")
    gen = torch.Generator().manual_seed(seed)
    out = torch.zeros(len(x), dtype=torch.float64)
    with torch.no_grad():
        for _ in range(n_mc):
            for start in range(0, len(x), batch_size):
                xb = x[start : start + batch_size]
                noise = sample_noise(len(xb), model.arch.C, model.arch.J, gen, model.dtype)
                out[start : start + batch_size] += per_sample_neg_elbo(xb, model, noise, tau)
    return out / n_mc


def negative_test_elbo(model: VAE, testset, n_mc: int = 1, seed: int = 0, tau: float = 0.5) -> float:
    """Mean negative ELBO in nats per image; deterministic in ``seed``."""
    return float(neg_elbo_per_image(model, testset, n_mc, seed, tau).mean())


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def feature_stats(samples, extractor: Callable | None = None) -> FeatureStats:
    """Mean and unbiased covariance of ``extractor(samples)`` (raw pixels if None)."""
    feats = samples if extractor is None else extractor(samples)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("feature statistics need at least two samples")
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = centred.T @ centred / (len(feats) - 1)
    return FeatureStats(mean, 0.5 * (cov + cov.T), len(feats))


def trace_sqrt_product(c1: np.ndarray, c2: np.ndarray) -> float:
    """Tr((c1 c2)^{1/2}) from the eigenvalues of c1 c2.

    For PSD inputs the eigenvalues are real and nonnegative; small negative
    values from round-off are clamped to zero.
    """
    eig = np.linalg.eigvals(np.asarray(c1, dtype=np.float64) @ np.asarray(c2, dtype=np.float64))
    eig = eig.real
    scale = max(float(eig.max(initial=0.0)), 0.0)
    floor = -EIG_CLAMP_REL * scale
    if eig.min(initial=0.0) < min(floor, -1e-12):
        raise NumericError(f"covariance product has a strongly negative eigenvalue {eig.min():.3g}")
    return float(np.sqrt(np.clip(eig, 0.0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(value, 0.0)


def log_frechet(value: float) -> float:
    return math.log(value) if value > 0 else float("-inf")


# -- feature extractor -------------------------------------------------------

class FeatureClassifier(nn.Module):
    """784 -> 256 -> 64 -> 10 ELU classifier; the 64-d layer provides features."""

    def __init__(self, input_dim: int = 784, hidden: int = 256, feature_dim: int = 64, n_classes: int = 10):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(input_dim, hidden), nn.ELU(),
            nn.Linear(hidden, feature_dim), nn.ELU(),
        )
        self.head = nn.Linear(feature_dim, n_classes)
        self.accuracy = float("nan")

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    @property
    def version_hash(self) -> str:
        return param_digest(self)

    def forward(self, x):
        return self.head(self.body(x))

    def features(self, x) -> np.ndarray:
        x = _as_tensor(x, self.head.weight.dtype)
        with torch.no_grad():
            return self.body(x).to(torch.float64).numpy()

    def save(self, path: str | Path) -> None:
        meta = {"kind": "extractor", "accuracy": self.accuracy, "hash": self.version_hash,
                "shape": [self.body[0].in_features, self.body[0].out_features, self.feature_dim,
                          self.head.out_features]}
        Path(path).write_bytes(_encode_tensors(self.state_dict(), meta))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureClassifier":
        meta, tensors = _decode_tensors(Path(path).read_bytes())
        if meta.get("kind") != "extractor":
            raise FormatError(f"checkpoint holds {meta.get('kind')!r}, not a feature extractor")
        model = cls(*meta["shape"])
        model.load_state_dict(tensors)
        model.accuracy = meta["accuracy"]
        if model.version_hash != meta["hash"]:
            raise FormatError("extractor parameters do not match the stored hash")
        return model.eval()


def train_feature_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
    min_accuracy: float = 0.90,
    max_epochs: int = 40,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> FeatureClassifier:
    """Train the feature classifier on a labelled corpus.

    10% of the corpus is held out for choosing the best epoch. Accuracy is
    reported on ``heldout`` when given, otherwise on that internal split.
    Raises ``TrainingError`` when it stays below ``min_accuracy``.
    """
    torch_gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    perm = torch.randperm(len(x), generator=torch_gen)
    n_sel = max(1, len(x) // 10)
    sx, sy = x[perm[:n_sel]], y[perm[:n_sel]]
    x, y = x[perm[n_sel:]], y[perm[n_sel:]]
    if heldout is None:
        hx, hy = sx, sy
    else:
        hx = torch.as_tensor(np.asarray(heldout[0]), dtype=torch.float32)
        hy = torch.as_tensor(np.asarray(heldout[1]), dtype=torch.long)

    model = FeatureClassifier(x.shape[1], n_classes=int(max(y.max(), hy.max())) + 1)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight, generator=torch_gen)
                nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()

    def accuracy(ax, ay) -> float:
        with torch.no_grad():
            return float((model(ax).argmax(1) == ay).double().mean())

    best, best_state = -1.0, None
    for _ in range(max_epochs):
        order = torch.randperm(len(x), generator=torch_gen)
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss_fn(model(x[idx]), y[idx]).backward()
            opt.step()
        acc = accuracy(sx, sy)
        if acc > best:
            best, best_state = acc, {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.accuracy = accuracy(hx, hy)
    if model.accuracy < min_accuracy:
        raise TrainingError(
            f"feature classifier reached only {model.accuracy:.3f} held-out accuracy (< {min_accuracy})"
        )
    return model.eval()
