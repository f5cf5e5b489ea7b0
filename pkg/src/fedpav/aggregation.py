"""Server-side combination of client updates.

Two weighting schemes over flat parameter vectors (training-set size and
cosine-distance weighting), plus the optional refinement step that fine-tunes
the aggregated backbone against averaged client soft labels on a shared
unlabeled set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import extract_features


def size_weights(sizes) -> np.ndarray:
    """Normalized training-set sizes; the FedAvg-style default."""
    arr = np.asarray(sizes, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("sizes must be a non-empty 1-d sequence")
    if (arr <= 0).any():
        raise ValueError("sizes must be positive")
    return arr / arr.sum()


def cdw_weights(distances) -> np.ndarray:
    """Normalize per-client cosine distances onto the simplex.

    Clients whose local training moved their outputs further (larger mean
    cosine distance between pre- and post-training logits) get more weight.
    All-zero distances fall back to uniform weights.
    """
    arr = np.asarray(distances, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("distances must be a non-empty 1-d sequence")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise ValueError("distances must be finite and >= 0")
    total = arr.sum()
    if total == 0.0:
        return np.full(arr.size, 1.0 / arr.size)
    return arr / total


def cdw_weights_literal(distances) -> np.ndarray:
    """Coefficients m_k / sum_j(1/m_j), kept for comparison.

    This is the update written out in the original procedure; it does not
    normalize to 1, so the aggregate is not a convex combination.  Requires
    strictly positive distances.
    """
    arr = np.asarray(distances, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("distances must be a non-empty 1-d sequence")
    if not np.isfinite(arr).all() or (arr <= 0).any():
        raise ValueError("literal weighting needs strictly positive distances")
    return arr / (1.0 / arr).sum()


def aggregate_arrays(arrays, weights) -> np.ndarray:
    """Weighted sum of equal-length flat vectors."""
    weights = np.asarray(weights, dtype=np.float64)
    stack = np.stack([np.asarray(a, dtype=np.float64) for a in arrays])
    if stack.ndim != 2:
        raise ValueError("arrays must all be 1-d")
    if weights.shape != (stack.shape[0],):
        raise ValueError(
            f"got {stack.shape[0]} arrays but {weights.shape} weights"
        )
    if not np.isfinite(weights).all():
        raise ValueError("weights must be finite")
    return weights @ stack


def average_soft_labels(mats) -> np.ndarray:
    """Plain 1/K mean of the clients' soft-label matrices."""
    mats = list(mats)
    if not mats:
        raise ValueError("need at least one soft-label matrix")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape:
            raise ValueError("soft-label matrices must share a shape")
    total = np.zeros(shape)
    for m in mats:
        total += m
    return total / len(mats)


@dataclass(frozen=True)
class KdConfig:
    """Server fine-tuning settings for the distillation step."""

    lr: float = 0.0005
    epochs: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def feature_mse(backbone: np.ndarray, inputs: np.ndarray,
                targets: np.ndarray) -> float:
    """Mean squared error between backbone features and target features."""
    feats = extract_features(backbone, inputs)
    if targets.shape != feats.shape:
        raise ValueError(
            f"targets shape {targets.shape} does not match features "
            f"{feats.shape}"
        )
    diff = feats - targets
    return float(np.mean(diff * diff))


def kd_finetune(backbone: np.ndarray, inputs: np.ndarray,
                targets: np.ndarray, kd: KdConfig, seed) -> np.ndarray:
    """Fine-tune a backbone so its features approach the soft labels.

    Minibatch SGD (no momentum, no weight decay) on the element-mean squared
    error.  When the targets equal the backbone's own features the gradient
    is exactly zero and the parameters come back unchanged.
    """
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("inputs must be a non-empty 2-d array")
    d = inputs.shape[1]
    if backbone.ndim != 1 or backbone.size % (d + 1) != 0:
        raise ValueError(
            f"backbone of length {backbone.size} does not factor over "
            f"input_dim={d}"
        )
    f = backbone.size // (d + 1)
    if targets.shape != (inputs.shape[0], f):
        raise ValueError(
            f"targets must have shape ({inputs.shape[0]}, {f}), "
            f"got {targets.shape}"
        )
    out = backbone.copy()
    w = out[: d * f].reshape(d, f)
    b = out[d * f:]
    rng = np.random.default_rng(seed)
    n = inputs.shape[0]
    for _ in range(kd.epochs):
        order = rng.permutation(n)
        pos = 0
        while pos < n:
            idx = order[pos:pos + kd.batch_size]
            xb = inputs[idx]
            m = idx.shape[0]
            diff = xb @ w + b - targets[idx]
            scale = 2.0 / (m * f)
            dfeat = scale * diff
            w -= kd.lr * (xb.T @ dfeat)
            b -= kd.lr * dfeat.sum(axis=0)
            pos += kd.batch_size
    return out
