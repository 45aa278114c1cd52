"""Loss functions returning ``(value, gradient w.r.t. prediction)``.

Both losses average over the batch so gradients are independent of batch size.
"""

import numpy as np

from hsfs.errors import ShapeError

EPS = 1e-7


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of integer ``labels`` under softmax ``probs``."""
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"cross_entropy needs (N, K) probs and (N,) labels, got {probs.shape}, {labels.shape}")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")
    n = probs.shape[0]
    rows = np.arange(n)
    p = probs[rows, labels]
    value = float(-np.log(np.maximum(p, EPS)).mean()) if n else 0.0
    grad = np.zeros_like(probs)
    # clamped entries have zero derivative
    grad[rows, labels] = np.where(p > EPS, -1.0 / (n * np.maximum(p, EPS)), 0.0)
    return value, grad


def mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over every element."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    value = float(np.mean(diff.astype(np.float64) ** 2)) if diff.size else 0.0
    grad = (2.0 / max(diff.size, 1)) * diff
    return value, grad.astype(pred.dtype)


LOSSES = {"cross_entropy": cross_entropy, "mse": mse}


def loss(kind: str, prediction, target):
    try:
        fn = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}") from None
    return fn(prediction, target)
