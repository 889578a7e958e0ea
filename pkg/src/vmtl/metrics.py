"""Evaluation metrics and multi-seed aggregation."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

ENTROPY_EPS = 1e-12


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def predictive_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy of ``probs`` after additive ``ENTROPY_EPS`` smoothing and renormalization."""
    p = np.asarray(probs, dtype=np.float64) + ENTROPY_EPS
    p /= p.sum(axis=-1, keepdims=True)
    return -np.sum(p * np.log(p), axis=-1)


def entropy_ratio(probs: np.ndarray, labels: np.ndarray) -> float | None:
    """Mean predictive entropy of misclassified samples over that of correct ones.

    ``None`` when either group is empty.
    """
    wrong = np.argmax(probs, axis=1) != np.asarray(labels)
    if wrong.all() or not wrong.any():
        return None
    h = predictive_entropy(probs)
    return float(h[wrong].mean() / h[~wrong].mean())


def nmse(preds, targets) -> float:
    """Mean squared error divided by the population variance of the targets."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"nmse: shapes differ, {preds.shape} vs {targets.shape}")
    var = targets.var()
    if targets.size < 2 or var == 0:
        raise ValueError("nmse needs targets with nonzero variance")
    return float(np.mean((preds - targets) ** 2) / var)


def aggregate(values) -> tuple[float, float]:
    """Mean and 95% t-interval half-width ``t_{0.975, n-1} s / sqrt(n)``."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size < 2:
        raise ValueError("aggregate needs at least two values")
    half = stats.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size)
    return float(v.mean()), float(half)
