"""Finite-difference and Monte-Carlo oracles shared by the test modules."""

import numpy as np


def central_difference(f, arr: np.ndarray, idx, h: float = 1e-5) -> float:
    """d f / d arr[idx] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gauss_logpdf(x, mean, var):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    return -0.5 * np.sum(np.log(2 * np.pi * var) + (x - mean) ** 2 / var, axis=-1)
