"""Diagonal Gaussians, KL divergences and Gumbel-Softmax mixing weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

LOG_VAR_BOUND = 30.0


@dataclass
class DiagGaussian:
    """Factorized Gaussian; the last axis is the event dimension.

    Leading axes batch independent Gaussians, so one instance can hold every
    class of every task at once.
    """

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = dc.as_tensor(self.mean)
        self.log_var = dc.as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError("DiagGaussian", self.mean.shape, self.log_var.shape)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def var(self) -> Tensor:
        return dc.exp(dc.clip(self.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND))

    def detach(self) -> DiagGaussian:
        return DiagGaussian(self.mean.detach(), self.log_var.detach())

    @classmethod
    def standard(cls, shape) -> DiagGaussian:
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def stack(cls, items: Sequence[DiagGaussian], axis: int = 0) -> DiagGaussian:
        return cls(
            dc.stack([q.mean for q in items], axis=axis),
            dc.stack([q.log_var for q in items], axis=axis),
        )


@dataclass
class MixturePrior:
    components: list[DiagGaussian]
    weights: Tensor

    def __post_init__(self):
        self.weights = dc.as_tensor(self.weights)
        if self.weights.shape != (len(self.components),):
            raise ValueError(
                f"mixture has {len(self.components)} components but weights of shape {self.weights.shape}"
            )


def rsample(q: DiagGaussian, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-q.mean.ndim :] != q.shape:
        raise ShapeError("rsample", q.shape, noise.shape)
    std = dc.exp(dc.clip(q.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND) * 0.5)
    return q.mean + std * noise


def sample_gumbel(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("sample_gumbel: uniform draws must lie strictly inside (0, 1)")
    return -np.log(-np.log(u))


def draw_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    # open interval: reject exact 0 from the half-open generator
    u = rng.random(shape)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return sample_gumbel(u)


def gumbel_weights(logits, tau: float, g) -> Tensor:
    """Relaxed one-hot weights ``softmax((log_pi + g) / tau)`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = dc.as_tensor(logits)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != logits.shape:
        raise ShapeError("gumbel_weights", logits.shape, g.shape)
    return dc.softmax((logits + g) * (1.0 / tau), axis=-1)


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) summed over the event axis; leading axes broadcast."""
    if q.dim != p.dim:
        raise ShapeError("kl_diag", q.shape, p.shape)
    lq = dc.clip(q.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    lp = dc.clip(p.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    diff = q.mean - p.mean
    ratio = (dc.exp(lq) + diff * diff) * dc.exp(-lp)
    return dc.sum_((lp - lq + ratio - 1.0) * 0.5, axis=-1)


def kl_standard_normal(q: DiagGaussian) -> Tensor:
    lq = dc.clip(q.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    return dc.sum_((dc.exp(lq) + q.mean * q.mean - lq - 1.0) * 0.5, axis=-1)


def kl_mixture_upper(q: DiagGaussian, prior: MixturePrior) -> Tensor:
    """Upper bound ``sum_i w_i KL(q || p_i)`` on KL(q || sum_i w_i p_i)."""
    for comp in prior.components:
        if comp.dim != q.dim:
            raise ShapeError("kl_mixture_upper", q.shape, comp.shape)
    stacked = DiagGaussian.stack(prior.components, axis=0)
    w = prior.weights.reshape((len(prior.components),) + (1,) * (q.mean.ndim - 1))
    return kl_mixture_upper_stacked(q, stacked, w, axis=0)


def kl_mixture_upper_stacked(q: DiagGaussian, components: DiagGaussian, weights, axis: int) -> Tensor:
    """Batched form of :func:`kl_mixture_upper`.

    ``components`` carries the mixture along ``axis`` (of the KL result, i.e.
    excluding the event axis); ``q`` and ``weights`` must broadcast against it.
    """
    terms = kl_diag(q, components)
    return dc.sum_(terms * weights, axis=axis)


def off_diagonal_index(T: int) -> np.ndarray:
    """``idx[t]`` lists the tasks other than ``t`` in ascending order."""
    return np.array([[i for i in range(T) if i != t] for t in range(T)], dtype=np.int64).reshape(T, T - 1)


class GumbelMixing:
    """Learnable pairwise relatedness logits (log-domain) with temperature.

    Only off-diagonal entries of the ``T x T`` logit matrix are ever read.
    """

    def __init__(self, T: int, name: str = "mixing", logits: np.ndarray | None = None):
        if T < 2:
            raise ValueError("mixing weights need at least two tasks")
        self.T = T
        self.logits = Tensor(np.zeros((T, T)) if logits is None else logits, requires_grad=True, name=name)
        self._rows = np.repeat(np.arange(T), T - 1).reshape(T, T - 1)
        self._cols = off_diagonal_index(T)

    def row_logits(self) -> Tensor:
        return self.logits[self._rows, self._cols]

    def weights(self, tau: float, g: np.ndarray) -> Tensor:
        """Row ``t`` holds weights toward ``off_diagonal_index(T)[t]``; shape ``(T, T-1)``."""
        return gumbel_weights(self.row_logits(), tau, g)

    def expected(self) -> np.ndarray:
        """Noise-free ``softmax(log_pi)`` per row as a full matrix, NaN on the diagonal."""
        rows = self.logits.data[self._rows, self._cols]
        e = np.exp(rows - rows.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        full = np.full((self.T, self.T), np.nan)
        full[self._rows, self._cols] = w
        return full
