"""Variational posteriors over representations and classifiers."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor
from .distributions import LOG_VAR_BOUND, DiagGaussian

DEFAULT_HIDDEN = 512
DEFAULT_Z_DIM = 512
DEFAULT_DROPOUT = 0.7
CLASSIFIER_INIT_STD = 0.1
# Representation stabilizers. The z-prior is a detached copy of the same
# encoder, so its variance never sees the mismatch penalty; without a floor
# the likelihood drives log-variances to the clamp, and without a bound the
# lagged self-target inflates the code scale.
Z_MEAN_BOUND = 2.0
Z_LOG_VAR_FLOOR = 0.0


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    if p == 0.0:
        return None
    return (rng.random(shape) >= p).astype(np.float64)


class GaussianMLP:
    """dropout -> FC+ELU -> FC+ELU -> (mean head, log-variance head).

    With ``variational=False`` the log-variance head is omitted and the
    network is a deterministic feature map.
    """

    def __init__(
        self,
        d_in: int,
        hidden: int = DEFAULT_HIDDEN,
        z_dim: int = DEFAULT_Z_DIM,
        dropout: float = DEFAULT_DROPOUT,
        variational: bool = True,
        prefix: str = "encoder",
        rng: np.random.Generator | None = None,
        mean_bound: float | None = None,
        log_var_floor: float | None = None,
    ):
        if mean_bound is not None and mean_bound <= 0:
            raise ValueError("mean_bound must be positive")
        self.d_in = d_in
        self.hidden = hidden
        self.z_dim = z_dim
        self.dropout = dropout
        self.variational = variational
        self.prefix = prefix
        self.mean_bound = mean_bound
        self.log_var_floor = log_var_floor
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = [("fc1", d_in, hidden), ("fc2", hidden, hidden), ("mu", hidden, z_dim)]
        if variational:
            shapes.append(("logvar", hidden, z_dim))
        self.params: dict[str, Tensor] = {}
        for layer, fan_in, fan_out in shapes:
            w = dc.glorot_uniform(rng, fan_in, fan_out)
            self.params[f"{prefix}.{layer}.W"] = Tensor(w, requires_grad=True, name=f"{prefix}.{layer}.W")
            self.params[f"{prefix}.{layer}.b"] = Tensor(
                np.zeros(fan_out), requires_grad=True, name=f"{prefix}.{layer}.b"
            )

    def _p(self, params: Mapping | None, key: str) -> Tensor:
        src = self.params if params is None else params
        return dc.as_tensor(src[f"{self.prefix}.{key}"])

    def forward(self, x, training: bool = False, mask=None, params: Mapping | None = None):
        """Return ``(mean, log_var)``; ``log_var`` is None for deterministic nets.

        ``params`` substitutes another parameter set (e.g. a frozen snapshot)
        for the live one.
        """
        x = dc.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"{self.prefix}.forward", x.shape, (self.d_in,))
        lead = x.shape[:-1]
        h = x.reshape((-1, self.d_in)) if x.ndim != 2 else x
        if training and self.dropout > 0 and mask is not None:
            h = dc.dropout(h, np.asarray(mask).reshape(h.shape), self.dropout)
        h = dc.elu(h @ self._p(params, "fc1.W") + self._p(params, "fc1.b"))
        h = dc.elu(h @ self._p(params, "fc2.W") + self._p(params, "fc2.b"))
        mu = (h @ self._p(params, "mu.W") + self._p(params, "mu.b")).reshape(lead + (self.z_dim,))
        if self.mean_bound is not None:
            mu = dc.tanh(mu * (1.0 / self.mean_bound)) * self.mean_bound
        if not self.variational:
            return mu, None
        lv = h @ self._p(params, "logvar.W") + self._p(params, "logvar.b")
        if self.log_var_floor is not None:
            lv = dc.softplus(lv - self.log_var_floor) + self.log_var_floor
        lv = dc.clip(lv, -LOG_VAR_BOUND, LOG_VAR_BOUND).reshape(lead + (self.z_dim,))
        return mu, lv


class EncoderNet(GaussianMLP):
    """Representation encoder q(z | x); means are soft-bounded by
    ``mean_bound * tanh(. / mean_bound)`` and log-variances floored softly."""

    def __init__(self, d_in: int, **kw):
        kw.setdefault("mean_bound", Z_MEAN_BOUND)
        kw.setdefault("log_var_floor", Z_LOG_VAR_FLOOR)
        super().__init__(d_in, **kw)


class AmortizedClassifierNet(GaussianMLP):
    """Maps a class-mean feature vector to the Gaussian over that class's weights."""

    def __init__(self, d_in: int, **kw):
        kw.setdefault("prefix", "amortized")
        super().__init__(d_in, **kw)


def _as_gaussian(mu: Tensor, lv: Tensor | None) -> DiagGaussian:
    if lv is None:
        lv = Tensor(np.full(mu.shape, -LOG_VAR_BOUND))
    return DiagGaussian(mu, lv)


def encode(
    net: GaussianMLP,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
    mask=None,
    params: Mapping | None = None,
) -> DiagGaussian:
    """q(z | x). Dropout is active only when ``training``; the mask comes from
    ``mask`` or is drawn from ``rng``."""
    x = dc.as_tensor(x)
    if training and mask is None and net.dropout > 0:
        if rng is None:
            raise ValueError("training-mode encode needs a dropout mask or an rng")
        mask = dropout_mask(rng, x.shape, net.dropout)
    mu, lv = net.forward(x, training=training, mask=mask, params=params)
    return _as_gaussian(mu, lv)


def attend(x, D) -> Tensor:
    """Scaled dot-product readout ``softmax(x D^T / sqrt(d)) D``.

    ``x`` is a query vector or a stack of queries; ``D`` holds one context
    sample per row and serves as both keys and values.
    """
    x, D = dc.as_tensor(x), dc.as_tensor(D)
    if D.ndim != 2 or D.shape[0] == 0:
        raise ValueError(f"attend: context must be a nonempty matrix, got shape {D.shape}")
    if x.shape[-1] != D.shape[1]:
        raise ShapeError("attend", x.shape, D.shape)
    scores = (x @ D.T) * (1.0 / np.sqrt(D.shape[1]))
    return dc.softmax(scores, axis=-1) @ D


def attend_batched(queries: np.ndarray, context: np.ndarray) -> np.ndarray:
    """Constant-data attention over many cells at once.

    ``queries``: ``(..., n, d)``, ``context``: ``(..., m, d)`` with matching
    leading axes. Returns ``(..., n, d)``.
    """
    d = queries.shape[-1]
    scores = np.einsum("...nd,...md->...nm", queries, context) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)
    return np.einsum("...nm,...md->...nd", a, context)


class ContextBank:
    """Stored raw features ``D[i, c]`` per (task, class) used as attention context."""

    def __init__(self, cells: Mapping[tuple[int, int], np.ndarray]):
        self.cells = {k: np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in cells.items()}
        for key, rows in self.cells.items():
            if rows.shape[0] == 0:
                raise ValueError(f"context cell {key} is empty")

    @classmethod
    def from_arrays(cls, x: np.ndarray, tasks: np.ndarray, labels: np.ndarray) -> ContextBank:
        cells = {}
        for key in sorted(set(zip(tasks.tolist(), labels.tolist()))):
            sel = (tasks == key[0]) & (labels == key[1])
            cells[(int(key[0]), int(key[1]))] = x[sel]
        return cls(cells)

    def cell(self, task: int, label: int) -> np.ndarray:
        """``D[task, label]``, or every stored row of ``task`` when that class is absent."""
        rows = self.cells.get((task, label))
        if rows is not None:
            return rows
        parts = [v for (t, _), v in sorted(self.cells.items()) if t == task]
        if not parts:
            raise KeyError(f"context bank holds no samples for task {task}")
        return np.concatenate(parts, axis=0)


def encode_conditioned(
    net: GaussianMLP,
    x,
    task: int,
    label: int,
    bank: ContextBank,
    training: bool = False,
    rng: np.random.Generator | None = None,
    mask=None,
    params: Mapping | None = None,
) -> DiagGaussian:
    """q(z | x, D_task): encode the attention readout of ``x`` over ``D[task, label]``."""
    return encode(net, attend(x, bank.cell(task, label)), training, rng, mask, params)


class ClassifierPosteriorStore:
    """Free per-(task, class) Gaussian parameters over classifier weights.

    Regression uses a single output column per task.
    """

    def __init__(self, T: int, C: int, z_dim: int, variational: bool = True, prefix: str = "classifier"):
        self.T, self.C, self.z_dim = T, C, z_dim
        self.variational = variational
        self.params = {
            f"{prefix}.mu": Tensor(np.zeros((T, C, z_dim)), requires_grad=True, name=f"{prefix}.mu"),
        }
        if variational:
            init = np.full((T, C, z_dim), 2.0 * np.log(CLASSIFIER_INIT_STD))
            self.params[f"{prefix}.logvar"] = Tensor(init, requires_grad=True, name=f"{prefix}.logvar")
        self.prefix = prefix

    def gaussians(self, params: Mapping | None = None) -> DiagGaussian:
        src = self.params if params is None else params
        mu = dc.as_tensor(src[f"{self.prefix}.mu"])
        lv = dc.as_tensor(src[f"{self.prefix}.logvar"]) if self.variational else None
        return _as_gaussian(mu, lv)


def classifier_posterior(store: ClassifierPosteriorStore, t: int) -> DiagGaussian:
    """The ``C`` per-class Gaussians of task ``t``, batched as shape ``(C, z_dim)``."""
    if not 0 <= t < store.T:
        raise IndexError(f"task {t} out of range for {store.T} tasks")
    q = store.gaussians()
    return DiagGaussian(q.mean[t], q.log_var[t])


def class_means(x: np.ndarray, labels: np.ndarray, C: int) -> np.ndarray:
    """Per-class mean feature vectors, ``(C, d)``; every class must be present."""
    out = np.empty((C, x.shape[1]))
    for c in range(C):
        sel = labels == c
        if not np.any(sel):
            raise ValueError(f"class {c} has no samples in the conditioning set")
        out[c] = x[sel].mean(axis=0)
    return out


def amortized_classifier(
    net: GaussianMLP, means, training: bool = False, mask=None, params: Mapping | None = None
) -> DiagGaussian:
    """One shared network pass per class mean; ``means`` is ``(..., C, d)``."""
    means = np.asarray(means, dtype=np.float64)
    if not np.all(np.isfinite(means)):
        raise ValueError("class means must be finite (a class with no samples?)")
    return encode(net, means, training=training, mask=mask, params=params)
