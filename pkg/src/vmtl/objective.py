"""Empirical variational multi-task objective, schedules and MC prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distributions import (
    DiagGaussian,
    draw_gumbel,
    kl_diag,
    kl_mixture_upper_stacked,
    kl_standard_normal,
    rsample,
)
from .inference import dropout_mask


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        self.term = term
        super().__init__(f"loss term {term!r} is not finite ({value})")


@dataclass(frozen=True)
class MCConfig:
    L: int = 10
    M: int = 10

    def __post_init__(self):
        if self.L < 1 or self.M < 1:
            raise ValueError(f"MC sample counts must be positive, got L={self.L}, M={self.M}")


@dataclass
class AnnealState:
    tau0: float = 1.0
    tau_min: float = 0.5
    rate: float = 1e-4
    warmup: int = 1000
    iteration: int = 0

    @property
    def tau(self) -> float:
        return tau_at(self.iteration, self)

    @property
    def kl_weight(self) -> float:
        return kl_weight_at(self.iteration, self)


def tau_at(eta: int, anneal: AnnealState) -> float:
    return max(anneal.tau_min, anneal.tau0 * math.exp(-anneal.rate * eta))


def kl_weight_at(eta: int, anneal: AnnealState) -> float:
    if anneal.warmup <= 0:
        return 1.0
    return min(1.0, eta / anneal.warmup)


@dataclass
class LossBreakdown:
    nll: Tensor
    kl_z: Tensor
    kl_w: Tensor
    total: Tensor
    kl_weight: float

    def as_dict(self) -> dict[str, float]:
        return {
            "nll": self.nll.item(),
            "kl_z": self.kl_z.item(),
            "kl_w": self.kl_w.item(),
            "total": self.total.item(),
        }


# ---------------------------------------------------------------------------
# likelihoods


def nll_classification(z_samples, w_samples, y: int) -> Tensor:
    """Mean over the L x M sample grid of ``-log softmax(<z, w_c>)_y``.

    ``z_samples``: ``(L, z_dim)``; ``w_samples``: ``(M, C, z_dim)``.
    """
    w_samples = dc.as_tensor(w_samples)
    C = w_samples.shape[-2]
    if not 0 <= int(y) < C:
        raise ValueError(f"label {y} outside [0, {C})")
    logits = dc.einsum("lz,mcz->lmc", z_samples, w_samples)
    return -dc.mean(dc.log_softmax(logits, axis=-1)[:, :, int(y)])


def nll_regression(z_samples, w_samples, y: float) -> Tensor:
    """Mean over the sample grid of ``0.5 (<z, w> - y)^2``; ``w_samples`` is ``(M, z_dim)``."""
    pred = dc.einsum("lz,mz->lm", z_samples, w_samples)
    r = pred - float(y)
    return dc.mean(r * r) * 0.5


def _balanced_nll(z: Tensor, w: Tensor, y: np.ndarray, regression: bool) -> Tensor:
    """Per-sample NLL ``(T, G, k)`` for task-major samples.

    ``z``: ``(L, T, G, k, z_dim)``; ``w``: ``(M, T, C, z_dim)``.
    """
    L, M = z.shape[0], w.shape[0]
    if regression:
        pred = dc.einsum("ltgkz,mtz->lmtgk", z, w[:, :, 0, :])
        r = pred - y[None, None]
        return dc.mean(r * r, axis=(0, 1)) * 0.5
    logp = dc.log_softmax(dc.einsum("ltgkz,mtcz->lmtgkc", z, w), axis=-1)
    T, G, k = y.shape
    ti, gi, ki = np.meshgrid(np.arange(T), np.arange(G), np.arange(k), indexing="ij")
    picked = logp[:, :, ti, gi, ki, y]
    return -dc.mean(picked, axis=(0, 1))


# ---------------------------------------------------------------------------
# noise


@dataclass
class Draws:
    """Every random quantity one loss evaluation consumes, so it can be replayed."""

    enc_mask: np.ndarray | None
    amort_mask: np.ndarray | None
    eps_z: np.ndarray | None
    eps_w: np.ndarray | None
    g_alpha: np.ndarray | None
    g_beta: np.ndarray | None


def draw_noise(model, batch, mc: MCConfig, rng) -> Draws:
    """Draw one iteration's noise.

    ``rng`` is a single generator or ``T + 1`` of them: one per task for the
    task-local draws, the last for Gumbel noise. Per-task streams keep a
    task's draws independent of how many other tasks exist.
    """
    cfg = model.config
    T, G, k, d = batch.x.shape
    rngs = [rng] * (T + 1) if isinstance(rng, np.random.Generator) else list(rng)
    if len(rngs) != T + 1:
        raise ValueError(f"need {T + 1} generators, got {len(rngs)}")

    def per_task(fn):
        return np.stack([fn(rngs[t]) for t in range(T)], axis=0)

    enc_mask = amort_mask = eps_z = eps_w = None
    if cfg.dropout > 0:
        enc_mask = per_task(lambda r: dropout_mask(r, (G, k, d), cfg.dropout))
        if cfg.amortized:
            amort_mask = per_task(lambda r: dropout_mask(r, (cfg.n_out, d), cfg.dropout))
    if cfg.z_variational:
        eps_z = np.moveaxis(per_task(lambda r: r.standard_normal((mc.L, G, k, cfg.z_dim))), 0, 1)
    if cfg.w_variational:
        eps_w = np.moveaxis(per_task(lambda r: r.standard_normal((mc.M, cfg.n_out, cfg.z_dim))), 0, 1)
    g_alpha = g_beta = None
    if cfg.prior == "gumbel":
        g_alpha = draw_gumbel(rngs[T], (T, T - 1))
        g_beta = g_alpha if cfg.tie_weights else draw_gumbel(rngs[T], (T, T - 1))
    return Draws(enc_mask, amort_mask, eps_z, eps_w, g_alpha, g_beta)


# ---------------------------------------------------------------------------
# objective


@dataclass
class Priors:
    """Frozen mixture components, one per other task.

    ``z``: DiagGaussian ``(T, T-1, G, k, z_dim)``; ``w``: ``(T, T-1, C, z_dim)``.
    ``None`` means standard normal.
    """

    z: DiagGaussian | None
    w: DiagGaussian | None


def _check_finite(name: str, t: Tensor) -> None:
    v = t.item()
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)


def empirical_loss(
    batch,
    model,
    priors: Priors | None,
    draws: Draws,
    anneal: AnnealState,
) -> LossBreakdown:
    """Task-averaged NLL plus warm-up weighted KL terms.

    Per task: mean over samples of (NLL + z-KL against the representation
    prior) plus the classifier KL divided by the task's batch size, i.e. the
    per-task sum objective rescaled to per-sample units. Gumbel-mixture priors use the weighted sum
    of component KLs; ``priors`` must already be detached snapshots.
    """
    cfg = model.config
    if cfg.prior == "gumbel" and cfg.T < 2:
        raise ValueError("VMTL needs at least two tasks; configure stl/vstl for a single task")
    y = batch.y

    mu_z, lv_z = model.encode_batch(batch.x, training=True, mask=draws.enc_mask)
    means = batch.class_means() if cfg.amortized else None
    mu_w, lv_w = model.classifier(means, training=True, mask=draws.amort_mask)

    if cfg.z_variational:
        q_z = DiagGaussian(mu_z, lv_z)
        z = rsample(q_z, draws.eps_z)
    else:
        z = dc.expand_dims(mu_z, 0)
    if cfg.w_variational:
        q_w = DiagGaussian(mu_w, lv_w)
        w = rsample(q_w, draws.eps_w)
    else:
        w = dc.expand_dims(mu_w, 0)

    nll = dc.mean(_balanced_nll(z, w, y, cfg.regression))
    zero = Tensor(0.0)
    kl_z = kl_w = zero

    tau = anneal.tau
    if cfg.z_variational:
        if cfg.prior == "gumbel":
            beta = model.mix_beta.weights(tau, draws.g_beta)
            comps = priors.z if priors is not None and priors.z is not None else None
            if comps is None:
                comps = DiagGaussian.standard((cfg.T, cfg.T - 1) + q_z.shape[1:])
            q_exp = DiagGaussian(dc.expand_dims(q_z.mean, 1), dc.expand_dims(q_z.log_var, 1))
            wshape = (cfg.T, cfg.T - 1) + (1,) * (q_z.mean.ndim - 2)
            per_sample = kl_mixture_upper_stacked(q_exp, comps, beta.reshape(wshape), axis=1)
        else:
            per_sample = kl_standard_normal(q_z)
        kl_z = dc.mean(per_sample)

    if cfg.w_variational:
        if cfg.prior == "gumbel":
            alpha = model.mix_alpha.weights(tau, draws.g_alpha)
            comps = priors.w if priors is not None and priors.w is not None else None
            if comps is None:
                comps = DiagGaussian.standard((cfg.T, cfg.T - 1) + q_w.shape[1:])
            q_exp = DiagGaussian(dc.expand_dims(q_w.mean, 1), dc.expand_dims(q_w.log_var, 1))
            # KL of the product over classes: sum the per-class terms, then mix over tasks
            pair = dc.sum_(kl_diag(q_exp, comps), axis=-1)
            per_task = dc.sum_(pair * alpha, axis=1)
        else:
            per_task = dc.sum_(kl_standard_normal(q_w), axis=-1)
        # one classifier KL per task against a sum over its samples: per-sample share
        kl_w = dc.mean(per_task) * (1.0 / int(np.prod(y.shape[1:])))

    klw = anneal.kl_weight
    total = nll + (kl_z + kl_w) * klw
    for name, term in (("nll", nll), ("kl_z", kl_z), ("kl_w", kl_w), ("total", total)):
        _check_finite(name, term)
    return LossBreakdown(nll=nll, kl_z=kl_z, kl_w=kl_w, total=total, kl_weight=klw)


# ---------------------------------------------------------------------------
# prediction


def predict(x: np.ndarray, task: int, model, mc: MCConfig, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo predictive for rows of ``x`` from ``task``.

    Classification returns the average of per-draw softmax probabilities,
    ``(n, C)``; regression returns the mean prediction ``(n,)`` in training
    target units.
    """
    cfg = model.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mu_z, lv_z = model.encode_task(x, task, training=False)
    mu_w, lv_w = model.classifier(None, training=False)
    mu_z, mu_w = mu_z.data, mu_w.data[task]
    if cfg.z_variational:
        std = np.exp(0.5 * lv_z.data)
        z = mu_z[None] + std[None] * rng.standard_normal((mc.L,) + mu_z.shape)
    else:
        z = mu_z[None]
    if cfg.w_variational:
        std = np.exp(0.5 * lv_w.data[task])
        w = mu_w[None] + std[None] * rng.standard_normal((mc.M,) + mu_w.shape)
    else:
        w = mu_w[None]
    if cfg.regression:
        return np.einsum("lnz,mz->lmn", z, w[:, 0, :]).mean(axis=(0, 1))
    logits = np.einsum("lnz,mcz->lmnc", z, w)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return p.mean(axis=(0, 1))
