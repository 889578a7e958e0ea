"""Method variants assembled from encoders, classifier posteriors and mixing weights."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distributions import GumbelMixing
from .inference import (
    DEFAULT_DROPOUT,
    DEFAULT_HIDDEN,
    DEFAULT_Z_DIM,
    Z_LOG_VAR_FLOOR,
    Z_MEAN_BOUND,
    AmortizedClassifierNet,
    ClassifierPosteriorStore,
    EncoderNet,
)


class MethodKind(str, enum.Enum):
    STL = "stl"
    VSTL = "vstl"
    BMTL = "bmtl"
    VBMTL = "vbmtl"
    VMTL = "vmtl"
    VMTL_AC = "vmtl-ac"

    @classmethod
    def parse(cls, name) -> MethodKind:
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("_", "-")
        for m in cls:
            if m.value == key:
                return m
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown method {name!r}; valid methods: {valid}")


# shared encoder, variational z, variational w, prior kind, amortized classifier
_WIRING = {
    MethodKind.STL: (False, False, False, "none", False),
    MethodKind.VSTL: (False, True, True, "normal", False),
    MethodKind.BMTL: (True, False, False, "none", False),
    MethodKind.VBMTL: (True, True, True, "normal", False),
    MethodKind.VMTL: (True, True, True, "gumbel", False),
    MethodKind.VMTL_AC: (True, True, True, "gumbel", True),
}


@dataclass
class ModelConfig:
    method: MethodKind
    T: int
    n_out: int
    d: int
    hidden: int = DEFAULT_HIDDEN
    z_dim: int = DEFAULT_Z_DIM
    dropout: float = DEFAULT_DROPOUT
    regression: bool = False
    z_variational: bool | None = None
    w_variational: bool | None = None
    tie_weights: bool = False
    z_mean_bound: float | None = Z_MEAN_BOUND
    z_log_var_floor: float | None = Z_LOG_VAR_FLOOR

    def __post_init__(self):
        self.method = MethodKind.parse(self.method)
        shared, zv, wv, prior, amortized = _WIRING[self.method]
        self.shared_encoder = shared
        self.prior = prior
        self.amortized = amortized
        if self.z_variational is None:
            self.z_variational = zv
        if self.w_variational is None:
            self.w_variational = wv
        if self.prior == "none" and (self.z_variational or self.w_variational):
            raise ValueError(f"{self.method.value} is deterministic; variational overrides need a prior")


class MultiTaskModel:
    """Holds every learnable parameter of one method variant."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = c = config
        kw = dict(hidden=c.hidden, z_dim=c.z_dim, dropout=c.dropout)
        enc_kw = dict(kw, mean_bound=c.z_mean_bound, log_var_floor=c.z_log_var_floor)
        if c.shared_encoder:
            self.encoders = [EncoderNet(c.d, variational=c.z_variational, prefix="encoder", rng=rng, **enc_kw)]
        else:
            self.encoders = [
                EncoderNet(c.d, variational=c.z_variational, prefix=f"encoder{t}", rng=rng, **enc_kw)
                for t in range(c.T)
            ]
        self.store = None
        self.amortized_net = None
        if c.amortized:
            self.amortized_net = AmortizedClassifierNet(c.d, variational=c.w_variational, rng=rng, **kw)
        else:
            self.store = ClassifierPosteriorStore(c.T, c.n_out, c.z_dim, variational=c.w_variational)
        self.mix_alpha = self.mix_beta = None
        if c.prior == "gumbel":
            if c.T < 2:
                raise ValueError("Gumbel-Softmax priors need at least two tasks; use stl or vstl")
            if c.tie_weights:
                self.mix_alpha = self.mix_beta = GumbelMixing(c.T, name="mixing.tied")
            else:
                self.mix_alpha = GumbelMixing(c.T, name="mixing.alpha")
                self.mix_beta = GumbelMixing(c.T, name="mixing.beta")
        # class means of the training set, conditioning amortized classifiers at test time
        self.train_class_means: np.ndarray | None = None

    # -- parameters -----------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for enc in self.encoders:
            out.update(enc.params)
        out.update(self.classifier_params)
        if self.mix_alpha is not None:
            out[self.mix_alpha.logits.name] = self.mix_alpha.logits
            if self.mix_beta is not self.mix_alpha:
                out[self.mix_beta.logits.name] = self.mix_beta.logits
        return out

    @property
    def encoder_params(self) -> dict[str, Tensor]:
        out = {}
        for enc in self.encoders:
            out.update(enc.params)
        return out

    @property
    def classifier_params(self) -> dict[str, Tensor]:
        return dict(self.amortized_net.params if self.amortized_net is not None else self.store.params)

    def posterior_params(self) -> dict[str, Tensor]:
        """Parameters that define q(z|x) and q(w|D): what a snapshot copies."""
        out = self.encoder_params
        out.update(self.classifier_params)
        return out

    # -- forward pieces -------------------------------------------------

    def encode_batch(self, x: np.ndarray, training: bool, mask=None, params=None):
        """Encode a task-major array ``(T, ..., d)``; returns ``(mean, log_var | None)``."""
        if self.config.shared_encoder:
            return self.encoders[0].forward(x, training=training, mask=mask, params=params)
        mus, lvs = [], []
        for t, enc in enumerate(self.encoders):
            m = None if mask is None else mask[t]
            mu, lv = enc.forward(x[t], training=training, mask=m, params=params)
            mus.append(mu)
            lvs.append(lv)
        mu = dc.stack(mus, axis=0)
        lv = None if lvs[0] is None else dc.stack(lvs, axis=0)
        return mu, lv

    def encode_task(self, x: np.ndarray, t: int, training: bool = False, mask=None, params=None):
        enc = self.encoders[0] if self.config.shared_encoder else self.encoders[t]
        return enc.forward(x, training=training, mask=mask, params=params)

    def classifier(self, means: np.ndarray | None = None, training: bool = False, mask=None, params=None):
        """Classifier posterior parameters ``(T, n_out, z_dim)``.

        Amortized classifiers need ``means`` of shape ``(T, n_out, d)``.
        """
        if self.amortized_net is None:
            src = self.store.params if params is None else params
            mu = dc.as_tensor(src[f"{self.store.prefix}.mu"])
            lv = dc.as_tensor(src[f"{self.store.prefix}.logvar"]) if self.config.w_variational else None
            return mu, lv
        if means is None:
            means = self.train_class_means
        if means is None:
            raise ValueError("amortized classifier needs class means")
        return self.amortized_net.forward(means, training=training, mask=mask, params=params)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))
