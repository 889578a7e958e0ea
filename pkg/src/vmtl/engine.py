"""Training orchestration: balanced batches, posterior snapshots, the train loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import save_checkpoint
from .data import FeatureDataset, SyntheticSpec, generate, load, resolve_synthetic, split
from .diffcore import AdamState, Tensor
from .distributions import DiagGaussian, off_diagonal_index
from .inference import (
    DEFAULT_DROPOUT,
    DEFAULT_HIDDEN,
    DEFAULT_Z_DIM,
    Z_LOG_VAR_FLOOR,
    Z_MEAN_BOUND,
    ContextBank,
    attend_batched,
)
from .model import MethodKind, ModelConfig, MultiTaskModel
from .objective import AnnealState, MCConfig, Priors, draw_noise, empirical_loss, predict

log = logging.getLogger(__name__)

# stream ids of the seed-derivation tree; order is part of the determinism contract
STREAMS = {"split": 0, "init": 1, "batch": 2, "noise": 3, "gumbel": 4, "eval": 5}


def derive_rng(seed: int, stream: str, *sub: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[stream], *map(int, sub)])


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Balanced task-major batch: ``x`` is ``(T, G, k, d)``, ``y`` is ``(T, G, k)``.

    ``G`` is the class count (or regression target levels); every cell holds
    exactly ``k`` samples.
    """

    x: np.ndarray
    y: np.ndarray
    regression: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.y.shape))

    def class_means(self) -> np.ndarray:
        """Per-task class means ``(T, C, d)``; a single task mean for regression."""
        if self.regression:
            return self.x.mean(axis=(1, 2))[:, None, :]
        return self.x.mean(axis=2)

    def bank(self) -> ContextBank:
        T, G = self.x.shape[:2]
        return ContextBank({(t, g): self.x[t, g] for t in range(T) for g in range(G)})


class BalancedSampler:
    """Draws ``k`` samples per (task, stratum) cell, with replacement when a cell is smaller than ``k``."""

    def __init__(self, ds: FeatureDataset, k: int, target_scale: float = 1.0):
        if k < 1:
            raise ValueError("batch multiplier k must be positive")
        self.ds, self.k, self.target_scale = ds, k, target_scale
        strata, self.G = ds.strata()
        self.cells = []
        for t in range(ds.T):
            row = []
            for g in range(self.G):
                idx = np.flatnonzero((ds.task == t) & (strata == g))
                if idx.size == 0:
                    raise ValueError(f"training data has no samples for task {t}, stratum {g}")
                row.append(idx)
            self.cells.append(row)

    def sample(self, rngs) -> Batch:
        """``rngs``: one generator, or one per task."""
        T = self.ds.T
        if isinstance(rngs, np.random.Generator):
            rngs = [rngs] * T
        picks = np.empty((T, self.G, self.k), dtype=np.int64)
        for t in range(T):
            for g, idx in enumerate(self.cells[t]):
                picks[t, g] = rngs[t].choice(idx, size=self.k, replace=idx.size < self.k)
        x = self.ds.x[picks]
        y = self.ds.y[picks]
        if self.ds.regression:
            y = y / self.target_scale
        return Batch(x, y, regression=self.ds.regression)


def make_batch(ds: FeatureDataset, k: int, rng, target_scale: float = 1.0) -> Batch:
    return BalancedSampler(ds, k, target_scale).sample(rng)


# ---------------------------------------------------------------------------
# snapshots and priors


@dataclass
class Snapshot:
    """Detached copies of posterior parameters as they stood at ``iteration``."""

    iteration: int
    params: dict[str, Tensor]


def capture_snapshot(model: MultiTaskModel, iteration: int) -> Snapshot:
    return Snapshot(iteration, {k: Tensor(v.data.copy()) for k, v in model.posterior_params().items()})


def snapshot_posteriors(state: TrainState) -> Snapshot | None:
    """Frozen prior set for the current iteration; ``None`` (standard normal) at the first one."""
    return state.snapshot


def build_priors(
    model: MultiTaskModel, snapshot: Snapshot | None, batch: Batch, enc_mask: np.ndarray | None = None
) -> Priors | None:
    """Mixture components from the last iteration's posteriors.

    Classifier components are the snapshot Gaussians of the other tasks;
    representation components encode each sample's attention readout over
    the same-class samples of every other task with the snapshot encoder.
    Given the ``(T, G, k, d)`` dropout mask of the current posterior, the
    snapshot encoder runs with that same mask, so prior and posterior are
    the same stochastic network; without one it runs deterministically.
    """
    cfg = model.config
    if cfg.prior != "gumbel":
        return None
    if snapshot is None:
        return Priors(None, None)
    frozen = {k: v.detach() for k, v in snapshot.params.items()}
    T = cfg.T
    rows = np.repeat(np.arange(T), T - 1).reshape(T, T - 1)
    cols = off_diagonal_index(T)

    prior_w = None
    if cfg.w_variational:
        means = batch.class_means() if cfg.amortized else None
        mu, lv = model.classifier(means, training=False, params=frozen)
        prior_w = DiagGaussian(mu.data[cols], lv.data[cols])

    prior_z = None
    if cfg.z_variational:
        x = batch.x
        readout = attend_batched(
            np.broadcast_to(x[:, None], (T, T) + x.shape[1:]),
            np.broadcast_to(x[None, :], (T, T) + x.shape[1:]),
        )[rows, cols]
        mask = None if enc_mask is None else np.broadcast_to(enc_mask[:, None], readout.shape)
        mu, lv = model.encoders[0].forward(readout, training=mask is not None, mask=mask, params=frozen)
        prior_z = DiagGaussian(mu.data, lv.data)
    return Priors(prior_z, prior_w)


# ---------------------------------------------------------------------------
# configuration and state


@dataclass
class RunConfig:
    method: MethodKind | str = MethodKind.VMTL
    dataset: str | None = None
    synthetic: str | SyntheticSpec | dict | None = "default"
    split: float | None = None
    seed: int = 0
    iters: int = 15000
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_step: int = 3000
    batch_per_class: int = 4
    mc: MCConfig = field(default_factory=MCConfig)
    tau0: float = 1.0
    tau_min: float = 0.5
    tau_rate: float = 1e-4
    warmup_frac: float = 1.0 / 3.0
    tie_weights: bool = False
    hidden: int = DEFAULT_HIDDEN
    z_dim: int = DEFAULT_Z_DIM
    dropout: float = DEFAULT_DROPOUT
    z_mean_bound: float | None = Z_MEAN_BOUND
    z_log_var_floor: float | None = Z_LOG_VAR_FLOOR
    z_variational: bool | None = None
    w_variational: bool | None = None
    out_dir: str | None = None
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.method = MethodKind.parse(self.method)
        if isinstance(self.mc, dict):
            self.mc = MCConfig(**self.mc)
        if self.iters < 1:
            raise ValueError("iteration count must be at least 1")
        for name in ("lr", "lr_step", "batch_per_class", "hidden", "z_dim"):
            if getattr(self, name) < 0 or (name != "lr" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dataset is None and self.synthetic is None:
            raise ValueError("need a dataset path or a synthetic spec")

    @property
    def warmup(self) -> int:
        return int(round(self.iters * self.warmup_frac))

    def anneal(self, iteration: int = 0) -> AnnealState:
        return AnnealState(self.tau0, self.tau_min, self.tau_rate, self.warmup, iteration)

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.lr_decay ** (iteration // self.lr_step)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, MethodKind):
                v = v.value
            elif isinstance(v, MCConfig):
                v = {"L": v.L, "M": v.M}
            elif isinstance(v, SyntheticSpec):
                v = v.to_dict()
            out[k] = v
        return out


@dataclass
class TrainState:
    config: RunConfig
    model: MultiTaskModel
    adam: AdamState
    iteration: int = 0
    snapshot: Snapshot | None = None
    history: list[dict] = field(default_factory=list)
    noise_rngs: list[np.random.Generator] = field(default_factory=list)


def init_state(config: RunConfig, train: FeatureDataset) -> TrainState:
    levels = train.strata()[1] if train.regression else train.C
    mcfg = ModelConfig(
        method=config.method,
        T=train.T,
        n_out=1 if train.regression else levels,
        d=train.d,
        hidden=config.hidden,
        z_dim=config.z_dim,
        dropout=config.dropout,
        regression=train.regression,
        z_variational=config.z_variational,
        w_variational=config.w_variational,
        tie_weights=config.tie_weights,
        z_mean_bound=config.z_mean_bound,
        z_log_var_floor=config.z_log_var_floor,
    )
    model = MultiTaskModel(mcfg, derive_rng(config.seed, "init"))
    noise = [derive_rng(config.seed, "noise", t) for t in range(train.T)]
    noise.append(derive_rng(config.seed, "gumbel"))
    return TrainState(config, model, AdamState(), noise_rngs=noise)


def train_step(state: TrainState, batch: Batch) -> TrainState:
    """One loss evaluation, backward pass and Adam step; refreshes the snapshot."""
    cfg, model = state.config, state.model
    eta = state.iteration
    anneal = cfg.anneal(eta)
    lr = cfg.lr_at(eta)

    draws = draw_noise(model, batch, cfg.mc, state.noise_rngs)
    priors = build_priors(model, snapshot_posteriors(state), batch, draws.enc_mask)
    loss = empirical_loss(batch, model, priors, draws, anneal)

    params = model.params
    grads = dc.backward(loss.total, params.values())
    pre_step = capture_snapshot(model, eta) if model.config.prior == "gumbel" else None
    dc.adam_step(params, dict(zip(params, grads)), lr, state.adam)
    state.snapshot = pre_step

    record = {"iteration": eta, "lr": lr, "tau": anneal.tau, "kl_weight": loss.kl_weight}
    record.update(loss.as_dict())
    state.history.append(record)
    state.iteration = eta + 1
    return state


# ---------------------------------------------------------------------------
# full runs


@dataclass
class RunResult:
    config: RunConfig
    state: TrainState
    metrics: dict
    train: FeatureDataset
    test: FeatureDataset

    @property
    def model(self) -> MultiTaskModel:
        return self.state.model

    @property
    def history(self) -> list[dict]:
        return self.state.history


def load_dataset(config: RunConfig) -> tuple[FeatureDataset, float]:
    """Dataset plus the split fraction to use."""
    if config.dataset is not None:
        ds = load(config.dataset)
        return ds, config.split if config.split is not None else 0.05
    spec = resolve_synthetic(config.synthetic)
    return generate(spec), config.split if config.split is not None else spec.split


def target_scale_for(train: FeatureDataset) -> float:
    if not train.regression:
        return 1.0
    scale = float(np.max(np.abs(train.y)))
    return scale if scale > 0 else 1.0


def evaluate(model: MultiTaskModel, test: FeatureDataset, mc: MCConfig, seed: int, target_scale: float) -> dict:
    from .metrics import accuracy, entropy_ratio, nmse

    per_task, probs_all, labels_all = [], [], []
    for t in range(test.T):
        sel = test.task == t
        out = predict(test.x[sel], t, model, mc, derive_rng(seed, "eval", t))
        if test.regression:
            per_task.append(nmse(out * target_scale, test.y[sel]))
        else:
            per_task.append(accuracy(out, test.y[sel]))
            probs_all.append(out)
            labels_all.append(test.y[sel])
    ratio = None
    if not test.regression:
        ratio = entropy_ratio(np.concatenate(probs_all), np.concatenate(labels_all))
    alpha = beta = None
    if model.mix_alpha is not None:
        alpha = model.mix_alpha.expected()
        beta = model.mix_beta.expected()
    return {
        "metric": "nmse" if test.regression else "accuracy",
        "per_task": per_task,
        "average": float(np.mean(per_task)),
        "entropy_ratio": ratio,
        "alpha": alpha,
        "beta": beta,
    }


def run(config: RunConfig, dataset: FeatureDataset | None = None) -> RunResult:
    """Split, initialize, train for ``config.iters`` steps and evaluate on the held-out split."""
    if dataset is None:
        ds, fraction = load_dataset(config)
    else:
        ds, fraction = dataset, config.split if config.split is not None else 0.05
    train, test = split(ds, fraction, seed=int(derive_rng(config.seed, "split").integers(2**63)))
    scale = target_scale_for(train)
    state = init_state(config, train)
    sampler = BalancedSampler(train, config.batch_per_class, scale)
    batch_rngs = [derive_rng(config.seed, "batch", t) for t in range(train.T)]
    ckpt_dir = Path(config.out_dir) / "checkpoints" if config.out_dir else None

    for _ in range(config.iters):
        train_step(state, sampler.sample(batch_rngs))
        if ckpt_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt_dir / f"seed{config.seed}_iter{state.iteration}.vmtl", state)
    log.info("seed %d %s: final loss %.4f", config.seed, config.method.value, state.history[-1]["total"])

    model = state.model
    if model.config.amortized:
        model.train_class_means = train_class_means(train, model.config.n_out)
    metrics = evaluate(model, test, config.mc, config.seed, scale)
    return RunResult(config, state, metrics, train, test)


def train_class_means(train: FeatureDataset, n_out: int) -> np.ndarray:
    out = np.empty((train.T, n_out, train.d))
    for t in range(train.T):
        sel = train.task == t
        if train.regression:
            out[t, 0] = train.x[sel].mean(axis=0)
        else:
            for c in range(n_out):
                out[t, c] = train.x[sel & (train.y == c)].mean(axis=0)
    return out


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)
