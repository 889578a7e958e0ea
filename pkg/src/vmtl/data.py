"""Multi-task feature datasets: file format, stratified splits, synthetic benchmarks."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

HEADER_RE = re.compile(
    r"^vmtl-features v1,\s*T=(\d+),\s*C=(\d+),\s*d=(\d+)(?:,\s*kind=(classification|regression))?\s*$"
)
# regression targets with more distinct values than this are not stratified by value
MAX_REGRESSION_LEVELS = 64


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class FeatureDataset:
    """Feature vectors with task ids and labels (or real targets).

    All tasks share one label space. For regression, ``C`` counts the
    distinct target levels used for balancing.
    """

    x: np.ndarray
    task: np.ndarray
    y: np.ndarray
    T: int
    C: int
    kind: str = "classification"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.task = np.asarray(self.task, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64 if self.kind == "classification" else np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {self.x.shape}")
        n = self.x.shape[0]
        if self.task.shape != (n,) or self.y.shape != (n,):
            raise ValueError("task ids and labels must have one entry per feature row")
        if n and (self.task.min() < 0 or self.task.max() >= self.T):
            raise ValueError(f"task ids must lie in [0, {self.T})")
        if self.kind == "classification" and n and (self.y.min() < 0 or self.y.max() >= self.C):
            raise ValueError(f"labels must lie in [0, {self.C})")
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def regression(self) -> bool:
        return self.kind == "regression"

    def subset(self, idx) -> FeatureDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(self.x[idx], self.task[idx], self.y[idx], self.T, self.C, self.kind)

    def levels(self) -> np.ndarray:
        """Sorted distinct target values that define regression strata."""
        return np.unique(self.y)

    def strata(self, levels: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        """Per-record stratum id and stratum count: the class, or the target level."""
        if not self.regression:
            return self.y.copy(), self.C
        levels = self.levels() if levels is None else levels
        if len(levels) > MAX_REGRESSION_LEVELS:
            return np.zeros(len(self), dtype=np.int64), 1
        ids = np.searchsorted(levels, self.y)
        if np.any(ids >= len(levels)) or np.any(levels[np.minimum(ids, len(levels) - 1)] != self.y):
            raise ValueError("targets outside the given level set")
        return ids.astype(np.int64), len(levels)


# ---------------------------------------------------------------------------
# file format


def load(path) -> FeatureDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    header_no = None
    for no, line in enumerate(lines, start=1):
        if line.strip() and not line.lstrip().startswith("#"):
            header_no = no
            break
    if header_no is None:
        raise DatasetFormatError("missing header")
    m = HEADER_RE.match(lines[header_no - 1].strip())
    if m is None:
        raise DatasetFormatError("malformed header, expected 'vmtl-features v1, T=<int>, C=<int>, d=<int>'", header_no)
    T, C, d = (int(g) for g in m.groups()[:3])
    kind = m.group(4) or "classification"
    if T < 1 or d < 1 or (kind == "classification" and C < 1):
        raise DatasetFormatError("T, d (and C for classification) must be positive", header_no)

    xs, tasks, ys = [], [], []
    for no in range(header_no + 1, len(lines) + 1):
        raw = lines[no - 1].strip()
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split(",")
        if len(parts) != d + 2:
            raise DatasetFormatError(f"expected {d} features, found {len(parts) - 2}", no)
        try:
            t = int(parts[0])
            y = int(parts[1]) if kind == "classification" else float(parts[1])
            feats = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"unparsable value ({exc})", no) from None
        if not 0 <= t < T:
            raise DatasetFormatError(f"task id {t} outside [0, {T})", no)
        if kind == "classification" and not 0 <= y < C:
            raise DatasetFormatError(f"label {y} outside [0, {C})", no)
        if not all(math.isfinite(v) for v in feats) or (kind == "regression" and not math.isfinite(y)):
            raise DatasetFormatError("non-finite value", no)
        xs.append(feats)
        tasks.append(t)
        ys.append(y)
    x = np.array(xs, dtype=np.float64).reshape(-1, d)
    return FeatureDataset(x, np.array(tasks, dtype=np.int64), np.array(ys), T, C, kind)


def save(ds: FeatureDataset, path) -> None:
    head = f"vmtl-features v1, T={ds.T}, C={ds.C}, d={ds.d}"
    if ds.regression:
        head += ", kind=regression"
    out = [head]
    for t, y, row in zip(ds.task.tolist(), ds.y.tolist(), ds.x.tolist()):
        out.append(",".join([str(t), repr(y)] + [repr(v) for v in row]))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# split protocol


def n_train_for(cell_size: int, fraction: float) -> int:
    # guard against 0.05 * 100 = 5.000000000000001
    return min(cell_size, max(1, math.ceil(round(fraction * cell_size, 9))))


def split(ds: FeatureDataset, fraction: float, seed: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Stratified random split: ``ceil(fraction * n)`` train samples from every
    (task, class) cell, the rest for testing."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    strata, n_strata = ds.strata()
    train_idx, test_idx = [], []
    for t in range(ds.T):
        for s in range(n_strata):
            cell = np.flatnonzero((ds.task == t) & (strata == s))
            if cell.size == 0:
                raise ValueError(f"task {t} has no samples for stratum {s}")
            perm = rng.permutation(cell)
            k = n_train_for(cell.size, fraction)
            train_idx.append(perm[:k])
            test_idx.append(perm[k:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ds.subset(train), ds.subset(test)


# ---------------------------------------------------------------------------
# synthetic benchmarks


@dataclass
class SyntheticSpec:
    """Desk-scale benchmark description.

    Classification: class means on the unit sphere; the task on domain ``j``
    sees them rotated by ``shift * j * rotation_scale`` radians (in a random
    plane) and translated by ``shift * j * translation_scale``. ``task_domains``
    maps tasks to domains (default: task ``t`` on domain ``t``). Tasks listed
    in ``unrelated_tasks`` draw their own class means instead of the shared ones.

    Regression: per-task point-set shapes rotated through ``C`` angles in 10
    degree steps; shapes are a common template plus per-task deviation of
    size ``shape_spread``.
    """

    kind: str = "classification"
    T: int = 4
    C: int = 5
    d: int = 16
    samples_per_class: int = 60
    shift: float = 1.0
    noise: float = 0.4
    rotation_scale: float = 0.3
    translation_scale: float = 0.3
    shape_spread: float = 0.5
    task_domains: list[int] | None = None
    unrelated_tasks: list[int] | None = None
    split: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.T, self.C, self.d, self.samples_per_class) < 1:
            raise ValueError("synthetic spec counts must be positive")
        if self.shift < 0 or self.noise < 0:
            raise ValueError("shift and noise must be nonnegative")
        if self.task_domains is not None and len(self.task_domains) != self.T:
            raise ValueError("task_domains needs one entry per task")
        if any(not 0 <= t < self.T for t in self.unrelated_tasks or []):
            raise ValueError("unrelated_tasks must index existing tasks")
        if self.kind == "regression" and self.d % 2:
            raise ValueError("rotation regression needs an even feature dimension (2-D points)")

    @classmethod
    def from_file(cls, path) -> SyntheticSpec:
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, SyntheticSpec] = {
    "default": SyntheticSpec(),
    "planted": SyntheticSpec(T=3, task_domains=[0, 0, 0], unrelated_tasks=[2]),
    "rotation": SyntheticSpec(kind="regression", T=5, C=10, d=16, noise=0.05, split=0.1),
}


def resolve_synthetic(name_or_path) -> SyntheticSpec:
    if isinstance(name_or_path, SyntheticSpec):
        return name_or_path
    if isinstance(name_or_path, dict):
        return SyntheticSpec(**name_or_path)
    key = str(name_or_path)
    if key in PRESETS:
        return replace(PRESETS[key])
    path = Path(key)
    if path.exists():
        return SyntheticSpec.from_file(path)
    raise ValueError(f"unknown synthetic spec {key!r}; presets: {', '.join(PRESETS)}")


def _random_rotation_generator(rng: np.random.Generator, d: int) -> np.ndarray:
    """Skew-symmetric generator whose top rotation rate is 1 rad per unit angle."""
    b = rng.standard_normal((d, d))
    a = b - b.T
    return a / np.max(np.abs(np.linalg.eigvals(a)))


def domain_transform(spec: SyntheticSpec, gen: np.ndarray, direction: np.ndarray, domain: int):
    mag = spec.shift * domain
    rot = expm(gen * (mag * spec.rotation_scale)) if mag else np.eye(spec.d)
    return rot, direction * (mag * spec.translation_scale)


def gen_synthetic_classification(spec: SyntheticSpec, seed: int | None = None) -> FeatureDataset:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    means = rng.standard_normal((spec.C, spec.d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    gen = _random_rotation_generator(rng, spec.d)
    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)
    domains = spec.task_domains if spec.task_domains is not None else list(range(spec.T))
    xs, tasks, ys = [], [], []
    for t in range(spec.T):
        rot, offset = domain_transform(spec, gen, direction, domains[t])
        base = means
        if t in (spec.unrelated_tasks or []):
            base = rng.standard_normal((spec.C, spec.d))
            base /= np.linalg.norm(base, axis=1, keepdims=True)
        task_means = base @ rot.T + offset
        for c in range(spec.C):
            n = spec.samples_per_class
            xs.append(task_means[c] + spec.noise * rng.standard_normal((n, spec.d)))
            tasks.append(np.full(n, t))
            ys.append(np.full(n, c))
    return FeatureDataset(np.concatenate(xs), np.concatenate(tasks), np.concatenate(ys), spec.T, spec.C)


ANGLE_STEP = 10.0


def rotate_points(flat: np.ndarray, degrees) -> np.ndarray:
    """Rotate 2-D point sets stored flattened as ``[x0, y0, x1, y1, ...]``."""
    flat = np.asarray(flat, dtype=np.float64)
    th = np.deg2rad(np.asarray(degrees, dtype=np.float64))
    pts = flat.reshape(flat.shape[:-1] + (-1, 2))
    c, s = np.cos(th)[..., None], np.sin(th)[..., None]
    x, y = pts[..., 0], pts[..., 1]
    out = np.stack([c * x - s * y, s * x + c * y], axis=-1)
    return out.reshape(flat.shape)


def gen_rotated_regression(spec: SyntheticSpec, seed: int | None = None) -> FeatureDataset:
    """Rotation-angle regression: targets in degrees ``0, 10, ..., 10 * (C - 1)``."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n_pts = spec.d // 2
    template = rng.standard_normal((n_pts, 2))
    angles = ANGLE_STEP * np.arange(spec.C)
    xs, tasks, ys = [], [], []
    for t in range(spec.T):
        shape = template + spec.shape_spread * rng.standard_normal((n_pts, 2))
        shape -= shape.mean(axis=0)
        shape /= np.sqrt((shape**2).sum(axis=1).mean())
        base = shape.reshape(-1)
        for a in angles:
            n = spec.samples_per_class
            clean = rotate_points(np.broadcast_to(base, (n, spec.d)), np.full(n, a))
            xs.append(clean + spec.noise * rng.standard_normal((n, spec.d)))
            tasks.append(np.full(n, t))
            ys.append(np.full(n, a))
    return FeatureDataset(
        np.concatenate(xs), np.concatenate(tasks), np.concatenate(ys), spec.T, spec.C, kind="regression"
    )


def generate(spec: SyntheticSpec, seed: int | None = None) -> FeatureDataset:
    if spec.kind == "regression":
        return gen_rotated_regression(spec, seed)
    return gen_synthetic_classification(spec, seed)
