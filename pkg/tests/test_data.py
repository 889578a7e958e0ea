import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmtl.data import (
    PRESETS,
    DatasetFormatError,
    FeatureDataset,
    SyntheticSpec,
    domain_transform,
    gen_rotated_regression,
    gen_synthetic_classification,
    load,
    n_train_for,
    resolve_synthetic,
    rotate_points,
    save,
    split,
)


def _write(tmp_path, text):
    p = tmp_path / "feats.csv"
    p.write_text(text)
    return p


def test_load_header_and_rows(tmp_path):
    rows = "\n".join(f"{i % 2},{i % 3},0.1,0.2,0.3,{i}" for i in range(6))
    ds = load(_write(tmp_path, "vmtl-features v1, T=2, C=3, d=4\n" + rows + "\n"))
    assert len(ds) == 6 and ds.d == 4 and ds.T == 2 and ds.C == 3
    assert ds.x[5, 3] == 5.0


def test_load_reports_bad_line(tmp_path):
    text = "vmtl-features v1, T=2, C=3, d=4\n0,1,1,2,3,4\n1,2,1,2,3\n"
    with pytest.raises(DatasetFormatError, match="line 3") as err:
        load(_write(tmp_path, text))
    assert err.value.line == 3


def test_load_empty_file(tmp_path):
    with pytest.raises(DatasetFormatError, match="missing header"):
        load(_write(tmp_path, ""))


def test_load_rejects_out_of_range_labels(tmp_path):
    with pytest.raises(DatasetFormatError, match="label"):
        load(_write(tmp_path, "vmtl-features v1, T=1, C=2, d=1\n0,2,0.5\n"))
    with pytest.raises(DatasetFormatError, match="task id"):
        load(_write(tmp_path, "vmtl-features v1, T=1, C=2, d=1\n1,0,0.5\n"))


def test_save_load_roundtrip(tmp_path):
    ds = gen_synthetic_classification(SyntheticSpec(T=2, C=3, d=4, samples_per_class=3))
    save(ds, tmp_path / "a.csv")
    back = load(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    reg = gen_rotated_regression(SyntheticSpec(kind="regression", T=2, C=3, d=4, samples_per_class=2))
    save(reg, tmp_path / "r.csv")
    back = load(tmp_path / "r.csv")
    assert back.regression
    np.testing.assert_array_equal(back.y, reg.y)


def test_split_counts():
    ds = FeatureDataset(np.zeros((100, 2)), np.zeros(100), np.zeros(100), T=1, C=1)
    train, test = split(ds, 0.05, seed=0)
    assert len(train) == 5 and len(test) == 95


def test_office_home_shaped_split():
    spec = SyntheticSpec(T=4, C=65, d=4, samples_per_class=60)
    train, _ = split(gen_synthetic_classification(spec), 0.05, seed=1)
    counts = np.bincount(train.task * 65 + train.y)
    assert np.all(counts == 3)


def test_split_deterministic_per_seed():
    ds = FeatureDataset(np.arange(2000.0).reshape(1000, 2), np.zeros(1000), np.zeros(1000), T=1, C=1)
    a, _ = split(ds, 0.1, seed=3)
    b, _ = split(ds, 0.1, seed=3)
    c, _ = split(ds, 0.1, seed=4)
    np.testing.assert_array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)


def test_split_fraction_validated():
    ds = FeatureDataset(np.zeros((4, 1)), np.zeros(4), np.zeros(4), T=1, C=1)
    with pytest.raises(ValueError):
        split(ds, 1.0, seed=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.floats(0.001, 0.999))
def test_train_count_bounds(n, frac):
    k = n_train_for(n, frac)
    assert 1 <= k <= n
    assert k >= frac * n - 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 0.9))
def test_split_partitions_every_cell(seed, frac):
    ds = gen_synthetic_classification(SyntheticSpec(T=2, C=3, d=2, samples_per_class=7))
    train, test = split(ds, frac, seed)
    assert len(train) + len(test) == len(ds)
    both = np.concatenate([train.x, test.x])
    assert np.unique(both, axis=0).shape[0] == len(ds)
    assert set(zip(train.task.tolist(), train.y.tolist())) == {(t, c) for t in range(2) for c in range(3)}


def test_zero_shift_tasks_identically_distributed():
    spec = SyntheticSpec(shift=0.0)
    rot, offset = domain_transform(spec, np.ones((spec.d, spec.d)), np.ones(spec.d), 3)
    np.testing.assert_array_equal(rot, np.eye(spec.d))
    np.testing.assert_array_equal(offset, 0.0)
    ds = gen_synthetic_classification(SyntheticSpec(shift=0.0, noise=0.05, samples_per_class=200))
    means = np.array([[ds.x[(ds.task == t) & (ds.y == c)].mean(0) for c in range(ds.C)] for t in range(ds.T)])
    assert np.abs(means - means[0]).max() < 0.05


def test_record_count():
    spec = SyntheticSpec(T=3, C=4, samples_per_class=7)
    assert len(gen_synthetic_classification(spec)) == 3 * 4 * 7


def test_nearest_centroid_oracle_is_perfect_without_noise_or_shift():
    ds = gen_synthetic_classification(SyntheticSpec(shift=0.0, noise=1e-6))
    centroids = np.array([ds.x[ds.y == c].mean(0) for c in range(ds.C)])
    pred = np.argmin(((ds.x[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == ds.y) == 1.0


def test_domains_shift_with_index():
    spec = SyntheticSpec(noise=0.0, samples_per_class=1)
    ds = gen_synthetic_classification(spec)
    base = ds.x[ds.task == 0]
    dist = [np.linalg.norm(ds.x[ds.task == t] - base) for t in range(ds.T)]
    assert dist[0] == 0 and all(a < b for a, b in zip(dist, dist[1:]))


def test_unrelated_task_draws_own_means():
    ds = gen_synthetic_classification(resolve_synthetic("planted"), seed=0)
    m = lambda t: np.array([ds.x[(ds.task == t) & (ds.y == c)].mean(0) for c in range(ds.C)])
    twin_gap = np.abs(m(0) - m(1)).max()
    other_gap = np.abs(m(0) - m(2)).max()
    assert twin_gap < 0.2 < other_gap


def test_rotation_identity_angle():
    spec = SyntheticSpec(kind="regression", T=2, C=10, d=8, noise=0.0, samples_per_class=3)
    ds = gen_rotated_regression(spec)
    zero = ds.x[(ds.task == 1) & (ds.y == 0)]
    np.testing.assert_array_equal(zero, np.tile(zero[0], (3, 1)))
    forty = ds.x[(ds.task == 1) & (ds.y == 40)]
    np.testing.assert_allclose(rotate_points(forty, -40.0), zero, atol=1e-12)


def test_rotation_targets_ten_levels():
    ds = gen_rotated_regression(PRESETS["rotation"])
    np.testing.assert_array_equal(np.unique(ds.y), np.arange(0, 100, 10))
    assert ds.regression and ds.T == 5


@settings(max_examples=50, deadline=None)
@given(st.floats(-360, 360), st.integers(0, 2**31))
def test_rotation_inverse(theta, seed):
    pts = np.random.default_rng(seed).standard_normal(8)
    np.testing.assert_allclose(rotate_points(rotate_points(pts, theta), -theta), pts, atol=1e-10)


def test_rotation_preset_six_train_samples_per_angle():
    spec = PRESETS["rotation"]
    train, _ = split(gen_rotated_regression(spec), spec.split, seed=0)
    levels, counts = np.unique(train.task * 1000 + train.y, return_counts=True)
    assert len(levels) == 50 and np.all(counts == 6)


def test_default_preset_three_train_samples_per_class():
    spec = PRESETS["default"]
    train, _ = split(gen_synthetic_classification(spec), spec.split, seed=0)
    assert (spec.T, spec.C, spec.d, spec.shift) == (4, 5, 16, 1.0)
    assert np.all(np.bincount(train.task * spec.C + train.y) == 3)


def test_resolve_synthetic_sources(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text('{"T": 2, "C": 3}')
    assert resolve_synthetic(str(p)).T == 2
    assert resolve_synthetic({"C": 7}).C == 7
    with pytest.raises(ValueError, match="presets"):
        resolve_synthetic("no-such-spec")


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(T=0)
    with pytest.raises(ValueError):
        SyntheticSpec(kind="regression", d=5)


def test_strata_for_regression():
    ds = FeatureDataset(np.zeros((4, 1)), np.zeros(4), np.array([0.0, 10.0, 10.0, 20.0]), T=1, C=3, kind="regression")
    ids, n = ds.strata()
    assert n == 3 and ids.tolist() == [0, 1, 1, 2]
