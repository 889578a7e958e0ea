import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vmtl import diffcore as dc
from vmtl.diffcore import ShapeError, Tensor
from vmtl.distributions import (
    DiagGaussian,
    GumbelMixing,
    MixturePrior,
    draw_gumbel,
    gumbel_weights,
    kl_diag,
    kl_mixture_upper,
    kl_standard_normal,
    off_diagonal_index,
    rsample,
    sample_gumbel,
)

EULER_GAMMA = 0.5772156649015329


def test_rsample_zero_noise_returns_mean():
    q = DiagGaussian(np.array([0.3, -1.0]), np.array([0.5, -2.0]))
    np.testing.assert_array_equal(rsample(q, np.zeros(2)).data, [0.3, -1.0])


def test_rsample_unit_case():
    q = DiagGaussian(np.zeros(1), np.zeros(1))
    assert rsample(q, np.ones(1)).data[0] == 1.0


def test_rsample_moments():
    rng = np.random.default_rng(7)
    q = DiagGaussian(np.array([2.0]), np.array([math.log(4.0)]))
    s = rsample(q, rng.standard_normal((10**6, 1))).data[:, 0]
    assert abs(s.mean() - 2.0) < 0.01
    assert abs(s.var() - 4.0) < 0.05


def test_rsample_shape_checked():
    q = DiagGaussian(np.zeros(3), np.zeros(3))
    with pytest.raises(ShapeError):
        rsample(q, np.zeros(2))


def test_diag_gaussian_shape_mismatch():
    with pytest.raises(ShapeError):
        DiagGaussian(np.zeros(3), np.zeros(2))


def test_sample_gumbel_closed_forms():
    assert sample_gumbel(math.exp(-1)) == pytest.approx(0.0, abs=1e-15)
    assert sample_gumbel(math.exp(-math.e)) == pytest.approx(-1.0, abs=1e-12)


def test_sample_gumbel_rejects_boundary():
    with pytest.raises(ValueError):
        sample_gumbel(np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        sample_gumbel(0.0)


def test_gumbel_mean_is_euler_gamma():
    g = draw_gumbel(np.random.default_rng(3), 10**6)
    assert abs(g.mean() - EULER_GAMMA) < 0.01


def test_gumbel_weights_equal_logits_uniform():
    for tau in (0.1, 1.0, 7.0):
        w = gumbel_weights(np.zeros(4), tau, np.zeros(4)).data
        np.testing.assert_allclose(w, 0.25, atol=1e-15)


def test_gumbel_weights_two_logits():
    w = gumbel_weights(np.array([1.0, 0.0]), 1.0, np.zeros(2)).data
    np.testing.assert_allclose(w, [0.73106, 0.26894], atol=1e-5)


def test_gumbel_weights_rejects_bad_temperature():
    with pytest.raises(ValueError):
        gumbel_weights(np.zeros(2), 0.0, np.zeros(2))


def test_kl_identical_is_zero():
    q = DiagGaussian(np.array([0.4, -1.0, 2.0]), np.array([0.1, -0.3, 1.2]))
    assert kl_diag(q, q).item() == pytest.approx(0.0, abs=1e-14)


def test_kl_unit_shift():
    q = DiagGaussian(np.ones(1), np.zeros(1))
    assert kl_diag(q, DiagGaussian.standard(1)).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_variance_four():
    q = DiagGaussian(np.zeros(1), np.array([math.log(4.0)]))
    assert kl_diag(q, DiagGaussian.standard(1)).item() == pytest.approx(0.80685, abs=1e-5)


def test_kl_standard_normal_agrees_with_kl_diag():
    rng = np.random.default_rng(0)
    q = DiagGaussian(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))
    np.testing.assert_allclose(
        kl_standard_normal(q).data, kl_diag(q, DiagGaussian.standard((3, 5))).data, atol=1e-12
    )


def test_mixture_upper_all_components_equal_q():
    q = DiagGaussian(np.array([0.2, 0.5]), np.array([-0.4, 0.3]))
    prior = MixturePrior([q, q, q], np.array([0.2, 0.3, 0.5]))
    assert kl_mixture_upper(q, prior).item() == pytest.approx(0.0, abs=1e-14)


def test_mixture_upper_degenerate_weights():
    rng = np.random.default_rng(4)
    q = DiagGaussian(rng.standard_normal(3), rng.standard_normal(3))
    p1 = DiagGaussian(rng.standard_normal(3), rng.standard_normal(3))
    p2 = DiagGaussian(rng.standard_normal(3), rng.standard_normal(3))
    got = kl_mixture_upper(q, MixturePrior([p1, p2], np.array([1.0, 0.0]))).item()
    assert got == pytest.approx(kl_diag(q, p1).item(), abs=1e-14)


def test_mixture_weight_count_checked():
    q = DiagGaussian(np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        MixturePrior([q, q], np.array([1.0]))


def test_log_variance_is_clamped():
    q = DiagGaussian(np.zeros(1), np.array([-500.0]))
    kl = kl_diag(q, DiagGaussian.standard(1)).item()
    assert math.isfinite(kl)
    assert kl == pytest.approx(0.5 * (math.exp(-30) + 30 - 1))


def test_off_diagonal_index():
    np.testing.assert_array_equal(off_diagonal_index(3), [[1, 2], [0, 2], [0, 1]])


def test_mixing_init_uniform_and_expected_rows():
    mix = GumbelMixing(4)
    e = mix.expected()
    assert np.all(np.isnan(np.diag(e)))
    off = e[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, 1 / 3, atol=1e-15)


def test_mixing_weights_receive_gradient():
    mix = GumbelMixing(3)
    w = mix.weights(0.5, draw_gumbel(np.random.default_rng(0), (3, 2)))
    (g,) = dc.backward(dc.sum_(w * np.array([[1.0, 2.0]] * 3)), [mix.logits])
    assert np.any(g != 0)
    np.testing.assert_array_equal(np.diag(g), 0.0)


def test_mixing_needs_two_tasks():
    with pytest.raises(ValueError):
        GumbelMixing(1)


# ---------------------------------------------------------------------------
# properties

small = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (4,), elements=small),
    hnp.arrays(np.float64, (4,), elements=small),
    hnp.arrays(np.float64, (4,), elements=small),
    hnp.arrays(np.float64, (4,), elements=small),
)
def test_kl_nonnegative(mq, lq, mp, lp):
    assert kl_diag(DiagGaussian(mq, lq), DiagGaussian(mp, lp)).item() >= -1e-12


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float64, (5,), elements=st.floats(-20, 20, allow_nan=False)),
    st.floats(0.05, 5.0),
    st.integers(0, 2**32 - 1),
)
def test_gumbel_weights_on_simplex(logits, tau, seed):
    w = gumbel_weights(logits, tau, draw_gumbel(np.random.default_rng(seed), 5)).data
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-9


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(-10, 10, allow_nan=False)))
def test_expected_mixing_rows_sum_to_one(logits):
    mix = GumbelMixing(3, logits=logits)
    e = mix.expected()
    np.testing.assert_allclose(np.nansum(e, axis=1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 2), elements=small),
    hnp.arrays(np.float64, (3,), elements=st.floats(0.01, 1.0)),
)
def test_mixture_upper_is_convex_combination(means, raw_w):
    q = DiagGaussian(np.zeros(2), np.zeros(2))
    comps = [DiagGaussian(m, np.zeros(2)) for m in means]
    w = raw_w / raw_w.sum()
    kls = [kl_diag(q, c).item() for c in comps]
    got = kl_mixture_upper(q, MixturePrior(comps, Tensor(w))).item()
    assert min(kls) - 1e-12 <= got <= max(kls) + 1e-12
