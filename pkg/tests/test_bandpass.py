import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from defocus import autodiff as ad
from defocus.autodiff import Tensor
from defocus.bandpass import (
    BandpassParams, analytic_response, decay_init, default_omegas, effective_decay, numerical_response,
    regime_classify, rope_frequencies, rotate,
)
from defocus.errors import ConfigurationError, DomainError

from oracles import numeric_grad, rotated_inner, transfer_magnitude

GRID = 2 * np.pi / 512


def _params(lam_hat, theta=None, head_dim=2):
    lam_hat = np.atleast_1d(np.asarray(lam_hat, dtype=float))
    h = lam_hat.size
    theta = np.zeros((h, head_dim // 2)) if theta is None else np.asarray(theta, dtype=float).reshape(h, -1)
    return BandpassParams(Tensor(lam_hat, requires_grad=True), Tensor(theta), head_dim, h)


def test_effective_decay_examples():
    assert effective_decay(_params(0.0)).data.tolist() == [-1.0]
    np.testing.assert_allclose(effective_decay(_params(np.log(2.0))).data, [-2.0], rtol=1e-15)


def test_effective_decay_gradient():
    p = _params(0.5)
    (g,) = ad.grad(ad.sum(effective_decay(p)), [p.lambda_hat])
    num = numeric_grad(lambda x: float(-np.exp(x[0])), np.array([0.5]))
    assert abs(g[0] - num[0]) / abs(num[0]) < 1e-6


@given(st.floats(-30, 30))
def test_effective_decay_is_negative(lam_hat):
    assert effective_decay(_params(lam_hat)).data[0] < 0


def test_params_validation():
    with pytest.raises(ConfigurationError):
        BandpassParams.init(2, 7)
    with pytest.raises(ConfigurationError):
        BandpassParams(np.zeros(2), np.zeros((2, 3)), 8, 2)
    with pytest.raises(ConfigurationError):
        BandpassParams(np.zeros(3), np.zeros((2, 4)), 8, 2)


def test_init_spreads_decays_over_range():
    per_step = np.exp(-np.exp(decay_init(4)))
    np.testing.assert_allclose(per_step, np.linspace(0.5, 0.99, 4), rtol=1e-12)
    np.testing.assert_allclose(rope_frequencies(8), 10000.0 ** (-np.arange(4) / 4))


def test_rotate_examples():
    np.testing.assert_array_equal(rotate([1.0, 0.0], 0, [np.pi / 2]).data, [1.0, 0.0])
    np.testing.assert_allclose(rotate([1.0, 0.0], 1, [np.pi / 2]).data, [0.0, 1.0], atol=1e-16)


def test_rotate_odd_dim():
    with pytest.raises(ConfigurationError):
        rotate(np.ones(3), 1, [0.1])


vec = arrays(np.float64, 8, elements=st.floats(-3, 3))
angles = arrays(np.float64, 4, elements=st.floats(-np.pi, np.pi))


@given(vec, vec, angles, st.integers(-50, 50), st.integers(-50, 50))
def test_relative_position_identity(q, k, theta, t, s):
    lhs = float(rotate(q, t, theta).data @ rotate(k, s, theta).data)
    rhs = float(rotate(q, t - s, theta).data @ k)
    assert abs(lhs - rhs) < 1e-12 * max(1.0, np.abs(q).sum() * np.abs(k).sum())
    assert abs(lhs - rotated_inner(q, k, theta, t, s)) < 1e-11


@given(vec, angles, st.integers(-100, 100), st.integers(-100, 100))
def test_rotate_composes_and_preserves_pair_norms(x, theta, s, t):
    once = rotate(x, s + t, theta).data
    twice = rotate(rotate(x, s, theta), t, theta).data
    np.testing.assert_allclose(twice, once, atol=1e-11)
    np.testing.assert_allclose(np.hypot(once[0::2], once[1::2]), np.hypot(x[0::2], x[1::2]), atol=1e-12)


def test_rotate_position_vector_indexes_sequence_axis(rng):
    x = rng.standard_normal((2, 5, 4))
    theta = rng.uniform(0, 1, 2)
    out = rotate(x, np.arange(5), theta).data
    for t in range(5):
        np.testing.assert_allclose(out[:, t], rotate(x[:, t], t, theta).data, atol=1e-15)


def test_analytic_examples():
    assert analytic_response(-1.0, 0.0, [0.0]).magnitudes[0] == 1.0
    assert analytic_response(-1.0, 2.0, [2.0]).magnitudes[0] == 1.0
    np.testing.assert_allclose(analytic_response(-2.0, 0.0, [2.0]).magnitudes, [0.5 / np.sqrt(2)], rtol=1e-15)


def test_analytic_domain_error():
    for lam in (0.0, 0.5):
        with pytest.raises(DomainError):
            analytic_response(lam, 0.0)
        with pytest.raises(DomainError):
            numerical_response(lam, 0.0)


@given(st.floats(-3, -0.05), st.integers(-2048, 2048), st.integers(0, 3072))
def test_analytic_symmetric_about_center(lam, theta_k, delta_k):
    # dyadic grid so that theta +/- delta is exact in floating point
    theta, delta = theta_k / 1024, delta_k / 1024
    r = analytic_response(lam, theta, [theta + delta, theta - delta]).magnitudes
    assert r[0] == r[1]


def test_grid_contains_zero():
    om = default_omegas()
    assert om.size == 512 and 0.0 in om and om[0] == -np.pi and om[-1] < np.pi


def test_numerical_low_pass_peak():
    assert abs(numerical_response(-1.0, 0.0).peak_omega) <= GRID


def test_numerical_matches_brute_force_dft():
    om = default_omegas()
    r = numerical_response(-1.0, 1.5, 256, om)
    np.testing.assert_allclose(r.magnitudes, transfer_magnitude(-1.0, 1.5, 256, om), rtol=1e-12)
    assert r.peak_omega == om[np.argmin(np.abs(om - 1.5))]


def test_numerical_and_analytic_shapes_agree():
    lam, theta = -0.5, 1.0
    om = default_omegas()
    sel = np.abs(om - theta) <= abs(lam)
    ratio = numerical_response(lam, theta, 256, om).magnitudes[sel] / analytic_response(lam, theta, om).magnitudes[sel]
    assert ratio.max() / ratio.min() < 1.05


def test_truncation_warning():
    short = numerical_response(-0.01, 0.0, kernel_len=64)
    assert short.metadata["truncated"] and "warning" in short.metadata
    assert not numerical_response(-1.0, 0.0, kernel_len=64).metadata["truncated"]


@given(st.floats(-3, -0.2), st.floats(0, 2.5))
def test_peak_drift_between_kernel_lengths(lam, theta):
    a = numerical_response(lam, theta, 64).peak_omega
    b = numerical_response(lam, theta, 512).peak_omega
    assert abs(a - b) <= GRID + 1e-12


@given(st.floats(-3, -0.05), st.floats(-3, 3))
def test_magnitudes_positive_peak_near_center(lam, theta):
    r = numerical_response(lam, theta, 512)
    assert np.all(r.magnitudes > 0)
    assert abs(r.peak_omega - theta) <= GRID


def test_regimes():
    assert regime_classify(False, False) == "summation"
    assert regime_classify(True, False) == "low-pass"
    assert regime_classify(False, True) == "frequency-selector"
    assert regime_classify(True, True) == "bandpass"
