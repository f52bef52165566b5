"""Spectral, conditional-batch, and pixel-feature normalization."""

import numpy as np
import pytest

from capsan import diffcore as dc
from capsan.diffcore.norm import (
    SpectralState,
    cond_batchnorm,
    converge_spectral,
    estimate_sigma,
    pixel_feature_norm,
    power_iterate,
    spectral_normalize,
)
from capsan.errors import DegenerateOperator, ShapeMismatch, UnknownClass

from helpers import fd_check, rand_tensor


def test_power_iteration_matches_svd():
    rng = np.random.default_rng(0)
    for shape in [(4, 4), (6, 3), (3, 8), (16, 2)]:
        w = rng.standard_normal(shape)
        sigma_svd = np.linalg.svd(w, compute_uv=False)[0]
        assert abs(estimate_sigma(w) - sigma_svd) / sigma_svd < 1e-6


def test_spectral_normalize_scales_to_unit_sigma():
    rng = np.random.default_rng(1)
    w = dc.parameter(rng.standard_normal((5, 7)) * 3.0)
    state = SpectralState.for_matrix(5, rng)
    converge_spectral(state, w, iterations=200)
    out = spectral_normalize(w, state, update=False)
    assert abs(np.linalg.svd(out.data, compute_uv=False)[0] - 1.0) < 1e-8


def test_spectral_normalize_4d_kernel_reshapes():
    rng = np.random.default_rng(2)
    k = dc.parameter(rng.standard_normal((4, 3, 2, 2)))
    state = SpectralState.for_matrix(4, rng)
    converge_spectral(state, k, iterations=200)
    out = spectral_normalize(k, state, update=False)
    assert out.shape == k.shape
    sigma = np.linalg.svd(out.data.reshape(4, -1), compute_uv=False)[0]
    assert abs(sigma - 1.0) < 1e-8


def test_update_false_is_pure():
    rng = np.random.default_rng(3)
    w = dc.parameter(rng.standard_normal((4, 6)))
    state = SpectralState.for_matrix(4, rng)
    u_before = state.u.copy()
    a = spectral_normalize(w, state, update=False).data
    b = spectral_normalize(w, state, update=False).data
    assert np.array_equal(a, b)
    assert np.array_equal(state.u, u_before)


def test_update_true_advances_state():
    rng = np.random.default_rng(4)
    w = dc.parameter(rng.standard_normal((4, 6)))
    state = SpectralState.for_matrix(4, rng)
    u_before = state.u.copy()
    spectral_normalize(w, state, update=True)
    assert not np.array_equal(state.u, u_before)


def test_spectral_normalize_gradient():
    rng = np.random.default_rng(5)
    w = dc.parameter(rng.standard_normal((3, 5)))
    state = SpectralState.for_matrix(3, rng)
    converge_spectral(state, w, iterations=300)
    # with u,v effectively converged and frozen the op is differentiable
    fd_check(lambda m: dc.sum(spectral_normalize(m, state, update=False) ** 2), [w])


def test_spectral_errors():
    rng = np.random.default_rng(6)
    with pytest.raises(DegenerateOperator):
        spectral_normalize(dc.parameter(np.zeros((3, 3))), SpectralState.for_matrix(3, rng))
    w = dc.parameter(rng.standard_normal((4, 4)))
    with pytest.raises(ShapeMismatch):
        spectral_normalize(w, SpectralState.for_matrix(5, rng))


def _bn_ref(x, labels, gamma, beta, eps=1e-5):
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    g = gamma[labels]
    b = beta[labels]
    if x.ndim == 4:
        g = g[:, :, None, None]
        b = b[:, :, None, None]
    return xhat * g + b


@pytest.mark.parametrize("shape", [(6, 3), (4, 2, 3, 3)])
def test_cond_batchnorm_matches_reference(shape):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(shape)
    c = shape[1]
    labels = rng.integers(0, 3, size=shape[0])
    gamma = rng.standard_normal((3, c)) + 1.0
    beta = rng.standard_normal((3, c))
    got = cond_batchnorm(dc.tensor(x), labels, dc.tensor(gamma), dc.tensor(beta)).data
    assert np.allclose(got, _bn_ref(x, labels, gamma, beta), atol=1e-12)


def test_cond_batchnorm_standardizes():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((50, 4)) * 5.0 + 2.0
    labels = np.zeros(50, dtype=int)
    out = cond_batchnorm(dc.tensor(x), labels, dc.tensor(np.ones((1, 4))),
                         dc.tensor(np.zeros((1, 4)))).data
    assert np.allclose(out.mean(axis=0), 0.0, atol=1e-10)
    assert np.allclose(out.std(axis=0), 1.0, atol=1e-2)  # eps shifts variance slightly


def test_cond_batchnorm_uses_per_sample_rows():
    x = np.ones((2, 2))  # zero variance -> xhat == 0, output is just beta rows
    labels = np.array([0, 1])
    beta = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = cond_batchnorm(dc.tensor(x), labels, dc.tensor(np.ones((2, 2))),
                         dc.tensor(beta)).data
    assert np.allclose(out, beta)


def test_cond_batchnorm_gradients():
    rng = np.random.default_rng(9)
    x = rand_tensor(rng, (3, 2, 2, 2))
    gamma = dc.parameter(rng.standard_normal((2, 2)) + 1.0)
    beta = rand_tensor(rng, (2, 2))
    labels = np.array([0, 1, 0])
    fd_check(
        lambda a, g, b: dc.sum(cond_batchnorm(a, labels, g, b) ** 2),
        [x, gamma, beta],
    )


def test_cond_batchnorm_errors():
    x = dc.tensor(np.zeros((2, 3)))
    gamma = dc.tensor(np.ones((2, 3)))
    beta = dc.tensor(np.zeros((2, 3)))
    with pytest.raises(UnknownClass):
        cond_batchnorm(x, np.array([0, 5]), gamma, beta)
    with pytest.raises(ShapeMismatch):
        cond_batchnorm(x, np.array([0]), gamma, beta)  # label count mismatch
    with pytest.raises(ShapeMismatch):
        cond_batchnorm(dc.tensor(np.zeros((2, 3, 4))), np.array([0, 0]), gamma, beta)


def test_pixel_feature_norm_unit_rms():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 8, 3, 3)) * 4.0
    out = pixel_feature_norm(dc.tensor(x)).data
    rms = np.sqrt((out ** 2).mean(axis=1))
    assert np.allclose(rms, 1.0, atol=1e-6)


def test_pixel_feature_norm_gradient_and_errors():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, (2, 3, 2, 2))
    fd_check(lambda a: dc.sum(pixel_feature_norm(a) ** 3), [x])
    with pytest.raises(ShapeMismatch):
        pixel_feature_norm(dc.tensor(np.zeros((2, 3))))


def test_power_iterate_converges_known_matrix():
    # diag(3, 1): top singular direction is e1
    w = np.diag([3.0, 1.0])
    state = SpectralState(u=np.array([1.0, 1.0]) / np.sqrt(2))
    power_iterate(state, w, 100)
    assert np.allclose(np.abs(state.u), [1.0, 0.0], atol=1e-10)
