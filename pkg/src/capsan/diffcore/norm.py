"""Normalization layers: spectral weight normalization, class-conditional
batch normalization, and per-position feature (RMS) normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateOperator, ShapeMismatch, UnknownClass
from . import tensor as T
from .tensor import Tensor, as_tensor, embedding, make_op


@dataclass
class SpectralState:
    """Persistent left singular vector estimate for one weight matrix."""

    u: np.ndarray
    iterations_per_step: int = 1

    @classmethod
    def for_matrix(cls, rows: int, rng: np.random.Generator, iterations_per_step: int = 1):
        u = rng.standard_normal(rows)
        return cls(u=u / np.linalg.norm(u), iterations_per_step=iterations_per_step)


def _as_matrix(w: Tensor) -> np.ndarray:
    return w.data.reshape(w.shape[0], -1)


def power_iterate(state: SpectralState, w_mat: np.ndarray, iterations: int) -> np.ndarray:
    """Run power iterations in place; returns the right vector v."""
    u = state.u
    v = w_mat.T @ u
    v /= np.linalg.norm(v) + 1e-12
    for _ in range(iterations):
        u = w_mat @ v
        u /= np.linalg.norm(u) + 1e-12
        v = w_mat.T @ u
        v /= np.linalg.norm(v) + 1e-12
    state.u = u
    return v


def converge_spectral(state: SpectralState, w: Tensor, iterations: int = 50) -> None:
    """Warm a state up to convergence (used at build time and in tests)."""
    power_iterate(state, _as_matrix(w), iterations)


def spectral_normalize(w: Tensor, state: SpectralState, update: bool = True) -> Tensor:
    """Return w / sigma_hat with sigma_hat the power-iteration top singular value.

    ``update`` runs ``state.iterations_per_step`` fresh iterations (training
    mode); with ``update=False`` the stored ``u`` is used as-is, which makes
    repeated evaluation pure. The division is differentiable through
    sigma_hat with u, v held constant (the standard treatment).
    """
    w = as_tensor(w)
    w_mat = _as_matrix(w)
    if np.linalg.norm(w_mat) <= 1e-12:
        raise DegenerateOperator("cannot spectrally normalize a (near-)zero operator")
    if state.u.shape != (w.shape[0],):
        raise ShapeMismatch(
            f"spectral state has {state.u.shape[0]} rows, weight has {w.shape[0]}"
        )
    if update:
        v = power_iterate(state, w_mat, state.iterations_per_step)
    else:
        u = state.u
        v = w_mat.T @ u
        v /= np.linalg.norm(v) + 1e-12
    u = state.u

    # sigma = u^T W v built from differentiable ops so grads flow through it
    flat = T.reshape(w, (w.shape[0], -1))
    sigma = T.matmul(T.matmul(Tensor(u[None, :]), flat), Tensor(v[:, None]))
    return T.reshape(div_by_scalar(w, sigma), w.shape)


def div_by_scalar(w: Tensor, s: Tensor) -> Tensor:
    """w / s for a 1x1 tensor s, broadcasting over w's shape."""
    out = w.data / s.data.reshape(())

    def back(g):
        return g / s.data.reshape(()), np.array([[-(g * out).sum() / s.data.reshape(())]])

    return make_op(out, (w, s), back, "div_by_scalar")


def estimate_sigma(w_data: np.ndarray, iterations: int = 100) -> float:
    """Standalone power-iteration estimate of the top singular value."""
    mat = w_data.reshape(w_data.shape[0], -1)
    state = SpectralState.for_matrix(mat.shape[0], np.random.default_rng(0))
    v = power_iterate(state, mat, iterations)
    return float(state.u @ mat @ v)


def cond_batchnorm(x, labels, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel batch standardization, then per-sample class affine.

    ``x`` is NC or NCHW; ``gamma``/``beta`` are [num_classes, C] tables and
    each sample uses the row of its own label. Zero-variance channels are
    epsilon-guarded rather than an error (constant activations happen early
    in training).
    """
    x = as_tensor(x)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"cond_batchnorm expects NC or NCHW input, got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    num_classes = gamma.shape[0]
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= num_classes):
        raise UnknownClass(f"label out of range for {num_classes} classes")

    reduce_axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mu = T.mean(x, axis=reduce_axes, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=reduce_axes, keepdims=True)
    xhat = centered * T.power(var + eps, -0.5)

    g_rows = embedding(gamma, labels)  # [N, C]
    b_rows = embedding(beta, labels)
    if x.ndim == 4:
        g_rows = T.reshape(g_rows, (x.shape[0], x.shape[1], 1, 1))
        b_rows = T.reshape(b_rows, (x.shape[0], x.shape[1], 1, 1))
    return xhat * g_rows + b_rows


def pixel_feature_norm(x) -> Tensor:
    """Divide each spatial position's channel vector by its RMS (+1e-8)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeMismatch(f"pixel_feature_norm expects NCHW with C >= 1, got {x.shape}")
    ms = T.mean(x * x, axis=1, keepdims=True)
    return x * T.power(ms + 1e-8, -0.5)
