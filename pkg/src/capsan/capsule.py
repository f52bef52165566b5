"""Capsule primitives: squash, prediction vectors, routing-by-agreement.

Routing follows the agreement scheme: logits start at zero each forward
pass, coupling coefficients are the softmax of the logits over output
capsules, and each iteration reinforces couplings whose prediction vectors
agree with the emerging output. Coupling coefficients are treated as
constants during the backward pass; gradients flow only through the final
weighted sum and squash.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, as_tensor, make_op
from .errors import ShapeMismatch

@dataclass
class CapsuleStack:
    """Transformation weights and routing depth for one capsule layer.

    W has shape [in_caps, out_caps, out_dim, in_dim].
    """

    W: Tensor
    routing_iters: int = 3

    def __post_init__(self):
        if self.routing_iters < 1:
            raise ValueError(f"routing_iters must be >= 1, got {self.routing_iters}")
        if self.W.ndim != 4:
            raise ShapeMismatch(f"capsule weights must be 4-d, got shape {self.W.shape}")

    @classmethod
    def init(cls, in_caps: int, out_caps: int, out_dim: int, in_dim: int,
             rng: np.random.Generator, routing_iters: int = 3, scale: float | None = None):
        if scale is None:
            scale = 1.0 / np.sqrt(in_dim)
        w = rng.standard_normal((in_caps, out_caps, out_dim, in_dim)) * scale
        return cls(W=dc.parameter(w), routing_iters=routing_iters)


@dataclass
class CouplingMatrix:
    """Nonnegative routing weights f[i, j]; each input row sums to 1."""

    f: np.ndarray

    def __post_init__(self):
        rows = self.f.sum(axis=-1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("coupling rows must sum to 1")


def squash(s, axis: int = -1) -> Tensor:
    """Shrink vectors along ``axis`` to length ||s||^2/(1+||s||^2) < 1,
    preserving orientation.

    Written as s*||s||/(1+||s||^2), which has no division by the norm;
    the zero vector maps to zero exactly.
    """
    s = as_tensor(s)
    n2 = dc.sum(s * s, axis=axis, keepdims=True)
    n = dc.sqrt_guarded(n2)
    return s * (n * dc.power(1.0 + n2, -1.0))


def squash_np(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array squash used on the no-grad routing path."""
    n2 = (s * s).sum(axis=axis, keepdims=True)
    return s * np.sqrt(n2) / (1.0 + n2)


def predict_vectors(v_in, stack: CapsuleStack) -> Tensor:
    """u_hat[..., i, j, :] = W[i, j] @ v_in[..., i, :].

    ``v_in`` is [in_caps, in_dim] or batched [B, in_caps, in_dim]; the
    result gains an out_caps axis: [..., in_caps, out_caps, out_dim].
    """
    v_in = as_tensor(v_in)
    W = stack.W
    in_caps, out_caps, out_dim, in_dim = W.shape
    single = v_in.ndim == 2
    if single:
        v_in = dc.reshape(v_in, (1,) + v_in.shape)
    if v_in.ndim != 3 or v_in.shape[1] != in_caps or v_in.shape[2] != in_dim:
        raise ShapeMismatch(
            f"expected input capsules [batch, {in_caps}, {in_dim}], got {v_in.shape}"
        )

    out = np.einsum("ijod,bid->bijo", W.data, v_in.data, optimize=True)

    def back(g):
        dv = np.einsum("bijo,ijod->bid", g, W.data, optimize=True)
        dW = np.einsum("bijo,bid->ijod", g, v_in.data, optimize=True)
        return dv, dW

    u_hat = make_op(out, (v_in, W), back, "predict_vectors")
    return dc.reshape(u_hat, u_hat.shape[1:]) if single else u_hat


def combine_with_coupling(u_hat, coupling: np.ndarray) -> Tensor:
    """Differentiable tail of routing: v_j = squash(sum_i f_ij u_hat_ij)
    with the coupling held constant."""
    u_hat = as_tensor(u_hat)
    single = u_hat.ndim == 3
    if single:
        u_hat = dc.reshape(u_hat, (1,) + u_hat.shape)
    c = np.asarray(coupling, dtype=np.float64)
    if c.ndim == 2:
        c = np.broadcast_to(c, (u_hat.shape[0],) + c.shape)
    if c.shape != u_hat.shape[:3]:
        raise ShapeMismatch(f"coupling shape {c.shape} does not match u_hat {u_hat.shape}")

    s = make_op(
        np.einsum("bijo,bij->bjo", u_hat.data, c, optimize=True),
        (u_hat,),
        lambda g: (np.einsum("bjo,bij->bijo", g, c, optimize=True),),
        "coupled_sum",
    )
    v = squash(s, axis=-1)
    return dc.reshape(v, v.shape[1:]) if single else v


def _routing_coupling(u_hat: np.ndarray, routing_iters: int) -> np.ndarray:
    """Numpy-only agreement iterations; returns the final coupling [.., i, j]."""
    b = np.zeros(u_hat.shape[:-1])
    f = None
    for it in range(routing_iters):
        e = np.exp(b - b.max(axis=-1, keepdims=True))
        f = e / e.sum(axis=-1, keepdims=True)
        if it == routing_iters - 1:
            break
        s = np.einsum("...ijo,...ij->...jo", u_hat, f, optimize=True)
        v = squash_np(s, axis=-1)
        b = b + np.einsum("...ijo,...jo->...ij", u_hat, v, optimize=True)
    return f


def route(u_hat, routing_iters: int = 3, coupling=None) -> tuple[Tensor, CouplingMatrix]:
    """Routing-by-agreement over prediction vectors.

    ``u_hat`` is [in_caps, out_caps, out_dim] or batched with a leading
    axis. Returns the output capsules [..., out_caps, out_dim] and the
    coupling actually used to produce them (rows sum to 1).

    Passing ``coupling`` skips the agreement iterations and reuses the
    given weights; gradient checks pin the coupling this way, since the
    backward pass holds it constant.
    """
    if routing_iters < 1:
        raise ValueError(f"routing_iters must be >= 1, got {routing_iters}")
    u_hat = as_tensor(u_hat)
    if u_hat.ndim not in (3, 4):
        raise ShapeMismatch(f"u_hat must be [.., in, out, dim], got shape {u_hat.shape}")
    if coupling is None:
        f = _routing_coupling(u_hat.data, routing_iters)
    else:
        f = coupling.f if isinstance(coupling, CouplingMatrix) else np.asarray(coupling)
    v = combine_with_coupling(u_hat, f)
    return v, CouplingMatrix(f=f)


def capsule_lengths(v_out) -> Tensor:
    """Euclidean norm of each capsule vector (last axis)."""
    v_out = as_tensor(v_out)
    return dc.sqrt_guarded(dc.sum(v_out * v_out, axis=-1))
