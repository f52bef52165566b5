"""Shared test oracles: finite differences and brute-force reference
implementations kept deliberately independent of the library code paths
(naive loops, no shared helpers)."""

from __future__ import annotations

import numpy as np

from capsan import diffcore as dc
from capsan.diffcore import Tensor


def fd_check(build, tensors, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare backward() gradients against central finite differences.

    ``build(*tensors)`` must return a scalar Tensor built from the given
    leaf tensors. Returns the worst symmetric relative error; asserts it
    stays under ``tol``.
    """
    loss = build(*tensors)
    dc.zero_grads(tensors)
    dc.backward(loss)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None, f"no gradient reached {t.name or t.shape}"
        flat = t.data.ravel()
        grad = t.grad.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = build(*tensors).item()
            flat[i] = keep - h
            down = build(*tensors).item()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            err = abs(grad[i] - numeric) / max(1e-6, abs(grad[i]) + abs(numeric))
            worst = max(worst, err)
    assert worst < tol, f"finite-difference mismatch: {worst:.3e} >= {tol:.0e}"
    return worst


def conv2d_ref(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    """Naive valid cross-correlation, NCHW x OIHW."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    x[b, ic, i * stride + u, j * stride + v]
                                    * k[oc, ic, u, v]
                                )
                    out[b, oc, i, j] = acc
    return out


def frac_conv2d_ref(x: np.ndarray, k: np.ndarray, up: int) -> np.ndarray:
    """Naive fractional-strided (transposed) convolution: scatter each
    input pixel through the kernel onto an up-sampled grid."""
    n, c, h, w = x.shape
    _, o, kh, kw = k.shape  # kernel is [in x out x kh x kw]
    oh = (h - 1) * up + kh
    ow = (w - 1) * up + kw
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for ic in range(c):
            for i in range(h):
                for j in range(w):
                    for oc in range(o):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, oc, i * up + u, j * up + v] += (
                                    x[b, ic, i, j] * k[ic, oc, u, v]
                                )
    return out


def squash_ref(s: np.ndarray) -> np.ndarray:
    """v = s * ||s|| / (1 + ||s||^2), row-wise over the last axis."""
    norm = np.sqrt((s * s).sum(axis=-1, keepdims=True))
    return s * norm / (1.0 + norm * norm)


def route_ref(u_hat: np.ndarray, iters: int) -> tuple[np.ndarray, np.ndarray]:
    """Loop-level routing-by-agreement for one sample.

    u_hat: [in_caps x out_caps x out_dim]. Returns (v, coupling).
    """
    in_caps, out_caps, _ = u_hat.shape
    b = np.zeros((in_caps, out_caps))
    for r in range(iters):
        e = np.exp(b - b.max(axis=1, keepdims=True))
        f = e / e.sum(axis=1, keepdims=True)
        s = np.zeros_like(u_hat[0])
        s = (f[:, :, None] * u_hat).sum(axis=0)
        v = squash_ref(s)
        if r < iters - 1:
            for i in range(in_caps):
                for j in range(out_caps):
                    b[i, j] += float(u_hat[i, j] @ v[j])
    e = np.exp(b - b.max(axis=1, keepdims=True))
    f = e / e.sum(axis=1, keepdims=True)
    return v, f


def ssim_ref(a: np.ndarray, b: np.ndarray, window: int = 7, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Sliding-window SSIM with explicit patch loops."""
    h, w = a.shape
    win = min(window, h, w)
    half = (win - 1) / 2.0
    g = np.exp(-((np.arange(win) - half) ** 2) / (2.0 * sigma * sigma))
    weights = np.outer(g, g)
    weights = weights / weights.sum()
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            mu_a = (weights * pa).sum()
            mu_b = (weights * pb).sum()
            var_a = (weights * pa * pa).sum() - mu_a * mu_a
            var_b = (weights * pb * pb).sum() - mu_b * mu_b
            cov = (weights * pa * pb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(vals))


def pull_away_ref(feats: np.ndarray) -> float:
    """Mean squared cosine similarity over distinct (i, j) pairs."""
    m = feats.shape[0]
    total = 0.0
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            ni = np.sqrt((feats[i] ** 2).sum() + 1e-24)
            nj = np.sqrt((feats[j] ** 2).sum() + 1e-24)
            total += ((feats[i] @ feats[j]) / (ni * nj)) ** 2
    return total / (m * (m - 1))


def margin_ref(lengths: np.ndarray, target: np.ndarray, alpha: float = 0.5,
               m_plus: float = 0.9, m_minus: float = 0.1) -> float:
    """Per-sample hinge-squared margin loss, averaged over the batch."""
    lengths = np.atleast_2d(lengths)
    target = np.broadcast_to(target, lengths.shape)
    per = []
    for row, t in zip(lengths, target):
        acc = 0.0
        for lk, tk in zip(row, t):
            acc += tk * max(0.0, m_plus - lk) ** 2
            acc += alpha * (1.0 - tk) * max(0.0, lk - m_minus) ** 2
        per.append(acc)
    return float(np.mean(per))


def rand_tensor(rng: np.random.Generator, shape, scale: float = 1.0,
                name: str | None = None) -> Tensor:
    return dc.parameter(rng.standard_normal(shape) * scale, name)
