"""2-d cross-correlation and transposed (fractionally-strided) convolution.

Both ops run on NCHW batches, have no implicit padding, and carry
hand-written backward rules. Forward and backward are phrased as a single
matrix product plus a small python loop over kernel taps for the
scatter/gather step; the oracle tests pin them against exhaustive
nested-loop references.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EmptyOutput, ShapeMismatch
from .tensor import Tensor, as_tensor, make_op


def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeMismatch(f"{what} must be 4-d (NCHW/OIHW), got shape {t.shape}")


def conv2d(x, k, stride: int = 1) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with kernels ``k`` [O,C,KH,KW].

    Output spatial extent is floor((in - kernel)/stride) + 1; no kernel flip,
    no padding. Differentiable in both ``x`` and ``k``.
    """
    x, k = as_tensor(x), as_tensor(k)
    _check_4d(x, "conv2d input")
    _check_4d(k, "conv2d kernel")
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    n, c, h, w = x.shape
    o, kc, kh, kw = k.shape
    if kc != c:
        raise ShapeMismatch(f"channel mismatch: input has {c}, kernel expects {kc}")
    if kh > h or kw > w:
        raise EmptyOutput(f"kernel {kh}x{kw} exceeds input {h}x{w}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1

    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * oh * ow, c * kh * kw
    )
    kmat = k.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        dk = (g2.T @ cols).reshape(o, c, kh, kw)
        dcols = (g2 @ kmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros((n, c, h, w))
        for a in range(kh):
            for b in range(kw):
                dx[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += (
                    dcols[:, :, :, :, a, b]
                )
        return dx, dk

    return make_op(out, (x, k), back, "conv2d")


def frac_conv2d(x, k, up: int = 1) -> Tensor:
    """Transposed convolution of ``x`` [N,C,H,W] with ``k`` [C,O,KH,KW].

    Scatter-adds a kernel copy at stride ``up`` for every input position;
    output spatial extent is (in - 1)*up + kernel.
    """
    x, k = as_tensor(x), as_tensor(k)
    _check_4d(x, "frac_conv2d input")
    _check_4d(k, "frac_conv2d kernel")
    up = int(up)
    if up < 1:
        raise ValueError(f"up factor must be positive, got {up}")
    n, c, h, w = x.shape
    kc, o, kh, kw = k.shape
    if kc != c:
        raise ShapeMismatch(f"channel mismatch: input has {c}, kernel expects {kc}")
    oh = (h - 1) * up + kh
    ow = (w - 1) * up + kw
    hg = up * (h - 1) + 1  # row extent of one tap's strided grid
    wg = up * (w - 1) + 1

    xmat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    kmat = k.data.reshape(c, o * kh * kw)
    taps = (xmat @ kmat).reshape(n, h, w, o, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, o, oh, ow))
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + hg : up, b : b + wg : up] += taps[:, :, :, :, a, b]

    def back(g):
        gwin = np.empty((n, h, w, o, kh, kw))
        for a in range(kh):
            for b in range(kw):
                gwin[:, :, :, :, a, b] = g[
                    :, :, a : a + hg : up, b : b + wg : up
                ].transpose(0, 2, 3, 1)
        gmat = gwin.reshape(n * h * w, o * kh * kw)
        dx = (gmat @ kmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dk = (xmat.T @ gmat).reshape(c, o, kh, kw)
        return dx, dk

    return make_op(out, (x, k), back, "frac_conv2d")
