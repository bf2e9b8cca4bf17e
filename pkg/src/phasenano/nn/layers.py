"""Functional layer primitives with hand-written forward and backward passes.

All tensors are numpy arrays laid out (batch, channels, height, width).
Convolution here means cross-correlation, the usual deep-learning convention.
Transposed convolution is implemented exactly as the adjoint of convolution,
so one im2col/col2im core serves both directions and their gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_params",
    "transposed_conv2d_forward",
    "transposed_conv2d_backward_input",
    "transposed_conv2d_backward_params",
    "conv_output_hw",
    "transposed_output_hw",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "upsample2_forward",
    "upsample2_backward",
]


class ShapeError(ValueError):
    """Raised when tensor shapes disagree with a layer's contract."""


def conv_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv of {h}x{w} with k={k} s={stride} p={padding} is empty")
    return ho, wo


def transposed_output_hw(h: int, w: int, k: int, stride: int, padding: int) -> tuple[int, int]:
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv of {h}x{w} with k={k} s={stride} p={padding} is empty")
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p : p + h, p : p + w] = x
    return out


def _im2col(xpad: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather k*k patches: (N, C, k, k, Ho, Wo)."""
    n, c = xpad.shape[:2]
    if stride == 1 and xpad.flags.c_contiguous:
        sn, sc, sh, sw = xpad.strides
        view = np.lib.stride_tricks.as_strided(
            xpad, shape=(n, c, k, k, ho, wo), strides=(sn, sc, sh, sw, sh, sw)
        )
        return np.ascontiguousarray(view)
    cols = np.empty((n, c, k, k, ho, wo), dtype=xpad.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xpad[:, :, i : i + stride * ho : stride,
                                    j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, hw: tuple[int, int], k: int, stride: int, p: int) -> np.ndarray:
    """Scatter-add patches back: inverse layout of _im2col."""
    n, c = cols.shape[:2]
    ho, wo = cols.shape[4:]
    h, w = hw
    xpad = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, i, j]
            )
    if p == 0:
        return xpad
    return xpad[:, :, p:-p, p:-p]


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-D tensors, got x{x.shape} w{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError("only square kernels are supported")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")


def conv2d_forward(x, w, b, stride: int = 1, padding: int = 0, cache: dict | None = None):
    """y[n,o] = sum_c x[n,c] cross-correlated with w[o,c], plus bias.

    Passing a ``cache`` dict stores the gathered patches for reuse by
    :func:`conv2d_backward_params`, saving the second im2col pass.
    """
    _check_conv_shapes(x, w, b)
    k = w.shape[2]
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], k, stride, padding)
    cols = _im2col(_pad(x, padding), k, stride, ho, wo)
    n, c = x.shape[0], x.shape[1]
    cols3 = cols.reshape(n, c * k * k, ho * wo)
    if cache is not None:
        cache["cols3"] = cols3
    y = np.matmul(w.reshape(w.shape[0], c * k * k), cols3)  # (N, O, L)
    y = y.reshape(n, w.shape[0], ho, wo)
    if b is not None:
        y += b[None, :, None, None]
    return y


def conv2d_backward_input(dy, w, input_hw, stride: int = 1, padding: int = 0) -> np.ndarray:
    k = w.shape[2]
    n, o, ho, wo = dy.shape
    c = w.shape[1]
    w2 = w.reshape(o, c * k * k)
    dcols3 = np.matmul(w2.T, dy.reshape(n, o, ho * wo))  # (N, C*k*k, L)
    dcols = dcols3.reshape(n, c, k, k, ho, wo)
    return _col2im(dcols, input_hw, k, stride, padding)


def conv2d_backward_params(x, dy, k: int, stride: int = 1, padding: int = 0,
                           cache: dict | None = None):
    n, o, ho, wo = dy.shape
    c = x.shape[1]
    if cache is not None and "cols3" in cache:
        cols3 = cache["cols3"]
    else:
        cols = _im2col(_pad(x, padding), k, stride, ho, wo)
        cols3 = cols.reshape(n, c * k * k, ho * wo)
    dy3 = dy.reshape(n, o, ho * wo)
    dw = np.matmul(dy3, cols3.transpose(0, 2, 1)).sum(axis=0)  # (O, C*k*k)
    db = dy.sum(axis=(0, 2, 3))
    return dw.reshape(o, c, k, k), db


def transposed_conv2d_forward(x, w, b, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of convolution; weight laid out (C_in, C_out, k, k)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[0]}")
    k = w.shape[2]
    out_hw = transposed_output_hw(x.shape[2], x.shape[3], k, stride, padding)
    y = conv2d_backward_input(x, w, out_hw, stride, padding)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
        y += b[None, :, None, None]
    return y


def transposed_conv2d_backward_input(dy, w, stride: int = 1, padding: int = 0,
                                     cache: dict | None = None) -> np.ndarray:
    return conv2d_forward(dy, w, None, stride, padding, cache=cache)


def transposed_conv2d_backward_params(x, dy, k: int, stride: int = 1, padding: int = 0,
                                      cache: dict | None = None):
    # roles swap relative to conv: the output gradient plays the conv input
    dw, _ = conv2d_backward_params(dy, x, k, stride, padding, cache=cache)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


def leaky_relu_forward(x, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dy, x, slope: float = 0.1) -> np.ndarray:
    return np.where(x > 0, dy, slope * dy)


def maxpool2_forward(x) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2_backward(dy, x) -> np.ndarray:
    """Route gradient to the first maximal element of each 2x2 window."""
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    dflat = np.zeros_like(flat)
    np.put_along_axis(dflat, idx[..., None], dy[..., None], axis=-1)
    dwin = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, h, w)


def upsample2_forward(x) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dy) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
