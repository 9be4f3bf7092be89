"""Forward/backward primitives: conv2d, dense, relu, 2x2 max-pool, softmax-CE.

Dot products and reductions accumulate in float64 and round back to the
input dtype on store (float32 in normal operation; passing float64 arrays
runs the whole pipeline at 64-bit, which the gradient check relies on).
That keeps evaluation deterministic and easy to reproduce outside numpy. Max-pool ties resolve to
the first element in row-major window order.
"""

from __future__ import annotations

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    d6 = dcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d6[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp.astype(dcols.dtype)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int = 1, padding: int = 0):
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    wm = w.reshape(w.shape[0], -1).astype(np.float64)
    out = np.matmul(wm, cols.astype(np.float64))
    if b is not None:
        out += b.astype(np.float64)[:, None]
    y = out.reshape(x.shape[0], w.shape[0], oh, ow).astype(x.dtype)
    cache = (x.shape, cols, oh, ow, stride, padding)
    return y, cache


def conv2d_backward(dy: np.ndarray, w: np.ndarray, cache):
    x_shape, cols, oh, ow, stride, padding = cache
    batch = x_shape[0]
    out_ch = w.shape[0]
    dy2 = dy.reshape(batch, out_ch, oh * ow).astype(np.float64)
    cols64 = cols.astype(np.float64)
    dw = np.matmul(dy2, cols64.transpose(0, 2, 1)).sum(axis=0)
    db = dy2.sum(axis=(0, 2))
    wm = w.reshape(out_ch, -1).astype(np.float64)
    dcols = np.matmul(wm.T, dy2).astype(dy.dtype)
    dx = _col2im(dcols, x_shape, w.shape[2], w.shape[3], stride, padding, oh, ow)
    return dx, dw.reshape(w.shape).astype(w.dtype), db.astype(w.dtype)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    out = np.matmul(x.astype(np.float64), w.astype(np.float64).T)
    if b is not None:
        out += b.astype(np.float64)
    return out.astype(x.dtype), x


def dense_backward(dy: np.ndarray, w: np.ndarray, cache):
    x = cache
    dy64 = dy.astype(np.float64)
    dw = np.matmul(dy64.T, x.astype(np.float64))
    dx = np.matmul(dy64, w.astype(np.float64))
    db = dy64.sum(axis=0)
    return dx.astype(dy.dtype), dw.astype(w.dtype), db.astype(w.dtype)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy * cache


def maxpool2_forward(x: np.ndarray):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = np.argmax(windows, axis=-1)  # first max wins on ties
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy: np.ndarray, cache) -> np.ndarray:
    idx, x_shape = cache
    b, c, h, w = x_shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return (
        dwin.reshape(b, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )


def flatten_forward(x: np.ndarray):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(dy: np.ndarray, cache) -> np.ndarray:
    return dy.reshape(cache)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy loss and its gradient w.r.t. the logits (float32)."""
    batch = logits.shape[0]
    p = softmax(logits)
    picked = np.clip(p[np.arange(batch), labels], 1e-300, None)
    loss = float(-np.log(picked).mean())
    dlogits = p
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch
    return loss, dlogits.astype(logits.dtype)
