"""Differentiable operations on :class:`Tensor`.

Feature-map ops accept either a single map ``C x H x W`` or a stack
``N x C x H x W``; the channel axis is always ``-3``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ShapeError, Tensor, make_result


def _as_stack(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected C x H x W or N x C x H x W input, got rank {x.ndim}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(t: Tensor, factor: float) -> Tensor:
    f = t.data.dtype.type(factor)
    return make_result(t.data * f, (t,), lambda g: (g * f,))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return make_result(np.where(mask, t.data, 0).astype(t.data.dtype), (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    half = t.data.dtype.type(0.5)
    s = half * (1 + np.tanh(half * t.data))
    return make_result(s, (t,), lambda g: (g * s * (1 - s),))


def log(t: Tensor) -> Tensor:
    x = t.data
    return make_result(np.log(x), (t,), lambda g: (g / x,))


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    inside = (t.data >= lo) & (t.data <= hi)
    return make_result(np.clip(t.data, lo, hi), (t,), lambda g: (g * inside,))


def sum_all(t: Tensor) -> Tensor:
    """Sum of every element, accumulated in 64-bit."""
    total = np.asarray(np.sum(t.data, dtype=np.float64), dtype=t.data.dtype)
    shape, dtype = t.shape, t.data.dtype
    return make_result(total, (t,), lambda g: (np.full(shape, g, dtype=dtype),))


def square_sum(t: Tensor) -> Tensor:
    """Sum of squared elements (64-bit accumulation)."""
    x = t.data
    total = np.asarray(np.sum(np.square(x, dtype=np.float64)), dtype=x.dtype)
    return make_result(total, (t,), lambda g: (2 * g * x,))


# -- shape ----------------------------------------------------------------------


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: shape {p.shape} does not align with {ref}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-3))

    return make_result(np.concatenate([p.data for p in parts], axis=-3), tuple(parts), backward)


def take_channel(t: Tensor, index: int) -> Tensor:
    """Channel ``index`` of a feature map, keeping the channel axis (size 1)."""
    if t.ndim < 3 or not 0 <= index < t.shape[-3]:
        raise ShapeError(f"take_channel: index {index} out of range for shape {t.shape}")
    shape, dtype = t.shape, t.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., index : index + 1, :, :] = g
        return (full,)

    return make_result(t.data[..., index : index + 1, :, :].copy(), (t,), backward)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = t.shape
    return make_result(t.data.reshape(shape), (t,), lambda g: (g.reshape(original),))


# -- layers ---------------------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h_out: int, w_out: int) -> np.ndarray:
    """``N x (C*k*k) x (h_out*w_out)`` patch matrix of an already padded stack."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h_out, j : j + w_out]
    return cols.reshape(n, c * k * k, h_out * w_out)


def _col2im(dcols: np.ndarray, c: int, k: int, h_out: int, w_out: int) -> np.ndarray:
    n = dcols.shape[0]
    d = dcols.reshape(n, c, k, k, h_out, w_out)
    out = np.zeros((n, c, h_out + k - 1, w_out + k - 1), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h_out, j : j + w_out] += d[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    x4, squeeze = _as_stack(x.data, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weights must be C_out x C_in x k x k, got rank {weight.ndim}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if x4.shape[1] != c_in:
        raise ShapeError(f"conv2d: input channels {x4.shape[1]} != weight in-channels {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias length {bias.shape} != output channels {c_out}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    k = kh
    n, _, h, w = x4.shape
    h_out = h + 2 * padding - k + 1
    w_out = w + 2 * padding - k + 1
    if h_out < 1:
        raise ShapeError(f"conv2d: height {h} too small for kernel {k} with padding {padding}")
    if w_out < 1:
        raise ShapeError(f"conv2d: width {w} too small for kernel {k} with padding {padding}")

    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x4
    cols = _im2col(xp, k, h_out, w_out)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols) + bias.data[None, :, None]
    out = out.reshape(n, c_out, h_out, w_out)

    def backward(g):
        g3 = g.reshape(n, c_out, h_out * w_out)
        grad_b = g3.sum(axis=(0, 2))
        grad_w = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grad_x = None
        if x.requires_grad:
            full = _col2im(np.matmul(w2.T, g3), c_in, k, h_out, w_out)
            grad_x = full[:, :, padding : padding + h, padding : padding + w]
            if squeeze:
                grad_x = grad_x[0]
        return grad_x, grad_w, grad_b

    return make_result(out[0] if squeeze else out, (x, weight, bias), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; an odd trailing row/column is dropped.

    On ties the first element of the window in row-major order wins.
    """
    x4, squeeze = _as_stack(x.data, "maxpool2")
    n, c, h, w = x4.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: spatial size {h}x{w} is smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    blocks = x4[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if squeeze else g
        scatter = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(scatter, arg[..., None], g4[..., None], axis=-1)
        scatter = scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        grad = np.zeros((n, c, h, w), dtype=g.dtype)
        grad[:, :, : 2 * ho, : 2 * wo] = scatter
        return (grad[0] if squeeze else grad,)

    return make_result(out[0] if squeeze else out, (x,), backward)


def avgpool_down(x: Tensor, factor: int) -> Tensor:
    """Average non-overlapping ``factor x factor`` blocks; ragged edges are cropped."""
    x4, squeeze = _as_stack(x.data, "avgpool_down")
    if factor < 1:
        raise ShapeError(f"avgpool_down: factor must be >= 1, got {factor}")
    n, c, h, w = x4.shape
    ho, wo = h // factor, w // factor
    if ho < 1 or wo < 1:
        raise ShapeError(f"avgpool_down: {h}x{w} is smaller than factor {factor}")
    blocks = x4[:, :, : ho * factor, : wo * factor].reshape(n, c, ho, factor, wo, factor)
    out = blocks.mean(axis=(3, 5), dtype=np.float64).astype(x4.dtype)
    inv = x4.dtype.type(1.0 / (factor * factor))

    def backward(g):
        g4 = g[None] if squeeze else g
        grad = np.zeros((n, c, h, w), dtype=g.dtype)
        grad[:, :, : ho * factor, : wo * factor] = np.repeat(np.repeat(g4 * inv, factor, axis=2), factor, axis=3)
        return (grad[0] if squeeze else grad,)

    return make_result(out[0] if squeeze else out, (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``W x + b`` for a vector ``x`` or each row of a batch ``B x n``."""
    if weight.ndim != 2:
        raise ShapeError(f"dense: weights must be a matrix, got rank {weight.ndim}")
    m, n = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise ShapeError(f"dense: input width {x.shape[-1] if x.ndim else 0} != weight columns {n}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias length {bias.shape} != weight rows {m}")
    xd, wd = x.data, weight.data

    def backward(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return make_result(xd @ wd.T + bias.data, (x, weight, bias), backward)
