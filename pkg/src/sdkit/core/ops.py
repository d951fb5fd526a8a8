"""Differentiable primitives with hand-written vector-Jacobian products.

Image tensors are ``N x C x H x W``.  Every op returns a new :class:`Tensor`
and records a backward closure only when an input requires grad.
"""

from __future__ import annotations

import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, grad_enabled, make_node


class EmptyMaskWarning(UserWarning):
    """A sparsity-invariant layer saw an image with no valid pixel."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    return a, b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bw(g):
        return (g * (x.data > 0),)

    return make_node(out, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside."""
    out = np.clip(x.data, lo, hi)

    def bw(g):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return make_node(out, (x,), bw)


def where_valid(x: Tensor, valid: np.ndarray) -> Tensor:
    """Zero ``x`` where ``valid`` is false; values there never reach the output."""
    valid = np.broadcast_to(valid, x.shape)
    out = np.where(valid, x.data, 0).astype(x.dtype, copy=False)

    def bw(g):
        return (np.where(valid, g, 0).astype(g.dtype, copy=False),)

    return make_node(out, (x,), bw)


# --- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), bw)


def concat(tensors, axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return make_node(out, tuple(tensors), bw)


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channel slice ``x[:, start:stop]``."""
    out = x.data[:, start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(out, (x,), bw)


def flip_width(x: Tensor) -> Tensor:
    out = x.data[..., ::-1].copy()

    def bw(g):
        return (g[..., ::-1].copy(),)

    return make_node(out, (x,), bw)


# --- reductions ------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw)


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(out, (x,), bw)


# --- convolution -----------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x, padding, mode):
    if not padding:
        return x
    width = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, width, mode="edge" if mode == "edge" else "constant")


def edge_pad_adjoint(dxp: np.ndarray, padding: int) -> np.ndarray:
    """Fold the gradient of an edge-padded array back onto the unpadded one."""
    if not padding:
        return dxp
    p = padding
    d = dxp.copy()
    d[:, :, p] += d[:, :, :p].sum(axis=2)
    d[:, :, -p - 1] += d[:, :, -p:].sum(axis=2)
    d = d[:, :, p:-p]
    d[..., p] += d[..., :p].sum(axis=-1)
    d[..., -p - 1] += d[..., -p:].sum(axis=-1)
    return d[..., p:-p]


def _im2col(x, k, stride, padding, pad_mode="zeros"):
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    xp = _pad(x, padding, pad_mode)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, padding, ho, wo, pad_mode="zeros"):
    n, c, h, w = x_shape
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    if pad_mode == "edge":
        return edge_pad_adjoint(dxp, padding)
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def _chunk(rows: int) -> int:
    # keep each column slice near 256 KiB so the GEMM stays cache resident
    return int(np.clip(65536 // max(rows, 1), 256, 4096))


def _mm_cols(a, b):
    """``a @ b`` for a wide ``b``, blocked over columns."""
    n = b.shape[1]
    step = _chunk(b.shape[0])
    if n <= step:
        return a @ b
    out = np.empty((a.shape[0], n), dtype=np.result_type(a, b))
    for s in range(0, n, step):
        np.matmul(a, b[:, s:s + step], out=out[:, s:s + step])
    return out


def _mm_inner(a, b):
    """``a @ b.T`` where both are wide; accumulated over column blocks."""
    n = a.shape[1]
    step = _chunk(max(a.shape[0], b.shape[0]))
    if n <= step:
        return a @ b.T
    acc = a[:, :step] @ b[:, :step].T
    for s in range(step, n, step):
        acc += a[:, s:s + step] @ b[:, s:s + step].T
    return acc


def _conv_input_grad(g, weight, padding, pad_mode):
    """Stride-1 input gradient as a correlation of ``g`` with the flipped kernel."""
    o, c, k, _ = weight.shape
    n = g.shape[0]
    wflip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
    # edge mode needs the gradient on the whole padded frame before folding it back
    full = k - 1 if pad_mode == "edge" else k - 1 - padding
    cols, ho, wo = _im2col(g, k, 1, full)
    dx = _mm_cols(wflip, cols).reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
    if pad_mode == "edge":
        return edge_pad_adjoint(np.ascontiguousarray(dx), padding)
    return np.ascontiguousarray(dx)


def flush_denormals(a: np.ndarray) -> np.ndarray:
    """Zero subnormal entries; matmuls on subnormal floats run several times slower."""
    tiny = np.finfo(a.dtype).tiny
    small = np.abs(a) < tiny
    if small.any():
        a = np.where(small, 0, a).astype(a.dtype, copy=False)
    return a


def conv2d_raw(x: Tensor, weight: Tensor, bias: Tensor | None = None,
               stride: int = 1, padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation of a batched input with ``weight`` (O x C x k x k).

    ``pad_mode`` is ``"zeros"`` or ``"edge"`` (replicate border pixels).
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects N x C x H x W input, got shape {x.shape}")
    o, c, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"square kernels only, got weight shape {weight.shape}")
    if x.shape[1] != c:
        raise ValueError(
            f"input shape {x.shape} has {x.shape[1]} channels but weight shape "
            f"{weight.shape} expects {c}")
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, k, stride, padding, pad_mode)
    w2 = weight.data.reshape(o, -1)
    out = _mm_cols(w2, cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    keep_cols = cols if (grad_enabled() and weight.requires_grad) else None
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = flush_denormals(g)
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gx = gw = None
        if x.requires_grad:
            if stride == 1:
                gx = _conv_input_grad(g, weight.data, padding, pad_mode)
            else:
                gx = _col2im(_mm_cols(w2.T, g2), x.shape, k, stride, padding, ho, wo, pad_mode)
        if weight.requires_grad:
            gw = _mm_inner(g2, keep_cols).reshape(weight.shape)
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, parents, bw)


def box_count(mask: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Number of valid pixels in each k x k window (zero padding counts as invalid)."""
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    ho = conv_output_size(mask.shape[2], k, stride, padding)
    wo = conv_output_size(mask.shape[3], k, stride, padding)
    win = sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.sum(axis=(-2, -1))


def max_pool_mask(mask: np.ndarray, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    mp = np.pad(mask, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else mask
    ho = conv_output_size(mask.shape[2], k, stride, padding)
    wo = conv_output_size(mask.shape[3], k, stride, padding)
    win = sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.max(axis=(-2, -1))


def batch_mask(mask, like: Tensor) -> np.ndarray:
    """Coerce a validity mask to ``N x 1 x H x W`` matching ``like``."""
    m = np.asarray(mask, dtype=like.dtype)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None] if m.shape[0] == like.shape[0] and like.shape[0] != 1 else m[None]
    if m.shape[0] == 1 and like.shape[0] != 1:
        m = np.broadcast_to(m, (like.shape[0],) + m.shape[1:])
    if m.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask spatial size {m.shape[-2:]} does not match input {like.shape[-2:]}")
    return m


def si_conv2d_raw(x: Tensor, mask: np.ndarray, weight: Tensor, bias: Tensor | None = None,
                  stride: int = 1, padding: int = 0, eps: float = 1e-8):
    """Sparsity-invariant convolution.

    ``out = sum(w * x * m) / (sum(m) + eps) + bias`` over each window, with the
    output mask being the k x k max-pool of ``m``.  Returns ``(out, out_mask)``.
    """
    m = batch_mask(mask, x)
    valid = m > 0
    if not valid.reshape(m.shape[0], -1).any(axis=1).all():
        warnings.warn("validity mask is empty for at least one image; "
                      "sparsity-invariant output reduces to the bias", EmptyMaskWarning,
                      stacklevel=2)
    k = weight.shape[-1]
    num = conv2d_raw(where_valid(x, valid), weight, None, stride, padding)
    cnt = box_count(m, k, stride, padding)
    out = mul(num, (1.0 / (cnt + eps)).astype(x.dtype))
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    return out, max_pool_mask(m, k, stride, padding)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw)
