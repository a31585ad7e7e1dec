"""Differentiable primitives.

Each function computes its forward value with numpy and registers a closure
that maps the output gradient to input gradients.  Reductions that feed a
loss accumulate in float64 before casting back.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import DimensionError, InvalidStatisticsError
from .tensor import Tensor, record


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return record("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return record("clamp_min", np.where(mask, a.data, np.asarray(lo, a.dtype)), (a,),
                  lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradients pass only where the input was inside."""
    mask = (a.data >= lo) & (a.data <= hi)
    return record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    """SiLU, ``x * sigmoid(x)``."""
    s = expit(a.data)
    out = a.data * s
    return record("silu", out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(np.zeros((), x.dtype), x).astype(x.dtype)
    return record("softplus", out, (a,), lambda g: (g * expit(x),))


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    return record("flip", np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_basic(index):
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(out, copy=True), (a,), bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with a 1-D index; repeats accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return record("take", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return record("stack", out, tensors,
                  lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths)
    return record("pad2d", out, (a,), lambda g: (g[..., pad:-pad, pad:-pad],))


# -- reductions -------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    return record("sum", np.asarray(out), (a,),
                  lambda g: (np.array(_expand(g, a.shape, axis, keepdims), dtype=a.dtype),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    n = a.size // max(np.asarray(out).size, 1)
    return record("mean", np.asarray(out), (a,),
                  lambda g: (np.array(_expand(g, a.shape, axis, keepdims) / n, dtype=a.dtype),))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis.

    ``weight`` is stored as ``[in, out]``.
    """
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return record("linear", out, inputs, bw)


# -- normalisation and softmax ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; NaN inputs propagate to NaN outputs."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return record("log_softmax", out, (a,),
                  lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return record("layer_norm", out, (x, gamma, beta), bw)


def _channel_view(x: np.ndarray) -> tuple[int, tuple[int, ...]]:
    axis = 1 if x.ndim == 4 else 0
    shape = [1] * x.ndim
    shape[axis] = x.shape[axis]
    return axis, tuple(shape)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray | None = None,
               var: np.ndarray | None = None, eps: float = 1e-5, training: bool = False) -> Tensor:
    """Batch normalisation over the channel axis (axis 1 for 4-D input, else 0).

    In inference form the supplied running ``mean``/``var`` are used; in
    training form the statistics are taken from ``x`` itself.
    """
    axis, bshape = _channel_view(x.data)
    red = tuple(i for i in range(x.ndim) if i != axis)
    if gamma.shape[0] != x.shape[axis]:
        raise DimensionError(f"batch_norm: {gamma.shape[0]} params for {x.shape[axis]} channels")
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if not training:
        var = np.asarray(var, dtype=x.dtype)
        if np.any(var < 0):
            raise InvalidStatisticsError("batch_norm: negative variance")
        m_ = np.asarray(mean, dtype=x.dtype).reshape(bshape)
        inv = 1.0 / np.sqrt(var.reshape(bshape) + eps)
        xhat = (x.data - m_) * inv
        out = xhat * g_ + b_

        def bw_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

        return record("batch_norm", out, (x, gamma, beta), bw_eval)

    mu = x.data.mean(axis=red, keepdims=True)
    xc = x.data - mu
    bvar = (xc * xc).mean(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(bvar + eps)
    xhat = xc * inv
    out = xhat * g_ + b_

    def bw_train(g):
        gxhat = g * g_
        gx = inv * (gxhat - gxhat.mean(axis=red, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=red, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record("batch_norm", out, (x, gamma, beta), bw_train)


# -- convolutions ------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """Rows of ``C*kh*kw`` patch values, one per output pixel, from a padded ``[B, C, H, W]``."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[C, H, W]`` or ``[B, C, H, W]``; ``weight`` is ``[Cout, Cin, kh, kw]``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv2d: kernel expects {Ci} channels, input has {C}")
    if pad >= min(kh, kw):
        raise DimensionError(f"conv2d: padding {pad} must be smaller than the kernel")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wmat = weight.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            # correlate the stride-dilated output gradient with the flipped kernel
            top, left = kh - 1 - pad, kw - 1 - pad
            gp = np.zeros((B, Co, H + kh - 1, W + kw - 1), dtype=g.dtype)
            gp[:, :, top:top + (Ho - 1) * stride + 1:stride, left:left + (Wo - 1) * stride + 1:stride] = g4
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            gx = (_im2col(gp, kh, kw, 1, H, W) @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("conv2d", out, inputs, bw)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """Length-preserving, non-causal 1-D cross-correlation.

    ``x`` is ``[C, L]`` or ``[B, C, L]``; ``weight`` is ``[Cout, Cin/groups, k]``
    with odd ``k``.  Padding is symmetric, so output position ``t`` sees
    inputs ``t - k//2 .. t + k//2``.
    """
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, C, L = xd.shape
    Co, Cig, k = weight.shape
    if k % 2 == 0:
        raise DimensionError("conv1d: kernel length must be odd for symmetric padding")
    if C % groups or Co % groups or Cig != C // groups:
        raise DimensionError(f"conv1d: kernel {weight.shape} incompatible with {C} channels, groups={groups}")
    pad = k // 2
    if k > L + 2 * pad:
        raise DimensionError("conv1d: kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=2).reshape(B, groups, Cig, L, k)
    wg = weight.data.reshape(groups, Co // groups, Cig, k)
    out = np.einsum("bgilk,goik->bgol", win, wg, optimize=True).reshape(B, Co, L)
    if bias is not None:
        out = out + bias.data[:, None]
    if squeeze:
        out = out[0]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = (g[None] if squeeze else g).reshape(B, groups, Co // groups, L)
        gw = np.einsum("bgol,bgilk->goik", g3, win, optimize=True).reshape(weight.shape)
        dwin = np.einsum("bgol,goik->bgilk", g3, wg, optimize=True).reshape(B, C, L, k)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[:, :, j:j + L] += dwin[..., j]
        gx = dxp[:, :, pad:pad + L]
        if squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g3.reshape(B, Co, L).sum(axis=(0, 2))

    return record("conv1d", out, inputs, bw)


# -- resampling ---------------------------------------------------------------

def interp_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Bilinear weights under the half-pixel (align-corners=False) convention.

    Output sample ``i`` reads input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    Coordinates beyond the outermost pixel centres are extrapolated linearly from
    the two nearest samples, so rows always sum to one and reproduce linear ramps.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        i0 = min(max(int(math.floor(src)), 0), n_in - 2)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i0 + 1] += w1
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes to ``(out_h, out_w)`` by bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: target extent must be >= 1")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return record("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    rh = interp_matrix(out_h, H, x.dtype)
    rw = interp_matrix(out_w, W, x.dtype)
    out = rh @ x.data @ rw.T
    return record("bilinear_resize", out, (x,), lambda g: (rh.T @ g @ rw,))
