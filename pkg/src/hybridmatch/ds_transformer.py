"""Downsampled attention with 2-D rotary embeddings, and the gated MLP."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, ContractError
from .numerics import LayerNorm, Linear, Module, Tensor, ops, record

SELF_ATT = "self_att"
CROSS_ATT = "cross_att"


def _rope_angles(positions: np.ndarray, dim: int) -> np.ndarray:
    """Per-token, per-channel rotation angles, repeated for both members of a pair."""
    half = dim // 2
    theta = 10000.0 ** (-2.0 * np.arange(half // 2) / half)
    rows = positions[:, :1] * theta[None, :]
    cols = positions[:, 1:2] * theta[None, :]
    ang = np.concatenate([rows, cols], axis=1)
    return np.repeat(ang, 2, axis=1)


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    swapped = np.empty_like(x)
    swapped[..., 0::2] = -odd
    swapped[..., 1::2] = even
    return x * cos + swapped * sin


def rope_encode(x: Tensor, positions) -> Tensor:
    """Rotate channel pairs by 2-D position.

    The first half of the channels is rotated by row angles, the second half
    by column angles; pair ``i`` of a half turns by ``p * 10000**(-2i/(D/2))``.
    ``x`` is ``[..., L, D]`` and ``positions`` is ``[L, 2]`` (row, col).
    """
    dim = x.shape[-1]
    if dim % 4:
        raise ConfigurationError(f"rope_encode needs a width divisible by 4, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    ang = _rope_angles(pos, dim)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    out = _rotate_pairs(x.data, cos, sin)
    return record("rope", out, (x,), lambda g: (_rotate_pairs(g, cos, -sin),))


def grid_positions(h: int, w: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, q_pos=None, k_pos=None) -> Tensor:
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d)) v`` per head.

    ``q`` is ``[B, Lq, C]`` (or ``[Lq, C]``), ``k`` and ``v`` ``[B, Lk, C]``.
    If positions are given, rotary embeddings are applied per head to q and k.
    """
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (ops.reshape(t, (1,) + t.shape) for t in (q, k, v))
    if k.shape[1] != v.shape[1]:
        raise ContractError("attention: keys and values differ in length")
    b, lq, c = q.shape
    lk = k.shape[1]
    if c % heads:
        raise ConfigurationError(f"width {c} not divisible by {heads} heads")
    d = c // heads

    def split(t, n):
        return ops.transpose(ops.reshape(t, (b, n, heads, d)), (0, 2, 1, 3))

    qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
    if q_pos is not None:
        qh = rope_encode(qh, q_pos)
        kh = rope_encode(kh, k_pos)
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    out = ops.matmul(ops.softmax(scores, axis=-1), vh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, lq, c))
    return ops.reshape(out, (lq, c)) if unbatched else out


def _resize_grid(x: Tensor, h: int, w: int) -> Tensor:
    """Bilinear resize of a channels-last grid ``[B, H, W, C]``."""
    if x.shape[1:3] == (h, w):
        return x
    chw = ops.transpose(x, (0, 3, 1, 2))
    return ops.transpose(ops.bilinear_resize(chw, h, w), (0, 2, 3, 1))


class DsAttentionLayer(Module):
    """Attention computed on a bilinearly downsampled grid, no post-attention MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1, ds_factor: int = 4,
                 mode: str = SELF_ATT, use_rope: bool = True):
        super().__init__()
        if dim % heads or (dim // heads) % 4:
            raise ConfigurationError(f"width {dim} with {heads} heads leaves a head width not divisible by 4")
        if ds_factor < 1:
            raise ConfigurationError("ds_factor must be >= 1")
        if mode not in (SELF_ATT, CROSS_ATT):
            raise ConfigurationError(f"unknown attention mode {mode!r}")
        self.dim = dim
        self.heads = heads
        self.ds_factor = ds_factor
        self.mode = mode
        self.use_rope = use_rope
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)

    def forward(self, xa: Tensor, xb: Tensor | None = None) -> Tensor:
        """``xa`` attends to ``xb`` (itself in self mode); grids are ``[B, H, W, C]``."""
        if self.mode == SELF_ATT:
            if xb is not None and xb is not xa:
                raise ContractError("self-attention takes a single input grid")
        elif xb is None:
            raise ContractError("cross-attention needs a second grid")
        unbatched = xa.ndim == 3
        if unbatched:
            xa = ops.reshape(xa, (1,) + xa.shape)
            if xb is not None:
                xb = ops.reshape(xb, (1,) + xb.shape)
        if xb is None:
            xb = xa
        b, h, w, c = xa.shape
        hb, wb = xb.shape[1:3]
        dh, dw = max(h // self.ds_factor, 1), max(w // self.ds_factor, 1)
        dhb, dwb = max(hb // self.ds_factor, 1), max(wb // self.ds_factor, 1)
        a_small = _resize_grid(xa, dh, dw)
        b_small = a_small if self.mode == SELF_ATT else _resize_grid(xb, dhb, dwb)
        q = self.wq(ops.reshape(a_small, (b, dh * dw, c)))
        kv_in = ops.reshape(b_small, (b, dhb * dwb, c))
        k, v = self.wk(kv_in), self.wv(kv_in)
        pos = None
        if self.mode == SELF_ATT and self.use_rope:
            pos = grid_positions(dh, dw)
        msg = attention(q, k, v, self.heads, pos, pos)
        msg = _resize_grid(ops.reshape(msg, (b, dh, dw, c)), h, w)
        out = ops.add(xa, msg)
        return ops.reshape(out, out.shape[1:]) if unbatched else out


def ds_attention(xa: Tensor, xb: Tensor, layer: DsAttentionLayer) -> Tensor:
    return layer(xa, xb if layer.mode == CROSS_ATT else None)


class GatedMlpLayer(Module):
    """``y = x + W_out(SiLU(norm(x) W_gate) * (norm(x) W_val))``."""

    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 2):
        super().__init__()
        hidden = dim * expansion
        self.norm = LayerNorm(dim)
        self.w_gate = Linear(dim, hidden, rng)
        self.w_val = Linear(dim, hidden, rng)
        self.w_out = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        u = self.norm(x)
        return ops.add(x, self.w_out(ops.mul(ops.silu(self.w_gate(u)), self.w_val(u))))


def gmlp(layer: GatedMlpLayer, x: Tensor) -> Tensor:
    return layer(x)
