"""Coarse matching (dual softmax + mutual nearest neighbour) and two-stage refinement.

Coordinates: a feature at index ``j`` of a stride-``s`` map sits at full-image
pixel ``s * j`` (pixel centres at integer coordinates).  A coarse cell
``(r, c)`` therefore anchors at ``(8c, 8r)`` and at fine (1/2) resolution at
pixel ``(4c, 4r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Conv2d, Module, Tensor, ops

# (dx, dy) for the 3x3 neighbourhood, row-major over dy then dx
OFFSETS_3X3 = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


@dataclass
class CoarseScores:
    S: Tensor
    temperature: float


@dataclass
class MatchSet:
    """Coarse cell matches and their refined full-resolution counterparts.

    ``coarse`` rows are ``(ia, ib, confidence)``; ``fine`` rows are
    ``(xa, ya, xb, yb, confidence)`` in full-image pixels.
    """

    coarse: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fine: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def __len__(self) -> int:
        return len(self.fine)

    @property
    def index_pairs(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.coarse[:, :2]}


def coarse_scores(feat_a: Tensor, feat_b: Tensor, temperature: float = 0.1) -> CoarseScores:
    """``S[i, j] = <feat_a[i], feat_b[j]> / temperature``."""
    S = ops.mul(ops.matmul(feat_a, ops.transpose(feat_b)), 1.0 / temperature)
    return CoarseScores(S, temperature)


def dual_softmax(S: Tensor) -> Tensor:
    """Product of the row-wise and column-wise softmax of ``S``."""
    return ops.mul(ops.softmax(S, axis=1), ops.softmax(S, axis=0))


def mutual_nearest(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(i, j)`` where ``M[i, j]`` is the strict maximum of its row and column."""
    M = np.asarray(M)
    if M.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    row_max = M.max(axis=1, keepdims=True)
    col_max = M.max(axis=0, keepdims=True)
    is_row = M == row_max
    is_col = M == col_max
    row_unique = is_row.sum(axis=1) == 1
    col_unique = is_col.sum(axis=0) == 1
    mask = is_row & is_col & row_unique[:, None] & col_unique[None, :]
    i, j = np.nonzero(mask)
    return i, j


def mnn_select(P: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Mutual-nearest-neighbour matches with value ``>= threshold``.

    Works on dual-softmax probabilities (threshold ``tau``) or, for the
    optimised variant, on raw scores with a score threshold.  Returns rows
    ``(i, j, value)`` sorted by ``i``.
    """
    P = np.asarray(P)
    i, j = mutual_nearest(P)
    vals = P[i, j]
    keep = vals >= threshold
    return np.stack([i[keep], j[keep], vals[keep]], axis=1).astype(np.float64).reshape(-1, 3)


class FineFusion(Module):
    """FPN-style fusion of transformed coarse features with the 1/4 and 1/2 backbone maps."""

    def __init__(self, coarse_dim: int, c4: int, c2: int, fine_dim: int, rng: np.random.Generator):
        super().__init__()
        self.skip4 = Conv2d(c4, coarse_dim, 1, rng, pad=0)
        self.out4 = Conv2d(coarse_dim, fine_dim, 3, rng, pad=1)
        self.skip2 = Conv2d(c2, fine_dim, 1, rng, pad=0)
        self.out2 = Conv2d(fine_dim, fine_dim, 3, rng, pad=1)

    def forward(self, ft8: Tensor, f4: Tensor, f2: Tensor) -> Tensor:
        """Maps are channels-first ``[B, C, h, w]``; returns ``[B, fine_dim, H/2, W/2]``."""
        x = ops.bilinear_resize(ft8, f4.shape[-2], f4.shape[-1])
        x = self.out4(ops.add(x, self.skip4(f4)))
        x = ops.bilinear_resize(x, f2.shape[-2], f2.shape[-1])
        return self.out2(ops.add(x, self.skip2(f2)))


def fine_fuse(fusion: FineFusion, ft8: Tensor, f4: Tensor, f2: Tensor) -> Tensor:
    return fusion(ft8, f4, f2)


def cell_fine_anchor(cells: np.ndarray, grid_w: int) -> np.ndarray:
    """Half-resolution ``(y, x)`` anchor of flat coarse cell indices."""
    r, c = np.divmod(np.asarray(cells, dtype=np.int64), grid_w)
    return np.stack([4 * r, 4 * c], axis=1)


def patch_offsets(size: int) -> np.ndarray:
    """Row-major ``(dy, dx)`` offsets of a ``size x size`` window around an anchor."""
    lo = -(size // 2)
    rng = np.arange(lo, lo + size)
    dy, dx = np.meshgrid(rng, rng, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def extract_patches(fmap: Tensor, anchors: np.ndarray, size: int) -> Tensor:
    """Gather ``size x size`` windows around ``anchors`` (rows ``(y, x)``) from ``[C, H, W]``.

    Out-of-bounds pixels read as zero.  Returns ``[M, size*size, C]``.
    """
    C, H, W = fmap.shape
    pad = size
    padded = ops.pad2d(fmap, pad)
    wp = W + 2 * pad
    flat = ops.reshape(padded, (C, -1))
    offs = patch_offsets(size)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 2)
    ys = anchors[:, None, 0] + offs[None, :, 0] + pad
    xs = anchors[:, None, 1] + offs[None, :, 1] + pad
    idx = (ys * wp + xs).reshape(-1)
    g = ops.take(flat, idx, axis=1)
    return ops.reshape(ops.transpose(g), (len(anchors), size * size, C))


def fine_scores(patch_a: Tensor, patch_b: Tensor) -> Tensor:
    """Local score matrices ``S_f = patch_a @ patch_b^T`` for every match, ``[M, p^2, p^2]``."""
    return ops.matmul(patch_a, ops.transpose(patch_b, (0, 2, 1)))


def refine_stage1(S_f: np.ndarray) -> np.ndarray:
    """Pick, for each local score matrix, the mutual-nearest pair with the highest score.

    Returns ``[M, 2]`` local indices ``(ka, kb)``; rows with no strict mutual
    pair hold ``-1``.
    """
    S_f = np.asarray(S_f)
    out = np.full((len(S_f), 2), -1, dtype=np.int64)
    for m, s in enumerate(S_f):
        i, j = mutual_nearest(s)
        if len(i):
            best = np.argmax(s[i, j])
            out[m] = (i[best], j[best])
    return out


def refine_stage2(feat_a: Tensor, neigh_b: Tensor) -> Tensor:
    """Soft-argmax offset of each A feature over its 3x3 B neighbourhood.

    ``feat_a`` is ``[M, C]`` (or ``[C]``) and ``neigh_b`` ``[M, 9, C]`` ordered
    row-major over offsets ``{-1, 0, 1}^2``.  Returns ``(dx, dy)`` rows in
    ``[-1, 1]^2``.
    """
    single = feat_a.ndim == 1
    if single:
        feat_a = ops.reshape(feat_a, (1,) + feat_a.shape)
        neigh_b = ops.reshape(neigh_b, (1,) + neigh_b.shape)
    c = feat_a.shape[-1]
    sim = ops.matmul(neigh_b, ops.reshape(feat_a, feat_a.shape + (1,)))
    sim = ops.mul(ops.reshape(sim, sim.shape[:2]), 1.0 / math.sqrt(c))
    w = ops.softmax(sim, axis=1)
    # a convex combination of the offsets, clamped against rounding past the box
    delta = ops.clip(ops.matmul(w, OFFSETS_3X3.astype(w.dtype)), -1.0, 1.0)
    return ops.reshape(delta, (2,)) if single else delta
