"""Ground-truth correspondences derived from a known homography."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..matcher import patch_offsets
from .synth import warp_points


@dataclass
class GroundTruth:
    """Coarse cell pairs and the exact warped position of each A anchor in B.

    ``coarse_pairs`` is ``[K, 2]`` of flat cell indices ``(ia, ib)``;
    ``fine_targets`` is ``[K, 2]`` full-resolution ``(x, y)`` in image B.
    """

    coarse_pairs: np.ndarray
    fine_targets: np.ndarray
    homography: np.ndarray
    grid: tuple[int, int]
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.coarse_pairs)


def cell_anchors(grid: tuple[int, int], stride: int = 8) -> np.ndarray:
    """Full-resolution ``(x, y)`` anchor of every cell, row-major."""
    gh, gw = grid
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([cc.ravel(), rr.ravel()], axis=1).astype(np.float64) * stride


def gt_from_homography(H: np.ndarray, grid: tuple[int, int], image_size: tuple[int, int],
                       stride: int = 8, tolerance: float = 0.5) -> GroundTruth:
    """Pair each A cell with the B cell whose anchor lies within ``tolerance`` cell widths
    (per axis) of the warped A anchor.

    Warped anchors outside image B are dropped.  When several A cells land on
    one B cell, only the closest is kept, so the pairing is one-to-one.
    """
    gh, gw = grid
    img_h, img_w = image_size
    warped = warp_points(H, cell_anchors(grid, stride))
    inside = (warped[:, 0] >= 0) & (warped[:, 0] <= img_w - 1) & (warped[:, 1] >= 0) & (warped[:, 1] <= img_h - 1)
    cell = warped / stride
    nearest = np.rint(cell).astype(np.int64)
    err = np.abs(cell - nearest)
    ok = inside & np.all(err <= tolerance, axis=1)
    ok &= (nearest[:, 0] >= 0) & (nearest[:, 0] < gw) & (nearest[:, 1] >= 0) & (nearest[:, 1] < gh)
    ia = np.nonzero(ok)[0]
    ib = nearest[ia, 1] * gw + nearest[ia, 0]
    dist = np.hypot(*(cell[ia] - nearest[ia]).T)
    order = np.lexsort((ia, dist))
    _, first = np.unique(ib[order], return_index=True)
    keep = np.sort(order[first])
    ia, ib = ia[keep], ib[keep]
    return GroundTruth(np.stack([ia, ib], axis=1).reshape(-1, 2), warped[ia].reshape(-1, 2),
                       np.asarray(H, dtype=np.float64), (gh, gw), (img_h, img_w))


def fine_pixel_pairs(H: np.ndarray, pairs: np.ndarray, grid: tuple[int, int], patch: int,
                     fine_stride: int = 2, cell_stride: int = 8) -> np.ndarray:
    """Pixel-level supervision for the local score matrices.

    For every coarse pair ``m`` and every pixel ``ka`` of its A patch, warp the
    pixel into B, round to the nearest fine pixel, and emit ``(m, ka, kb)`` when
    that pixel falls inside the B patch.
    """
    gw = grid[1]
    offs = patch_offsets(patch)
    ratio = cell_stride // fine_stride
    lo = -(patch // 2)
    rows = []
    for m, (ia, ib) in enumerate(np.asarray(pairs, dtype=np.int64)):
        ay, ax = divmod(int(ia), gw)
        by, bx = divmod(int(ib), gw)
        pa = np.stack([ax * ratio + offs[:, 1], ay * ratio + offs[:, 0]], axis=1) * fine_stride
        pb = np.rint(warp_points(H, pa) / fine_stride).astype(np.int64)
        ly = pb[:, 1] - by * ratio - lo
        lx = pb[:, 0] - bx * ratio - lo
        valid = (ly >= 0) & (ly < patch) & (lx >= 0) & (lx < patch)
        ka = np.nonzero(valid)[0]
        kb = ly[valid] * patch + lx[valid]
        rows.append(np.stack([np.full(len(ka), m), ka, kb], axis=1))
    if not rows:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(rows).astype(np.int64)
