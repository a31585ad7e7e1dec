"""Homography accuracy of predicted matches: DLT fit, corner error, AUC, precision."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .training.synth import WarpJitter, synth_pair, warp_points

AUC_THRESHOLDS = (3.0, 5.0, 10.0)
PRECISION_PX = 2.0
STANDARD_EVAL_SEED = 10_000
TAU_GRID = (0.2, 0.5, 0.8, 0.9, 0.95, 0.98, 0.99, 0.995)


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def normalized_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography with ``dst ~ H src`` from ``>= 4`` point pairs."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ContractError("normalized_dlt: point lists differ in length")
    if len(src) < 4:
        raise ContractError(f"normalized_dlt needs at least 4 correspondences, got {len(src)}")
    Ts, Td = _normalizer(src), _normalizer(dst)
    s = warp_points(Ts, src)
    d = warp_points(Td, dst)
    n = len(s)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    Hn = np.linalg.svd(A)[2][-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def image_corners(size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, size: tuple[int, int]) -> float:
    """Mean distance between the image corners warped by the two homographies."""
    c = image_corners(size)
    with np.errstate(all="ignore"):
        err = np.linalg.norm(warp_points(H_est, c) - warp_points(H_gt, c), axis=1).mean()
    return float(err) if np.isfinite(err) else float("inf")


def error_auc(errors, thresholds=AUC_THRESHOLDS) -> dict[float, float]:
    """Area under the recall-vs-error curve up to each threshold, normalised to ``[0, 1]``."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    n = len(errors)
    if n == 0:
        return {t: 0.0 for t in thresholds}
    recall = np.arange(1, n + 1) / n
    errs = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = {}
    for t in thresholds:
        last = np.searchsorted(errs, t)
        x = np.concatenate([errs[:last], [t]])
        y = np.concatenate([recall[:last], [recall[last - 1]]])
        out[t] = float(np.trapezoid(y, x) / t)
    return out


def match_precision(fine: np.ndarray, H: np.ndarray, px: float = PRECISION_PX) -> float:
    """Fraction of ``(xa, ya, xb, yb, ...)`` rows whose B point lies within ``px`` of ``H`` applied to A."""
    fine = np.asarray(fine, dtype=np.float64)
    if fine.size == 0:
        return 0.0
    fine = fine.reshape(len(fine), -1)
    err = np.linalg.norm(warp_points(H, fine[:, :2]) - fine[:, 2:4], axis=1)
    return float((err <= px).mean())


@dataclass
class PairResult:
    seed: int
    n_matches: int
    precision: float
    corner_error: float


@dataclass
class HomographyReport:
    auc: dict[float, float]
    precision: float
    pairs: list[PairResult] = field(default_factory=list)

    @property
    def mean_matches(self) -> float:
        return float(np.mean([p.n_matches for p in self.pairs])) if self.pairs else 0.0

    def summary_lines(self) -> list[str]:
        lines = [f"pairs: {len(self.pairs)}", f"mean matches per pair: {self.mean_matches:.1f}"]
        lines += [f"AUC@{t:g}px: {100 * v:.2f}%" for t, v in self.auc.items()]
        lines.append(f"precision@{PRECISION_PX:g}px: {100 * self.precision:.2f}%")
        return lines


def score_pair(fine: np.ndarray, H_gt: np.ndarray, size: tuple[int, int], seed: int = 0) -> PairResult:
    """Fit ``H`` to the matches and score it; fewer than 4 matches is a failure."""
    fine = np.asarray(fine, dtype=np.float64).reshape(-1, 5) if len(fine) else np.zeros((0, 5))
    if len(fine) < 4:
        err = float("inf")
    else:
        err = corner_error(normalized_dlt(fine[:, :2], fine[:, 2:4]), H_gt, size)
    return PairResult(seed, len(fine), match_precision(fine, H_gt), err)


def evaluate_homography(match_fn, n_pairs: int = 50, seed: int = STANDARD_EVAL_SEED, size: int = 128,
                        jitter: WarpJitter | None = None) -> HomographyReport:
    """Score ``match_fn(img_a, img_b, H) -> fine rows`` on ``n_pairs`` synthetic pairs.

    Pair ``k`` uses generator seed ``seed + k``; precision is averaged over pairs.
    """
    results = []
    for k in range(n_pairs):
        img_a, img_b, H = synth_pair(seed + k, size, jitter)
        fine = match_fn(img_a, img_b, H)
        results.append(score_pair(fine, H, img_a.shape, seed + k))
    auc = error_auc([r.corner_error for r in results])
    precision = float(np.mean([r.precision for r in results])) if results else 0.0
    return HomographyReport(auc, precision, results)


def model_matcher(model):
    """Adapter turning a model into the ``match_fn`` expected by :func:`evaluate_homography`."""
    def fn(img_a, img_b, H):
        return model.match_pair(img_a, img_b)[0].fine
    return fn


def oracle_matcher(step: int = 8):
    """Ground-truth matches on a regular grid, for sanity checks of the harness."""
    def fn(img_a, img_b, H):
        h, w = img_a.shape
        ys, xs = np.mgrid[0:h:step, 0:w:step]
        pa = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        pb = warp_points(H, pa)
        inside = (pb[:, 0] >= 0) & (pb[:, 0] <= w - 1) & (pb[:, 1] >= 0) & (pb[:, 1] <= h - 1)
        return np.concatenate([pa[inside], pb[inside], np.ones((inside.sum(), 1))], axis=1)
    return fn


def select_tau(model, pairs, grid=TAU_GRID, px: float = AUC_THRESHOLDS[0]) -> tuple[float, dict[float, float]]:
    """Match threshold from ``grid`` with the highest AUC@``px`` on ``(img_a, img_b, H)`` pairs.

    The mutual-nearest set does not depend on the threshold and refinement is
    per match, so each pair is matched once at threshold 0 and every grid value
    just drops rows below it.  Ties go to the lower threshold.
    """
    if not grid or not all(0.0 <= t < 1.0 for t in grid):
        raise ContractError("tau grid must be non-empty with values in [0, 1)")
    saved = model.cfg
    model.cfg = replace(saved, tau=0.0, optimized=False)
    try:
        rows = [(model.match_pair(a, b)[0].fine, H, a.shape) for a, b, H in pairs]
    finally:
        model.cfg = saved
    aucs = {}
    for t in sorted(grid):
        errs = [score_pair(f[f[:, 4] >= t], H, size).corner_error for f, H, size in rows]
        aucs[t] = error_auc(errs, (px,))[px]
    best = max(aucs, key=lambda t: (aucs[t], -t))
    return best, aucs
