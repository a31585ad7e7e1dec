"""Per-pair supervision and the gradient-accumulating optimisation loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ContractError, NumericalError
from ..matcher import cell_fine_anchor, dual_softmax, patch_offsets, refine_stage1
from ..numerics import Tensor, backward
from .groundtruth import fine_pixel_pairs, gt_from_homography
from .losses import coarse_loss, fine_loss_stage1, fine_loss_stage2, total_loss
from .optim import AdamW
from .synth import WarpJitter, synth_pair, warp_points

log = logging.getLogger(__name__)


SCHEDULES = ("constant", "cosine")


def dihedral_pair(img_a: np.ndarray, img_b: np.ndarray, H: np.ndarray, k: int):
    """Apply symmetry ``k`` in 0..7 of the square pixel grid to both images.

    Bit 0 transposes, bit 1 flips x, bit 2 flips y.  The returned homography
    is ``T H T^-1`` so the pair stays exactly consistent.
    """
    if img_a.shape != img_b.shape or img_a.shape[0] != img_a.shape[1]:
        raise ContractError("dihedral augmentation needs two square images of one size")
    last = img_a.shape[0] - 1
    T = np.eye(3)
    if k & 1:
        img_a, img_b = img_a.T, img_b.T
        T = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1.0]]) @ T
    if k & 2:
        img_a, img_b = img_a[:, ::-1], img_b[:, ::-1]
        T = np.array([[-1, 0, last], [0, 1, 0], [0, 0, 1.0]]) @ T
    if k & 4:
        img_a, img_b = img_a[::-1], img_b[::-1]
        T = np.array([[1, 0, 0], [0, -1, last], [0, 0, 1.0]]) @ T
    return (np.ascontiguousarray(img_a), np.ascontiguousarray(img_b), T @ H @ np.linalg.inv(T))


def lr_at(cfg: "TrainConfig", step: int, total_steps: int) -> float:
    """Learning rate for update ``step`` of ``total_steps``."""
    if cfg.schedule == "cosine" and total_steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return cfg.lr


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.1
    batch: int = 1
    grad_accum: int = 8
    epochs: int = 1
    alpha: float = 1.0
    beta: float = 0.25
    seed: int = 0
    # cap on supervised coarse pairs per image pair for the fine terms
    max_fine_pairs: int = 96
    # "constant" or "cosine" (decay to zero over all updates)
    schedule: str = "constant"
    # train on (B, A, H^-1) for a random half of the visits
    swap: bool = False
    # apply one random flip/transpose to both images, conjugating H
    dihedral: bool = False

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown lr schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights must be non-negative")
        if self.grad_accum < 1 or self.batch != 1:
            raise ContractError("batch is fixed at 1 and grad_accum must be >= 1")


@dataclass
class SyntheticDataset:
    """Seed-indexed synthetic homography pairs."""

    seeds: list[int]
    size: int = 128
    jitter: WarpJitter = WarpJitter()

    @classmethod
    def range(cls, n: int, start: int = 0, size: int = 128) -> "SyntheticDataset":
        return cls(list(range(start, start + n)), size)

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, i: int):
        return synth_pair(self.seeds[i], self.size, self.jitter)


@dataclass
class LossTerms:
    coarse: Tensor
    fine1: Tensor
    fine2: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return tuple(float(t.data) for t in (self.coarse, self.fine1, self.fine2, self.total))


def pair_loss(model, img_a: np.ndarray, img_b: np.ndarray, H: np.ndarray, cfg: TrainConfig,
              rng: np.random.Generator) -> LossTerms:
    """All three supervision terms for one image pair related by ``H``."""
    st = model.forward_pair(img_a, img_b)
    size = img_a.shape
    gt = gt_from_homography(H, st.grid, size)
    l_c = coarse_loss(dual_softmax(st.S), gt.coarse_pairs)

    pairs = gt.coarse_pairs
    if len(pairs) > cfg.max_fine_pairs:
        pairs = pairs[np.sort(rng.choice(len(pairs), cfg.max_fine_pairs, replace=False))]
    gw = st.grid[1]
    anchor_a = cell_fine_anchor(pairs[:, 0], gw)
    anchor_b = cell_fine_anchor(pairs[:, 1], gw)
    p = model.cfg.fine_patch
    sf = model.local_scores(st.fine, anchor_a, anchor_b)
    l_f1 = fine_loss_stage1(sf, fine_pixel_pairs(H, pairs, st.grid, p))

    # stage 2 starts from the stage-1 pixel; where that is more than one fine
    # pixel from the truth it falls back to the rounded true position
    offs = patch_offsets(p)
    local = refine_stage1(sf.data)
    ka = np.where(local[:, 0] >= 0, local[:, 0], (p // 2) * p + p // 2)
    pix_a = anchor_a + offs[ka]
    target = warp_points(H, 2.0 * pix_a[:, ::-1]) / 2.0  # (x, y) at half resolution
    pix_b = anchor_b + offs[np.maximum(local[:, 1], 0)]
    off = target - pix_b[:, ::-1]
    far = (local[:, 1] < 0) | (np.abs(off).max(axis=1) > 1.0)
    pix_b[far] = np.rint(target[far][:, ::-1]).astype(np.int64)
    off = target - pix_b[:, ::-1]
    fh, fw = st.fine.shape[-2:]
    ok = (pix_b[:, 0] >= 0) & (pix_b[:, 0] < fh) & (pix_b[:, 1] >= 0) & (pix_b[:, 1] < fw)
    ok &= np.abs(off).max(axis=1) <= 1.0
    if ok.any():
        pred = model.subpixel(st.fine, pix_a[ok], pix_b[ok])
        l_f2 = fine_loss_stage2(pred, off[ok])
    else:
        l_f2 = fine_loss_stage2(Tensor(np.zeros((0, 2), np.float32)), np.zeros((0, 2)))
    return LossTerms(l_c, l_f1, l_f2, total_loss(l_c, l_f1, l_f2, cfg.alpha, cfg.beta))


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float, float, float]]
    steps: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "L_c", "L_f1", "L_f2", "L_total"])
        for step, *vals in self.trace:
            w.writerow([step] + [f"{v:.6f}" for v in vals])
        return buf.getvalue()


def train_loop(model, dataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """AdamW over ``epochs`` passes of ``dataset``; one update every ``grad_accum`` pairs.

    The trace holds one row per update with the losses averaged over the
    accumulated pairs.  A non-finite loss raises :class:`NumericalError`
    naming the offending pair seed.
    """
    if len(dataset) == 0:
        raise ContractError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    # separate stream so the augmentation draws leave the default trajectory untouched
    swap_rng = np.random.default_rng([cfg.seed, 1])
    total_steps = math.ceil(cfg.epochs * len(dataset) / cfg.grad_accum)
    trace, acc, n_acc, step = [], np.zeros(4), 0, 0
    opt.zero_grad()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for idx in order:
            img_a, img_b, H = dataset[int(idx)]
            if cfg.swap and swap_rng.random() < 0.5:
                img_a, img_b, H = img_b, img_a, np.linalg.inv(H)
            if cfg.dihedral:
                img_a, img_b, H = dihedral_pair(img_a, img_b, H, int(swap_rng.integers(8)))
            terms = pair_loss(model, img_a, img_b, H, cfg, rng)
            vals = terms.values()
            if not all(math.isfinite(v) for v in vals):
                seed = dataset.seeds[int(idx)] if hasattr(dataset, "seeds") else int(idx)
                raise NumericalError(f"non-finite loss {vals} at step {step}, epoch {epoch}, pair seed {seed}")
            backward(terms.total * (1.0 / cfg.grad_accum))
            acc += vals
            n_acc += 1
            if n_acc == cfg.grad_accum:
                opt.lr = lr_at(cfg, step, total_steps)
                opt.step()
                opt.zero_grad()
                trace.append((step, *(acc / n_acc)))
                if progress:
                    progress(step, acc / n_acc)
                step += 1
                acc[:] = 0
                n_acc = 0
    if n_acc:
        opt.lr = lr_at(cfg, step, total_steps)
        opt.step()
        opt.zero_grad()
        trace.append((step, *(acc / n_acc)))
        step += 1
    model.eval()
    return TrainResult(trace, step)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
