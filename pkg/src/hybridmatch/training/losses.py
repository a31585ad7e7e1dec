"""Supervision terms: coarse and fine log-likelihoods, sub-pixel L2, and their sum."""

from __future__ import annotations

import logging
from collections import Counter

import numpy as np

from ..errors import ContractError
from ..numerics import Tensor, ops

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
# how many times each loss term had nothing to average over
empty_loss_warnings: Counter = Counter()


def _empty(name: str, like: Tensor | None = None) -> Tensor:
    empty_loss_warnings[name] += 1
    log.debug("%s: no supervised entries, contributing 0", name)
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.zeros((), dtype=dtype))


def coarse_loss(P: Tensor, pairs) -> Tensor:
    """Mean negative log probability at the ground-truth cell pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return _empty("coarse", P)
    picked = P[pairs[:, 0], pairs[:, 1]]
    return ops.neg(ops.mean(ops.log(ops.clamp_min(picked, LOG_CLAMP))))


def fine_loss_stage1(S_f: Tensor, pixel_gt) -> Tensor:
    """Dual-softmax every local score matrix and average ``-log p`` at the
    supervised ``(m, ka, kb)`` entries."""
    pixel_gt = np.asarray(pixel_gt, dtype=np.int64).reshape(-1, 3)
    if len(pixel_gt) == 0:
        return _empty("fine_stage1", S_f)
    # log of the product of softmaxes, computed in log space for stability
    logp = ops.add(ops.log_softmax(S_f, axis=2), ops.log_softmax(S_f, axis=1))
    picked = logp[pixel_gt[:, 0], pixel_gt[:, 1], pixel_gt[:, 2]]
    return ops.neg(ops.mean(ops.clamp_min(picked, float(np.log(LOG_CLAMP)))))


def fine_loss_stage2(pred: Tensor, target) -> Tensor:
    """Mean squared Euclidean distance between predicted and target positions."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if len(target) == 0:
        return _empty("fine_stage2", pred)
    diff = ops.sub(pred, target.astype(pred.dtype))
    return ops.mean(ops.sum(ops.square(diff), axis=1))


def total_loss(l_c, l_f1, l_f2, alpha: float = 1.0, beta: float = 0.25):
    """``L_c + alpha * L_f1 + beta * L_f2``; accepts tensors or plain floats."""
    if alpha < 0 or beta < 0:
        raise ContractError("loss weights must be non-negative")
    if not any(isinstance(t, Tensor) for t in (l_c, l_f1, l_f2)):
        return l_c + alpha * l_f1 + beta * l_f2
    return ops.add(ops.add(l_c, ops.mul(l_f1, alpha)), ops.mul(l_f2, beta))
