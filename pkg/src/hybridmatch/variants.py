"""Agreement between the standard (dual-softmax) and optimised (raw-score) coarse matchers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matcher import dual_softmax, mnn_select
from .model import Model, pad_to_multiple
from .numerics import no_grad


def _scores(model: Model, img_a, img_b) -> np.ndarray:
    with no_grad():
        return model.forward_pair(pad_to_multiple(img_a), pad_to_multiple(img_b)).S


def _as_set(m: np.ndarray) -> set:
    return {(int(i), int(j)) for i, j in m[:, :2]}


def calibrate_score_threshold(model: Model, dataset, max_pairs: int = 32) -> float:
    """Raw-score threshold that best reproduces the standard matcher's coarse sets.

    Candidates are the raw-score MNN pairs; the threshold is placed midway between
    the two neighbouring candidate scores that minimise the total set disagreement.
    """
    scored = []  # (raw score, kept by standard matcher)
    for k in range(min(len(dataset), max_pairs)):
        img_a, img_b, _ = dataset[k]
        S = _scores(model, img_a, img_b)
        standard = _as_set(mnn_select(dual_softmax(S).data, model.cfg.tau))
        raw = mnn_select(S.data, -np.inf)
        scored += [(float(s), (int(i), int(j)) in standard) for i, j, s in raw]
    if not scored:
        return 0.0
    scored.sort()
    s = np.array([v for v, _ in scored])
    kept = np.array([k for _, k in scored], dtype=np.int64)
    # cutting below index c rejects scored[:c] and accepts scored[c:]
    errors = np.concatenate([[0], np.cumsum(kept)]) + np.concatenate([np.cumsum((1 - kept)[::-1])[::-1], [0]])
    c = int(np.argmin(errors))
    if c == 0:
        return float(s[0] - 1.0)
    if c == len(s):
        return float(s[-1] + 1.0)
    return float(0.5 * (s[c - 1] + s[c]))


@dataclass
class PairAgreement:
    margin: float
    identical: bool
    n_standard: int
    n_optimized: int


def decision_margin(model: Model, S) -> float:
    """Distance of the closest call to either rule's threshold.

    Every raw-score MNN candidate contributes its dual-softmax distance to ``tau``;
    raw-score distances to ``score_threshold`` are multiplied by the temperature so
    they are measured in feature-similarity units.
    """
    P, raw = dual_softmax(S).data, S.data
    cand = mnn_select(raw, -np.inf)
    if len(cand) == 0:
        return float("inf")
    i, j = cand[:, 0].astype(int), cand[:, 1].astype(int)
    m_std = np.abs(P[i, j] - model.cfg.tau)
    m_opt = np.abs(raw[i, j] - model.cfg.score_threshold) * model.cfg.temperature
    return float(min(m_std.min(), m_opt.min()))


def variant_agreement(model: Model, pairs) -> list[PairAgreement]:
    """Per-pair comparison of standard and optimised coarse sets for ``(img_a, img_b)`` pairs."""
    out = []
    for img_a, img_b in pairs:
        S = _scores(model, img_a, img_b)
        std = _as_set(mnn_select(dual_softmax(S).data, model.cfg.tau))
        opt = _as_set(mnn_select(S.data, model.cfg.score_threshold))
        out.append(PairAgreement(decision_margin(model, S), std == opt, len(std), len(opt)))
    return out
