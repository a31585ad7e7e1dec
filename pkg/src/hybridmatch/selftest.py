"""Fast internal consistency checks run by ``hybridmatch selftest``."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .backbone import Backbone, BackboneConfig
from .matcher import mnn_select
from .model import ModelConfig, build, load, save
from .numerics import Tensor, no_grad
from .ssm import DiscreteSsm, conv_kernel, scan_recurrent, selective_scan, ssm_kernel, zoh_discretize


def _scan_equivalence(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10):
        n, length = rng.integers(1, 9), rng.integers(1, 33)
        a_bar, b_bar = zoh_discretize(rng.uniform(0.01, 0.5, n), -rng.uniform(0.1, 2.0, n), rng.normal(size=n))
        ssm = DiscreteSsm(a_bar, b_bar, rng.normal(size=n))
        x = rng.normal(size=length)
        worst = max(worst, np.abs(scan_recurrent(ssm, x) - conv_kernel(x, ssm_kernel(ssm, length))).max())
    return worst < 1e-5, f"max abs diff {worst:.2e}"


def _selective_oracle(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        L, D, N = 6, 3, 4
        u, d = rng.normal(size=(1, L, D)), rng.uniform(0.05, 0.5, (1, L, D))
        A, Bm, Cm = -rng.uniform(0.5, 2, (D, N)), rng.normal(size=(1, L, N)), rng.normal(size=(1, L, N))
        with no_grad():
            y = selective_scan(Tensor(u), Tensor(d), Tensor(A), Tensor(Bm), Tensor(Cm)).data[0]
        h, ref = np.zeros((D, N)), np.empty((L, D))
        for t in range(L):
            h = np.exp(d[0, t][:, None] * A) * h + (d[0, t] * u[0, t])[:, None] * Bm[0, t][None]
            ref[t] = h @ Cm[0, t]
        worst = max(worst, np.abs(y - ref).max() / max(np.abs(ref).max(), 1e-12))
    return worst < 1e-4, f"max rel diff {worst:.2e}"


def _fusion(rng) -> tuple[bool, str]:
    bb = Backbone(BackboneConfig((4, 8, 8), 2), rng)
    for m in bb.modules():
        if hasattr(m, "running_var"):
            m.running_mean = rng.normal(size=m.running_mean.shape).astype(np.float32)
            m.running_var = rng.uniform(0.5, 2.0, m.running_var.shape).astype(np.float32)
    bb.eval()
    x = Tensor(rng.random((1, 1, 16, 16)).astype(np.float32))
    with no_grad():
        a, b = bb(x), bb.fused()(x)
    diff = max(np.abs(getattr(a, k).data - getattr(b, k).data).max() for k in ("f2", "f4", "f8"))
    return diff < 1e-5, f"max abs diff {diff:.2e}"


def _mnn(rng) -> tuple[bool, str]:
    for _ in range(100):
        P = rng.random((6, 7))
        m = mnn_select(P, 0.0)
        if len(set(m[:, 0])) != len(m) or len(set(m[:, 1])) != len(m):
            return False, "duplicate index"
        if {tuple(r) for r in mnn_select(P.T, 0.0)[:, 1::-1]} != {tuple(r) for r in m[:, :2]}:
            return False, "transpose asymmetry"
    return True, "100 matrices"


def _self_match(rng, seed) -> tuple[bool, str]:
    model = build(ModelConfig(coarse_dim=32, fine_dim=16, tau=0.0), seed)
    img = rng.random((64, 64))
    matches, _ = model.match_pair(img, img)
    ok = bool(np.all(matches.coarse[:, 0] == matches.coarse[:, 1]))
    return ok, f"{len(matches.coarse)} coarse matches"


def _archive(seed) -> tuple[bool, str]:
    model = build(ModelConfig(coarse_dim=16, fine_dim=8), seed)
    with tempfile.TemporaryDirectory() as d:
        p1, p2 = os.path.join(d, "a.hmw"), os.path.join(d, "b.hmw")
        save(model, p1)
        save(load(p1), p2)
        same = open(p1, "rb").read() == open(p2, "rb").read()
    return same, "byte-identical re-save" if same else "archives differ"


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    checks = [
        ("scan_equivalence", lambda: _scan_equivalence(rng)),
        ("selective_scan_oracle", lambda: _selective_oracle(rng)),
        ("conv_bn_fusion", lambda: _fusion(rng)),
        ("mnn_invariants", lambda: _mnn(rng)),
        ("self_match", lambda: _self_match(rng, seed)),
        ("archive_round_trip", lambda: _archive(seed)),
    ]
    return [(name, *fn()) for name, fn in checks]
