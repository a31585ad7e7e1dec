"""Finite-difference gradient suites for every primitive and layer type.

Every suite builds a small instance in float64, contracts its output with a
fixed random tensor and compares taped gradients against central differences
for the input and for every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import ConvBnRelu
from .ds_transformer import CROSS_ATT, SELF_ATT, DsAttentionLayer, GatedMlpLayer, rope_encode
from .mamba_vision import COLUMN_MAJOR, ROW_MAJOR, MambaVisionLayer
from .matcher import FineFusion, dual_softmax, refine_stage2
from .numerics import Module, Tensor, check_gradients, ops
from .ssm import selective_scan

TOLERANCE = 1e-2
LAYER_MARKERS = ("M", "Ms", "G", "S", "C")


@dataclass
class SuiteResult:
    name: str
    max_error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < TOLERANCE)


def _leaf(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _contract(fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Scalar loss ``sum(fn() * r)`` with ``r`` drawn once."""
    r = rng.normal(size=fn().shape)
    return lambda: ops.sum(ops.mul(fn(), r))


def _check(fn, tensors, rng, n_entries=8) -> float:
    return max(check_gradients(_contract(fn, rng), tensors, n_entries=n_entries, rng=rng))


def _module_suite(module: Module, inputs: list[Tensor], fn, rng) -> float:
    module.astype(np.float64)
    return _check(fn, inputs + module.parameters(), rng)


def primitive_suites(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def matmul():
        a, b = _leaf(rng, 3, 4, 5), _leaf(rng, 5, 2)
        return _check(lambda: ops.matmul(a, b), [a, b], rng)

    def linear():
        x, w, b = _leaf(rng, 4, 3), _leaf(rng, 3, 5), _leaf(rng, 5)
        return _check(lambda: ops.linear(x, w, b), [x, w, b], rng)

    def softmax():
        x = _leaf(rng, 4, 6)
        return _check(lambda: ops.softmax(x, axis=1), [x], rng)

    def log_softmax():
        x = _leaf(rng, 4, 6)
        return _check(lambda: ops.log_softmax(x, axis=0), [x], rng)

    def layer_norm():
        x, g, b = _leaf(rng, 5, 8), _leaf(rng, 8), _leaf(rng, 8)
        return _check(lambda: ops.layer_norm(x, g, b), [x, g, b], rng)

    def batch_norm():
        x, g, b = _leaf(rng, 3, 4, 5, 5), _leaf(rng, 4), _leaf(rng, 4)
        return _check(lambda: ops.batch_norm(x, g, b, training=True), [x, g, b], rng)

    def conv2d():
        x, w, b = _leaf(rng, 2, 3, 7, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
        return _check(lambda: ops.conv2d(x, w, b, stride=2, pad=1), [x, w, b], rng)

    def conv1d():
        x, w, b = _leaf(rng, 2, 4, 9), _leaf(rng, 4, 1, 3), _leaf(rng, 4)
        return _check(lambda: ops.conv1d(x, w, b, groups=4), [x, w, b], rng)

    def bilinear_resize():
        x = _leaf(rng, 2, 3, 4, 6)
        return _check(lambda: ops.bilinear_resize(x, 7, 3), [x], rng)

    def selective_scan_():
        u, d = _leaf(rng, 2, 7, 3), Tensor(rng.uniform(0.05, 0.5, (2, 7, 3)), requires_grad=True)
        A = Tensor(-rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        Bm, Cm = _leaf(rng, 2, 7, 4), _leaf(rng, 2, 7, 4)
        return _check(lambda: selective_scan(u, d, A, Bm, Cm), [u, d, A, Bm, Cm], rng)

    def rope():
        x = _leaf(rng, 2, 6, 8)
        pos = rng.integers(0, 5, (6, 2))
        return _check(lambda: rope_encode(x, pos), [x], rng)

    def silu_softplus():
        x = _leaf(rng, 10)
        return _check(lambda: ops.add(ops.silu(x), ops.softplus(x)), [x], rng)

    def dual_softmax_():
        s = _leaf(rng, 5, 6)
        return _check(lambda: dual_softmax(s), [s], rng)

    return {
        "matmul": matmul, "linear": linear, "softmax": softmax, "log_softmax": log_softmax,
        "layer_norm": layer_norm, "batch_norm": batch_norm, "conv2d": conv2d, "conv1d": conv1d,
        "bilinear_resize": bilinear_resize, "selective_scan": selective_scan_, "rope": rope,
        "silu_softplus": silu_softplus, "dual_softmax": dual_softmax_,
    }


def layer_suites(rng: np.random.Generator, dim: int = 16) -> dict[str, Callable[[], float]]:
    def mamba(mode):
        def run():
            layer = MambaVisionLayer(dim, rng, d_state=4, scan_mode=mode)
            x = _leaf(rng, 2, 3, 4, dim)
            return _module_suite(layer, [x], lambda: layer(x), rng)
        return run

    def gmlp():
        layer = GatedMlpLayer(dim, rng)
        x = _leaf(rng, 2, 3, 4, dim)
        return _module_suite(layer, [x], lambda: layer(x), rng)

    def self_att():
        layer = DsAttentionLayer(dim, rng, heads=2, ds_factor=2, mode=SELF_ATT)
        x = _leaf(rng, 2, 4, 4, dim)
        return _module_suite(layer, [x], lambda: layer(x), rng)

    def cross_att():
        layer = DsAttentionLayer(dim, rng, heads=2, ds_factor=2, mode=CROSS_ATT)
        xa, xb = _leaf(rng, 1, 4, 4, dim), _leaf(rng, 1, 4, 4, dim)
        return _module_suite(layer, [xa, xb], lambda: layer(xa, xb), rng)

    def backbone_block():
        layer = ConvBnRelu(2, 4, 2, rng)
        x = _leaf(rng, 2, 2, 6, 6)
        return _module_suite(layer, [x], lambda: layer(x), rng)

    def fine_fusion():
        layer = FineFusion(8, 4, 3, 5, rng)
        f8, f4, f2 = _leaf(rng, 1, 8, 2, 2), _leaf(rng, 1, 4, 4, 4), _leaf(rng, 1, 3, 8, 8)
        return _module_suite(layer, [f8, f4, f2], lambda: layer(f8, f4, f2), rng)

    def subpixel():
        fa, nb = _leaf(rng, 3, 8), _leaf(rng, 3, 9, 8)
        return _check(lambda: refine_stage2(fa, nb), [fa, nb], rng)

    return {
        "M": mamba(ROW_MAJOR), "Ms": mamba(COLUMN_MAJOR), "G": gmlp, "S": self_att, "C": cross_att,
        "backbone_block": backbone_block, "fine_fusion": fine_fusion, "subpixel_head": subpixel,
    }


def run_gradcheck(seed: int = 0) -> list[SuiteResult]:
    """Run every suite with a generator derived from ``seed``; order is fixed."""
    out = []
    for group in (primitive_suites, layer_suites):
        for name, suite in group(np.random.default_rng(seed)).items():
            try:
                err = float(suite())
            except FloatingPointError:
                err = float("inf")
            out.append(SuiteResult(name, err))
    return out
