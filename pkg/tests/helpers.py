"""Shared fixtures-by-hand: deterministic parameter filling and oracle weight extraction."""

import re
from pathlib import Path

import numpy as np


def fill_params(module, seed, scale=0.5):
    """Overwrite every parameter (sorted by name) with float64 normals from ``seed``."""
    module.astype(np.float64)
    rng = np.random.default_rng(seed)
    for _, p in sorted(module.named_parameters()):
        p.data = rng.normal(0.0, scale, p.shape)
    return module


def mamba_weights(layer):
    s = layer.ssm
    return {
        "ng": layer.norm.weight.data, "nb": layer.norm.bias.data,
        "wx": layer.proj_in_x.weight.data, "bx": layer.proj_in_x.bias.data,
        "wz": layer.proj_in_z.weight.data, "bz": layer.proj_in_z.bias.data,
        "cx": layer.conv_x.weight.data, "cxb": layer.conv_x.bias.data,
        "cz": layer.conv_z.weight.data, "czb": layer.conv_z.bias.data,
        "a_log": s.a_log.data, "wd": s.proj_delta.weight.data, "bd": s.proj_delta.bias.data,
        "wb": s.proj_b.weight.data, "wc": s.proj_c.weight.data,
        "wo": layer.proj_out.weight.data, "bo": layer.proj_out.bias.data,
    }


def gmlp_weights(layer):
    return {
        "ng": layer.norm.weight.data, "nb": layer.norm.bias.data,
        "wg": layer.w_gate.weight.data, "bg": layer.w_gate.bias.data,
        "wv": layer.w_val.weight.data, "bv": layer.w_val.bias.data,
        "wo": layer.w_out.weight.data, "bo": layer.w_out.bias.data,
    }


# -- reference layer patterns ----------------------------------------------------------

_REFERENCE = Path(__file__).resolve().parents[1] / "paper.md"


def reference_presets() -> dict:
    """``{"B": (layer_count, pattern), "T": ...}`` read from the reference document."""
    text = _REFERENCE.read_text()
    out = {}
    for label, count, pattern in re.findall(
            r"\((Base|Tiny)\).*?Architecture: (\d+) layers.*?Layer Pattern: \[(.*?)\]", text, re.S):
        out[label[0]] = (int(count), pattern.replace("M$_{s}$", "Ms"))
    return out
