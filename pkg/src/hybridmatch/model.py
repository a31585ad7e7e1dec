"""Full matcher: backbone, hybrid Mamba/attention stack, coarse matching, fine refinement."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .ds_transformer import CROSS_ATT, SELF_ATT, DsAttentionLayer, GatedMlpLayer
from .errors import ArchiveError, ConfigurationError, ContractError, PatternParseError
from .mamba_vision import COLUMN_MAJOR, ROW_MAJOR, MambaVisionLayer
from .matcher import (
    FineFusion,
    MatchSet,
    cell_fine_anchor,
    coarse_scores,
    dual_softmax,
    extract_patches,
    fine_scores,
    mnn_select,
    patch_offsets,
    refine_stage1,
    refine_stage2,
)
from .numerics import Module, ModuleList, Tensor, no_grad, ops

PRESETS = {
    "B": "M G Ms G S M G Ms G C M G Ms G S M G Ms G C M G Ms G",
    "T": "M G Ms G S M G Ms G C M G Ms G",
}
TOKENS = ("M", "Ms", "G", "S", "C")


@dataclass(frozen=True)
class LayerDescriptor:
    token: str
    kind: str  # mamba | gmlp | self_att | cross_att
    scan_mode: str | None = None


_DESCRIPTORS = {
    "M": LayerDescriptor("M", "mamba", ROW_MAJOR),
    "Ms": LayerDescriptor("Ms", "mamba", COLUMN_MAJOR),
    "G": LayerDescriptor("G", "gmlp"),
    "S": LayerDescriptor("S", "self_att"),
    "C": LayerDescriptor("C", "cross_att"),
}


def parse_pattern(s: str) -> list[LayerDescriptor]:
    """Whitespace-separated tokens (surrounding brackets allowed) to layer descriptors."""
    out = []
    for pos, tok in enumerate(s.strip().strip("[]").split(), start=1):
        if tok not in _DESCRIPTORS:
            raise PatternParseError(tok, pos)
        out.append(_DESCRIPTORS[tok])
    if not out:
        raise ConfigurationError("empty layer pattern")
    return out


@dataclass
class ModelConfig:
    pattern: str = PRESETS["T"]
    coarse_dim: int = 128
    fine_dim: int = 64
    direction: str = "uni"
    use_rope: bool = True
    optimized: bool = False
    ds_factor: int = 4
    tau: float = 0.2
    temperature: float = 0.1
    # raw-score threshold used when ``optimized`` skips the dual softmax
    score_threshold: float = 0.0
    heads: int = 1
    d_state: int = 16
    backbone_channels: tuple[int, int] = (32, 64)
    fine_patch: int = 8

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(pattern=PRESETS[name], **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class StageTimings:
    """Wall-clock milliseconds per pipeline stage."""

    backbone: float = 0.0
    hybrid: float = 0.0
    coarse: float = 0.0
    fine: float = 0.0
    total: float = 0.0

    STAGES = ("backbone", "hybrid", "coarse", "fine")

    def rows(self) -> list[tuple[str, float]]:
        return [(s, getattr(self, s)) for s in self.STAGES]

    def to_csv(self) -> str:
        return "stage,milliseconds\n" + "".join(f"{s},{ms:.3f}\n" for s, ms in self.rows())


@dataclass
class ForwardState:
    """Intermediate results of one pair pass, shared by matching and the loss."""

    S: Tensor
    fine: Tensor  # [2, Cf, H/2, W/2]
    grid: tuple[int, int]
    timings: StageTimings = field(default_factory=StageTimings)


class Model(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.coarse_dim % 2:
            raise ConfigurationError(f"coarse_dim must be even, got {cfg.coarse_dim}")
        if cfg.direction not in ("uni", "bi"):
            raise ConfigurationError(f"unknown direction {cfg.direction!r}")
        if not 0.0 <= cfg.tau < 1.0:
            raise ConfigurationError(f"tau must lie in [0, 1), got {cfg.tau}")
        if cfg.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        self.cfg = cfg
        self.descriptors = parse_pattern(cfg.pattern)
        c2, c4 = cfg.backbone_channels
        self.backbone = Backbone(BackboneConfig((c2, c4, cfg.coarse_dim)), rng)
        self.layers = ModuleList()
        for d in self.descriptors:
            self.layers.append(self._make_layer(d, rng))
        self.fusion = FineFusion(cfg.coarse_dim, c4, c2, cfg.fine_dim, rng)

    def _make_layer(self, d: LayerDescriptor, rng: np.random.Generator) -> Module:
        cfg = self.cfg
        if d.kind == "mamba":
            return MambaVisionLayer(cfg.coarse_dim, rng, d_state=cfg.d_state, scan_mode=d.scan_mode,
                                    direction=cfg.direction)
        if d.kind == "gmlp":
            return GatedMlpLayer(cfg.coarse_dim, rng)
        mode = SELF_ATT if d.kind == "self_att" else CROSS_ATT
        return DsAttentionLayer(cfg.coarse_dim, rng, heads=cfg.heads, ds_factor=cfg.ds_factor, mode=mode,
                                use_rope=cfg.use_rope)

    # -- forward pieces --------------------------------------------------------

    def hybrid(self, grid: Tensor) -> Tensor:
        """Run the layer stack on ``[2, h, w, C]`` holding image A then image B.

        Cross-attention updates both images from their features before the
        layer, so swapping A and B swaps the outputs.
        """
        x = grid
        for d, layer in zip(self.descriptors, self.layers):
            if d.kind == "cross_att":
                other = ops.concat([x[1:2], x[0:1]], axis=0)
                x = layer(x, other)
            else:
                x = layer(x)
        return x

    def forward_pair(self, img_a: np.ndarray, img_b: np.ndarray) -> ForwardState:
        """Both images ``[H, W]`` with extents divisible by 8."""
        if img_a.shape != img_b.shape:
            raise ContractError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
        dtype = self.backbone.groups[0][0].conv.weight.dtype
        t = StageTimings()
        t0 = time.perf_counter()
        x = Tensor(np.stack([img_a, img_b])[:, None].astype(dtype))
        feats = self.backbone(x)
        t1 = time.perf_counter()
        grid = ops.transpose(feats.f8, (0, 2, 3, 1))
        _, h, w, c = grid.shape
        grid = self.hybrid(grid)
        t2 = time.perf_counter()
        tokens = ops.mul(ops.reshape(grid, (2, h * w, c)), 1.0 / math.sqrt(c))
        S = coarse_scores(tokens[0], tokens[1], self.cfg.temperature).S
        t3 = time.perf_counter()
        fine = self.fusion(ops.transpose(grid, (0, 3, 1, 2)), feats.f4, feats.f2)
        t4 = time.perf_counter()
        t.backbone, t.hybrid, t.coarse, t.fine = ((b - a) * 1e3 for a, b in ((t0, t1), (t1, t2), (t2, t3), (t3, t4)))
        return ForwardState(S, fine, (h, w), t)

    def local_scores(self, fine: Tensor, anchors_a: np.ndarray, anchors_b: np.ndarray) -> Tensor:
        """Score matrices between fine patches around ``(y, x)`` anchors in A and B."""
        p = self.cfg.fine_patch
        pa = extract_patches(fine[0], anchors_a, p)
        pb = extract_patches(fine[1], anchors_b, p)
        scale = 1.0 / (fine.shape[1] * self.cfg.temperature)
        return ops.mul(fine_scores(pa, pb), scale)

    def subpixel(self, fine: Tensor, pix_a: np.ndarray, pix_b: np.ndarray) -> Tensor:
        """Stage-2 ``(dx, dy)`` for fine pixels ``(y, x)`` in A and their B estimates."""
        m = len(pix_a)
        feat_a = ops.reshape(extract_patches(fine[0], pix_a, 1), (m, fine.shape[1]))
        neigh_b = extract_patches(fine[1], pix_b, 3)
        return refine_stage2(feat_a, neigh_b)

    def coarse_matches(self, S: Tensor) -> np.ndarray:
        if self.cfg.optimized:
            return mnn_select(S.data, self.cfg.score_threshold)
        return mnn_select(dual_softmax(S).data, self.cfg.tau)

    # -- inference -------------------------------------------------------------

    def match_pair(self, img_a: np.ndarray, img_b: np.ndarray) -> tuple[MatchSet, StageTimings]:
        """Semi-dense matches between two grayscale images with values in ``[0, 1]``."""
        img_a = np.asarray(img_a, dtype=np.float64)
        img_b = np.asarray(img_b, dtype=np.float64)
        if img_a.ndim != 2 or img_a.shape != img_b.shape:
            raise ContractError("match_pair needs two grayscale images of equal shape")
        start = time.perf_counter()
        orig_h, orig_w = img_a.shape
        pa, pb = pad_to_multiple(img_a), pad_to_multiple(img_b)
        with no_grad():
            st = self.forward_pair(pa, pb)
            t0 = time.perf_counter()
            coarse = self.coarse_matches(st.S)
            st.timings.coarse += (time.perf_counter() - t0) * 1e3
            t0 = time.perf_counter()
            fine_rows = self._refine(st, coarse, (orig_h, orig_w))
            st.timings.fine += (time.perf_counter() - t0) * 1e3
        keep = fine_rows[:, 5].astype(bool)
        matches = MatchSet(coarse[keep], fine_rows[keep, :5])
        st.timings.total = (time.perf_counter() - start) * 1e3
        return matches, st.timings

    def _refine(self, st: ForwardState, coarse: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        """Rows ``(xa, ya, xb, yb, confidence, kept)`` for each coarse match."""
        out = np.zeros((len(coarse), 6))
        if len(coarse) == 0:
            return out
        gw = st.grid[1]
        ia, ib = coarse[:, 0].astype(np.int64), coarse[:, 1].astype(np.int64)
        anchor_a = cell_fine_anchor(ia, gw)
        anchor_b = cell_fine_anchor(ib, gw)
        sf = self.local_scores(st.fine, anchor_a, anchor_b).data
        local = refine_stage1(sf)
        kept = local[:, 0] >= 0
        offs = patch_offsets(self.cfg.fine_patch)
        pix_a = anchor_a + offs[np.maximum(local[:, 0], 0)]
        pix_b = anchor_b + offs[np.maximum(local[:, 1], 0)]
        delta = self.subpixel(st.fine, pix_a, pix_b).data.astype(np.float64)
        h, w = size
        xa = np.clip(2.0 * pix_a[:, 1], 0, w - 1)
        ya = np.clip(2.0 * pix_a[:, 0], 0, h - 1)
        xb = np.clip(2.0 * (pix_b[:, 1] + delta[:, 0]), 0, w - 1)
        yb = np.clip(2.0 * (pix_b[:, 0] + delta[:, 1]), 0, h - 1)
        out[:] = np.stack([xa, ya, xb, yb, coarse[:, 2], kept], axis=1)
        return out


def pad_to_multiple(img: np.ndarray, multiple: int = 8) -> np.ndarray:
    """Zero-pad the bottom and right edges so both extents divide ``multiple``."""
    h, w = img.shape
    return np.pad(img, ((0, -h % multiple), (0, -w % multiple)))


def build(cfg: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with deterministic initialisation; returned in eval mode."""
    return Model(cfg, np.random.default_rng(seed)).eval()


# -- weight archive --------------------------------------------------------------

MAGIC = b"HMWEIGHT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def save(model: Model, path) -> None:
    """Single-file archive: magic, version, JSON manifest length, manifest, raw float32 arrays."""
    state = model.state_dict()
    arrays, offset = [], 0
    for name, arr in state.items():
        n = int(np.prod(arr.shape)) * 4
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += n
    manifest = json.dumps({"config": model.cfg.to_dict(), "arrays": arrays}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_archive(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ArchiveError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ArchiveError(f"{path}: not a weight archive")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: archive version {version}, this build reads version {FORMAT_VERSION}")
    body = _HEADER.size + mlen
    if len(blob) < body:
        raise ArchiveError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[_HEADER.size:body])
        cfg = ModelConfig.from_dict(manifest["config"])
        entries = manifest["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{path}: corrupt manifest ({exc})") from exc
    state = {}
    for e in entries:
        shape = tuple(e["shape"])
        n = int(np.prod(shape))
        start = body + e["offset"]
        if start + 4 * n > len(blob):
            raise ArchiveError(f"{path}: truncated data for array {e['name']!r}")
        state[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape).astype(np.float32)
    return cfg, state


def load(path, cfg: ModelConfig | None = None) -> Model:
    """Rebuild the archived model; with ``cfg`` the arrays must fit that configuration instead."""
    stored_cfg, state = read_archive(path)
    model = build(cfg or stored_cfg)
    expected = model.state_dict()
    for name, arr in expected.items():
        if name not in state:
            raise ArchiveError(f"{path}: array {name!r} missing from archive")
        if tuple(state[name].shape) != tuple(arr.shape):
            raise ArchiveError(f"{path}: shape mismatch for array {name!r}: archive {state[name].shape}, "
                               f"model {arr.shape}")
    extra = set(state) - set(expected)
    if extra:
        raise ArchiveError(f"{path}: unexpected arrays {sorted(extra)[:3]}")
    model.load_state_dict(state)
    return model.eval()
