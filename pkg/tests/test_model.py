import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmatch import (
    PRESETS,
    ArchiveError,
    ConfigurationError,
    ContractError,
    ModelConfig,
    PatternParseError,
    build,
    load,
    parse_pattern,
    save,
)
from hybridmatch.training import texture

from helpers import reference_presets

SMALL = dict(coarse_dim=16, fine_dim=8, backbone_channels=(4, 8), d_state=4)
REFERENCE = reference_presets()


class TestPatternParsing:
    def test_tiny_preset_verbatim(self):
        count, pattern = REFERENCE["T"]
        assert PRESETS["T"] == pattern
        tokens = [d.token for d in parse_pattern(PRESETS["T"])]
        assert len(tokens) == count == 14
        assert tokens == "M G Ms G S M G Ms G C M G Ms G".split()

    def test_base_preset_verbatim(self):
        count, pattern = REFERENCE["B"]
        assert PRESETS["B"] == pattern
        tokens = [d.token for d in parse_pattern(PRESETS["B"])]
        assert len(tokens) == count == 24
        assert tokens[-1] == "G"

    def test_brackets_accepted(self):
        assert len(parse_pattern("[M G Ms]")) == 3

    def test_unknown_token_position(self):
        with pytest.raises(PatternParseError) as exc:
            parse_pattern("M X")
        assert exc.value.position == 2
        assert exc.value.token == "X"

    def test_kinds(self):
        kinds = [(d.kind, d.scan_mode) for d in parse_pattern("M Ms G S C")]
        assert kinds == [("mamba", "row_major"), ("mamba", "column_major"), ("gmlp", None), ("self_att", None),
                         ("cross_att", None)]

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            parse_pattern("  ")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(["M", "Ms", "G", "S", "C"]), min_size=1, max_size=30))
    def test_round_trip(self, tokens):
        assert [d.token for d in parse_pattern(" ".join(tokens))] == tokens


class TestBuild:
    def test_odd_coarse_dim(self):
        with pytest.raises(ConfigurationError):
            build(ModelConfig(coarse_dim=17, fine_dim=8, backbone_channels=(4, 8)))

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.preset("Q")

    def test_same_seed_bit_identical(self):
        a, b = build(ModelConfig(**SMALL), 5), build(ModelConfig(**SMALL), 5)
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_different_seed_differs(self):
        a, b = build(ModelConfig(**SMALL), 5).state_dict(), build(ModelConfig(**SMALL), 6).state_dict()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_tiny_smaller_than_base(self):
        t = build(ModelConfig.preset("T", **SMALL)).num_parameters()
        b = build(ModelConfig.preset("B", **SMALL)).num_parameters()
        assert t < b

    def test_base_parameter_count_formula(self):
        # count per layer kind at desk-scale dims, written out independently
        C, Cf, N, c2, c4 = 128, 64, 16, 32, 64
        d = C // 2
        mamba = (2 * C  # norm
                 + 2 * (C * d + d)  # input projections
                 + 2 * (3 * d + d)  # depthwise convs
                 + d * N + (d * d + d) + 2 * d * N  # a_log, delta projection, B and C projections
                 + C * C + C)  # output projection
        gmlp = 2 * C + 2 * (C * 2 * C + 2 * C) + (2 * C * C + C)
        attn = 3 * C * C
        bn = lambda c: 2 * c  # noqa: E731
        backbone = (9 * 1 * c2 + bn(c2) + 2 * (9 * c2 * c2 + bn(c2))
                    + 9 * c2 * c4 + bn(c4) + 2 * (9 * c4 * c4 + bn(c4))
                    + 9 * c4 * C + bn(C) + 2 * (9 * C * C + bn(C)))
        fusion = (c4 * C + C) + (9 * C * Cf + Cf) + (c2 * Cf + Cf) + (9 * Cf * Cf + Cf)
        tokens = PRESETS["B"].split()
        per = {"M": mamba, "Ms": mamba, "G": gmlp, "S": attn, "C": attn}
        expected = backbone + fusion + sum(per[t] for t in tokens)
        assert build(ModelConfig.preset("B")).num_parameters() == expected == 2200864


@pytest.fixture(scope="module")
def small_model():
    return build(ModelConfig(tau=0.0, **SMALL), 3)


class TestMatchPair:
    def test_self_match_identity(self):
        model = build(ModelConfig(tau=0.0), 2)
        img = texture(np.random.default_rng(7), 64)
        matches, _ = model.match_pair(img, img)
        assert len(matches.coarse) > 0
        assert np.array_equal(matches.coarse[:, 0], matches.coarse[:, 1])
        offset = np.abs(matches.fine[:, :2] - matches.fine[:, 2:4])
        assert offset.max() <= 8.0

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 10_000))
    def test_self_match_property(self, seed):
        model = build(ModelConfig(tau=0.0, **SMALL), seed % 7)
        img = np.random.default_rng(seed).random((48, 40))
        matches, _ = model.match_pair(img, img)
        assert np.array_equal(matches.coarse[:, 0], matches.coarse[:, 1])

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_translation_moves_indices(self, k):
        model = build(ModelConfig(tau=0.0), 0)
        img = texture(np.random.default_rng(100), 128)
        shifted = np.zeros_like(img)
        shifted[:, 8 * k:] = img[:, :-8 * k]
        matches, _ = model.match_pair(img, shifted)
        ia, ib = matches.coarse[:, 0].astype(int), matches.coarse[:, 1].astype(int)
        ra, ca = np.divmod(ia, 16)
        interior = (ca >= 1) & (ca + k <= 14) & (ra >= 1) & (ra <= 14)
        assert interior.sum() >= 20
        assert np.all(ib[interior] == ia[interior] + k)

    def test_deterministic(self, small_model):
        rng = np.random.default_rng(4)
        a, b = rng.random((64, 64)), rng.random((64, 64))
        m1, _ = small_model.match_pair(a, b)
        m2, _ = small_model.match_pair(a, b)
        assert np.array_equal(m1.coarse, m2.coarse) and np.array_equal(m1.fine, m2.fine)

    def test_timings_sum_to_total(self):
        model = build(ModelConfig(), 0)
        img = texture(np.random.default_rng(1), 128)
        model.match_pair(img, img)  # warm caches
        _, t = model.match_pair(img, img)
        parts = sum(ms for _, ms in t.rows())
        assert t.total > 0
        assert abs(parts - t.total) <= 0.05 * t.total

    def test_timings_csv(self, small_model):
        img = np.random.default_rng(0).random((32, 32))
        _, t = small_model.match_pair(img, img)
        lines = t.to_csv().splitlines()
        assert lines[0] == "stage,milliseconds"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["backbone", "hybrid", "coarse", "fine"]

    def test_zero_matches(self):
        model = build(ModelConfig(tau=0.999, **SMALL), 0)
        rng = np.random.default_rng(0)
        matches, t = model.match_pair(rng.random((32, 32)), rng.random((32, 32)))
        assert len(matches) == 0 and matches.coarse.shape == (0, 3) and matches.fine.shape == (0, 5)
        assert t.backbone > 0 and t.hybrid > 0 and t.total > 0

    def test_unpadded_input(self, small_model):
        img = np.random.default_rng(2).random((37, 45))
        matches, _ = small_model.match_pair(img, img)
        assert np.all(matches.fine[:, [0, 2]] <= 44) and np.all(matches.fine[:, [1, 3]] <= 36)

    def test_shape_mismatch(self, small_model):
        with pytest.raises(ContractError):
            small_model.match_pair(np.zeros((32, 32)), np.zeros((32, 40)))

    def test_optimized_threshold_path(self):
        cfg = ModelConfig(optimized=True, score_threshold=-1e9, **SMALL)
        model = build(cfg, 1)
        img = np.random.default_rng(3).random((32, 32))
        matches, _ = model.match_pair(img, img)
        assert len(matches.coarse) > 0


class TestArchive:
    def test_round_trip_byte_identical(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.hmw", tmp_path / "b.hmw"
        save(small_model, p1)
        loaded = load(p1)
        save(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.cfg == small_model.cfg
        for k, v in small_model.state_dict().items():
            assert np.array_equal(loaded.state_dict()[k], v)

    def test_loaded_model_matches_same(self, small_model, tmp_path):
        save(small_model, tmp_path / "a.hmw")
        loaded = load(tmp_path / "a.hmw")
        img = np.random.default_rng(9).random((32, 32))
        a, _ = small_model.match_pair(img, img[::-1].copy())
        b, _ = loaded.match_pair(img, img[::-1].copy())
        assert np.array_equal(a.fine, b.fine)

    @pytest.mark.parametrize("keep", [0, 10, 30, -4])
    def test_truncated(self, small_model, tmp_path, keep):
        p = tmp_path / "a.hmw"
        save(small_model, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:keep] if keep >= 0 else blob[:len(blob) + keep])
        with pytest.raises(ArchiveError):
            load(p)

    def test_bad_magic(self, small_model, tmp_path):
        p = tmp_path / "a.hmw"
        save(small_model, p)
        p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
        with pytest.raises(ArchiveError, match="not a weight archive"):
            load(p)

    def test_version_mismatch(self, small_model, tmp_path):
        p = tmp_path / "a.hmw"
        save(small_model, p)
        blob = bytearray(p.read_bytes())
        struct.pack_into("<I", blob, 8, 99)
        p.write_bytes(bytes(blob))
        with pytest.raises(ArchiveError, match="version 99"):
            load(p)

    def test_mismatched_config_names_array(self, small_model, tmp_path):
        p = tmp_path / "a.hmw"
        save(small_model, p)
        other = ModelConfig(**{**SMALL, "fine_dim": 12})
        with pytest.raises(ArchiveError, match=r"shape mismatch for array 'fusion\.\w+\.\w+'"):
            load(p, other)
