"""Network assembly: config validation, build, forward wiring, audits."""

import numpy as np
import pytest

from mtair.errors import ConfigError, NonFiniteError, ShapeError
from mtair.network import (
    NetworkConfig,
    assemble,
    audit_parameter_access,
    build,
    forward,
    parameter_census,
)
from mtair.tensor import Tensor
from mtair.weights import WeightStore

TINY = NetworkConfig(
    levels=2,
    blocks=(1, 1),
    channels=(8, 16),
    heads=(1, 2),
    block_types=("mt_dhb", "tb"),
    prompt_count=3,
    d_state=4,
    dt_rank=2,
    patch_size=8,
)


def tiny_image(rng, h=16, w=16):
    return Tensor(rng.random((1, h, w, 3), dtype=np.float32))


class TestConfig:
    def test_default_is_the_full_architecture(self):
        cfg = NetworkConfig()
        assert cfg.levels == 4
        assert cfg.blocks == (4, 6, 6, 8)
        assert cfg.channels == (48, 96, 192, 384)
        assert cfg.heads == (1, 2, 4, 8)
        assert cfg.size_multiple == 8

    def test_channel_doubling_enforced(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=2, blocks=(1, 1), channels=(8, 24),
                          heads=(1, 2), block_types=("mt_dhb", "tb"))

    def test_list_lengths_enforced(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=3, blocks=(1, 1), channels=(8, 16, 32),
                          heads=(1, 2, 4), block_types=("tb", "tb", "tb"))

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=2, blocks=(1, 1), channels=(9, 18),
                          heads=(1, 4), block_types=("tb", "tb"))

    def test_unknown_block_type_rejected(self):
        with pytest.raises(ConfigError):
            NetworkConfig(levels=2, blocks=(1, 1), channels=(8, 16),
                          heads=(1, 2), block_types=("mt_dhb", "vanilla"))

    def test_prompt_spatial_sizes_follow_levels(self):
        assert NetworkConfig().prompt_hw(1) == (128, 128)
        assert NetworkConfig().prompt_hw(3) == (32, 32)
        assert TINY.prompt_hw(1) == (8, 8)


class TestBuild:
    def test_same_seed_is_bit_identical(self):
        a, b = build(TINY, 7), build(TINY, 7)
        assert a.names() == b.names()
        for name, t in a.items():
            np.testing.assert_array_equal(t.data, b[name].data)

    def test_different_seed_differs(self):
        a, b = build(TINY, 7), build(TINY, 8)
        assert any(
            np.abs(t.data - b[n].data).max() > 0 for n, t in a.items()
        )

    def test_tiny_parameter_count_matches_hand_ledger(self):
        # Every subtotal below is summed from the weight shapes by hand.
        conv1x1 = lambda cin, cout: cin * cout + cout
        conv3x3 = lambda cin, cout: 9 * cin * cout + cout
        depthwise3 = lambda c: 9 * c + c

        def attn(c, heads):  # q/k/v point+depthwise pairs, out, temperatures
            branch = conv1x1(c, c) + depthwise3(c)
            return 3 * branch + conv1x1(c, c) + heads

        def scan(c, s, r):  # a_log,d,w_b,b_b,w_c,b_c,w_dt_low,w_dt,b_dt
            return c * s + c + s * c + s + s * c + s + r * c + c * r + c

        def vss(c, s, r):  # expand 2C, four scans, norm, out
            return (2 * c * c + 2 * c) + 4 * scan(c, s, r) + 2 * c + (c * c + c)

        def gates(c):  # w1..w4 of the interaction attention pair
            m = c // 4
            return conv1x1(c, m) + conv1x1(m, c) + conv1x1(c, m) + conv1x1(m, 1)

        def gdfn(c):
            hidden = int(2.66 * c)
            return (2 * c + conv1x1(c, 2 * hidden) + 2 * depthwise3(hidden)
                    + conv1x1(hidden, c))

        def mt_dhb(c, heads, s, r):
            return (2 * c + attn(c, heads) + vss(c, s, r)
                    + gates(c) + conv1x1(c, c) + gdfn(c))

        def tb(c, heads):
            return 2 * c + attn(c, heads) + gdfn(c)

        def prompt(c, n, hw, heads):
            m = c // 4
            return (n * c + n * hw * hw + conv1x1(c, m) + conv1x1(m, n)
                    + gates(c) + conv1x1(c, c) + attn(c, heads))

        assert attn(8, 1) == 529
        assert vss(8, 4, 2) == 840
        assert gdfn(8) == 990
        assert mt_dhb(8, 1, 4, 2) == 2510
        assert tb(16, 2) == 4590
        assert prompt(8, 3, 8, 1) == 907

        total = (
            conv3x3(3, 8)             # stem: 224
            + mt_dhb(8, 1, 4, 2)      # level1 encoder block
            + tb(16, 2)               # level2 encoder block
            + conv1x1(32, 16)         # downsample: 528
            + mt_dhb(8, 1, 4, 2)      # level1 decoder block
            + tb(16, 2)               # level2 decoder block
            + conv1x1(16, 32)         # upsample: 544
            + prompt(8, 3, 8, 1)      # skip prompt block
            + conv1x1(16, 8)          # skip bottleneck: 136
            + conv3x3(8, 3)           # head: 219
        )
        assert total == 16758
        assert build(TINY, 0).total_parameters() == total

    def test_census_groups_cover_every_level(self):
        ws = build(TINY, 0)
        census = parameter_census(ws)
        assert census["total"] == ws.total_parameters()
        assert set(census["groups"]) == {"stem", "level1", "level2", "head"}
        assert sum(census["groups"].values()) == census["total"]


class TestForward:
    def test_shape_contract_and_finite(self, rng):
        ws = build(TINY, 1)
        out = forward(tiny_image(rng), ws, TINY)
        assert out.shape == (1, 16, 16, 3)
        assert np.isfinite(out.data).all()
        assert out.dtype == np.float32

    def test_level_extent_trace(self, rng):
        ws = build(TINY, 1)
        trace = {}
        forward(tiny_image(rng, 16, 16), ws, TINY, trace=trace)
        assert trace["level1.enc"] == (1, 16, 16, 8)
        assert trace["latent"] == (1, 8, 8, 16)
        assert trace["level1.dec"] == (1, 16, 16, 8)

    def test_rectangular_size_round_trips(self, rng):
        ws = build(TINY, 1)
        out = forward(tiny_image(rng, 24, 16), ws, TINY)
        assert out.shape == (1, 24, 16, 3)

    def test_non_divisible_size_padded_and_cropped(self, rng):
        ws = build(TINY, 1)
        out = forward(tiny_image(rng, 15, 13), ws, TINY)
        assert out.shape == (1, 15, 13, 3)
        assert np.isfinite(out.data).all()

    def test_deterministic(self, rng):
        ws = build(TINY, 1)
        img = tiny_image(rng)
        a = forward(img, ws, TINY)
        b = forward(img, ws, TINY)
        np.testing.assert_array_equal(a.data, b.data)

    def test_prompt_codebooks_are_load_bearing(self, rng):
        ws = build(TINY, 1)
        img = tiny_image(rng)
        base = forward(img, ws, TINY)
        ws["level1.prompt.p_c"].data += 0.5
        bumped = forward(img, ws, TINY)
        assert np.abs(bumped.data - base.data).max() > 1e-6

    def test_assembled_weights_match_store_path(self, rng):
        ws = build(TINY, 1)
        img = tiny_image(rng)
        nw = assemble(ws, TINY)
        np.testing.assert_array_equal(
            forward(img, ws, TINY).data, forward(img, nw, TINY).data
        )

    def test_missing_parameter_is_named(self):
        ws = build(TINY, 1)
        partial = WeightStore()
        for name, t in ws.items():
            if name != "level1.fuse.kernel":
                partial.add(name, t.data)
        with pytest.raises(ShapeError, match="level1.fuse.kernel"):
            assemble(partial, TINY)

    def test_wrong_shape_parameter_is_named(self):
        ws = build(TINY, 1)
        bad = WeightStore()
        for name, t in ws.items():
            arr = t.data if name != "head.bias" else np.zeros(4, np.float32)
            bad.add(name, arr)
        with pytest.raises(ShapeError, match="head.bias"):
            assemble(bad, TINY)

    def test_non_finite_diagnostic_names_the_layer(self, rng):
        ws = build(TINY, 1)
        ws["level2.enc.block0.gdfn.expand.kernel"].data[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteError, match="level2.enc.block0"):
            forward(tiny_image(rng), ws, TINY)

    def test_global_residual_flag_changes_output(self, rng):
        cfg = NetworkConfig(
            levels=2, blocks=(1, 1), channels=(8, 16), heads=(1, 2),
            block_types=("mt_dhb", "tb"), prompt_count=3, d_state=4,
            dt_rank=2, patch_size=8, global_residual=True,
        )
        ws = build(TINY, 1)  # same parameter set satisfies both configs
        img = tiny_image(rng)
        plain = forward(img, ws, TINY)
        withres = forward(img, ws, cfg)
        np.testing.assert_allclose(
            withres.data, plain.data + img.data, rtol=0, atol=1e-6
        )

    def test_single_level_degenerate_config(self, rng):
        cfg = NetworkConfig(levels=1, blocks=(1,), channels=(8,), heads=(1,),
                            block_types=("tb",), prompt_count=2, patch_size=4)
        ws = build(cfg, 3)
        out = forward(tiny_image(rng, 6, 7), ws, cfg)
        assert out.shape == (1, 6, 7, 3)


class TestAudit:
    def test_every_parameter_consumed_exactly_once(self):
        ws = build(TINY, 2)
        report = audit_parameter_access(TINY, ws)
        assert report["orphans"] == []
        assert report["reused"] == []
        assert all(k == 1 for k in report["counts"].values())

    def test_latent_prompt_config_audits_clean(self):
        cfg = NetworkConfig(
            levels=2, blocks=(1, 1), channels=(8, 16), heads=(1, 2),
            block_types=("mt_dhb", "tb"), prompt_count=3, d_state=4,
            dt_rank=2, patch_size=8, latent_prompt=True,
        )
        ws = build(cfg, 2)
        assert any(n.startswith("latent.prompt.") for n in ws.names())
        report = audit_parameter_access(cfg, ws)
        assert report["orphans"] == [] and report["reused"] == []

    def test_orphan_detected_when_wiring_skips_it(self):
        ws = build(TINY, 2)
        ws.add("level9.unused.kernel", np.zeros((1, 1, 1, 1), np.float32))
        report = audit_parameter_access(TINY, ws)
        assert report["orphans"] == ["level9.unused.kernel"]


class TestFullScale:
    def test_full_config_builds_and_audits_clean(self):
        cfg = NetworkConfig()
        ws = build(cfg, 0)
        census = parameter_census(ws)
        assert census["total"] > 10_000_000  # full-size model
        report = audit_parameter_access(cfg, ws)
        assert report["orphans"] == [] and report["reused"] == []
