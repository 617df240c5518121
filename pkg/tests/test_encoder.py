import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semisup_asr.encoder import (
    PRETRAINABLE_PREFIXES,
    ConfigError,
    ConformerBlock,
    EncoderConfig,
    EncoderError,
    ProjectionBlockConfig,
    build_encoder,
    checkpoint_transplant,
    format_encoder_config,
    parse_encoder_config,
    stack_frames,
    unstack_frames,
    variant_config,
    variant_projection,
)
from semisup_asr.numcore import Tensor, grad_check, make_rng, no_grad

TOY = EncoderConfig(n_layers=2, enc_dim=16, n_heads=2, conv_kernel=3)


def toy_param_census(cfg: EncoderConfig, out_dim: int) -> int:
    """Hand count, sub-layer by sub-layer, for a linear projection block."""
    d, k, m = cfg.enc_dim, cfg.conv_kernel, cfg.ff_mult
    c1, c2 = cfg.subsampling_channels
    f_out = -(-(-(-cfg.n_mels // 2)) // 2)
    sub = (9 * c1 + c1) + (9 * c1 * c2 + c2) + (c2 * f_out * d + d)
    ln = 2 * d
    ffn = ln + (d * m * d + m * d) + (m * d * d + d)
    mhsa = ln + 4 * (d * d + d)
    conv = ln + (d * 2 * d + 2 * d) + k * d + 2 * d + (d * d + d)
    block = 2 * ffn + mhsa + conv + ln
    context = (d * d + d) + cfg.n_layers * block
    proj = (d * out_dim + out_dim) + 2 * out_dim
    return sub + context + proj


def _toy_model(cfg=TOY, proj=None, seed=0):
    return build_encoder(cfg, proj or ProjectionBlockConfig(out_dim=12), make_rng(seed, "toy"))


class TestSubsampling:
    @pytest.mark.parametrize("t,reduction,expected", [(100, 4, 25), (103, 4, 26), (100, 2, 50)])
    def test_output_length(self, t, reduction, expected):
        cfg = EncoderConfig(1, 16, 2, 3, time_reduction=reduction, n_mels=8, sub_channels=(2, 4))
        enc = _toy_model(cfg)
        y, lengths = enc.feature_encoder(np.zeros((1, t, 8)), [t])
        assert y.shape == (1, expected, 16)
        assert lengths.tolist() == [expected]

    def test_too_short_rejected(self):
        enc = _toy_model(EncoderConfig(1, 16, 2, 3, n_mels=8, sub_channels=(2, 4)))
        with pytest.raises(EncoderError):
            enc.feature_encoder(np.zeros((1, 3, 8)), [3])


class TestConformerBlock:
    def test_shape_preserved(self):
        blk = ConformerBlock(16, 2, 3, make_rng(0))
        x = Tensor(make_rng(1).standard_normal((2, 7, 16)))
        assert blk(x, np.ones((2, 7), bool)).shape == (2, 7, 16)

    def test_dim_mismatch_rejected(self):
        blk = ConformerBlock(16, 2, 3, make_rng(0))
        with pytest.raises(EncoderError):
            blk(Tensor(np.zeros((1, 4, 8))), np.ones((1, 4), bool))

    def test_attention_rows_normalized(self):
        blk = ConformerBlock(16, 4, 3, make_rng(0), relative=True)
        mask = np.ones((2, 9), bool)
        mask[1, 6:] = False
        blk(Tensor(make_rng(1).standard_normal((2, 9, 16))), mask)
        np.testing.assert_allclose(blk.attn.last_weights.sum(-1), 1.0, atol=1e-9)

    def test_circular_shift_equivariance(self):
        blk = ConformerBlock(16, 2, 5, make_rng(3), relative=False)
        blk.conv.circular = True
        x = make_rng(4).standard_normal((1, 11, 16))
        mask = np.ones((1, 11), bool)
        with no_grad():
            y = blk(Tensor(x), mask).data
            y_shift = blk(Tensor(np.roll(x, 3, axis=1)), mask).data
        np.testing.assert_allclose(y_shift, np.roll(y, 3, axis=1), atol=1e-10)

    @pytest.mark.parametrize("offset", [1, 4, 9])
    def test_relative_translation_invariance(self, offset):
        blk = ConformerBlock(16, 2, 3, make_rng(5), relative=True, max_rel=16)
        seq = make_rng(6).standard_normal((6, 16))
        n = 20

        def run(start):
            buf = make_rng(7 + start).standard_normal((1, n, 16))
            buf[0, start:start + 6] = seq
            mask = np.zeros((1, n), bool)
            mask[0, start:start + 6] = True
            with no_grad():
                return blk(Tensor(buf), mask).data[0, start:start + 6]

        np.testing.assert_allclose(run(offset), run(0), atol=1e-10)


class TestStacking:
    def test_halves_time(self):
        assert stack_frames(Tensor(np.zeros((1, 10, 8)))).shape == (1, 5, 16)

    def test_odd_length_padded(self):
        x = np.arange(3.0).reshape(1, 1, 3)
        y = stack_frames(Tensor(x)).data
        np.testing.assert_array_equal(y, [[[0.0, 1.0, 2.0, 0.0, 0.0, 0.0]]])

    @given(st.integers(1, 6), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_bijection_on_even_length(self, half, c):
        x = np.random.default_rng(half * 10 + c).standard_normal((2, 2 * half, c))
        np.testing.assert_array_equal(unstack_frames(stack_frames(Tensor(x))).data, x)
        np.testing.assert_array_equal(stack_frames(Tensor(x)).data[:, 0], np.concatenate([x[:, 0], x[:, 1]], -1))


class TestBuildEncoder:
    def test_toy_census(self):
        enc = build_encoder(TOY, ProjectionBlockConfig(out_dim=12))
        assert enc.num_params() == toy_param_census(TOY, 12)

    def test_count_pure_function_of_config(self):
        a = build_encoder(TOY, ProjectionBlockConfig(out_dim=12), make_rng(1)).num_params()
        b = build_encoder(TOY, ProjectionBlockConfig(out_dim=12)).num_params()
        assert a == b

    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_doubling_layers_increases_count(self, n):
        small = build_encoder(EncoderConfig(n, 16, 2, 3)).num_params()
        big = build_encoder(EncoderConfig(2 * n, 16, 2, 3)).num_params()
        assert big > small

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            variant_config("XXXL")

    def test_plus_variant_adds_conformer_projection(self):
        assert variant_projection("XXL+").kind == "conformer_plus_stack"
        assert variant_projection("XXL").kind == "linear"

    def test_xxl_and_plus_share_pretrainable_paths(self):
        xxl = build_encoder(variant_config("XXL"), variant_projection("XXL"))
        plus = build_encoder(variant_config("XXL+"), variant_projection("XXL+"))
        pre = lambda m: {k: v.shape for k, v in m.named_parameters() if k.startswith(PRETRAINABLE_PREFIXES)}
        assert pre(xxl) == pre(plus)

    def test_full_forward_output_lengths(self):
        enc = _toy_model(proj=ProjectionBlockConfig("conformer_plus_stack", 12))
        y, lengths = enc(make_rng(2).standard_normal((2, 41, 80)), [41, 30])
        assert y.shape == (2, 6, 12)
        assert lengths.tolist() == [6, 4]
        assert enc.output_lengths([41, 30]).tolist() == [6, 4]


class TestPadding:
    @pytest.mark.parametrize("kind", ["linear", "conformer_plus_stack"])
    def test_padded_frames_do_not_leak(self, kind):
        enc = _toy_model(proj=ProjectionBlockConfig(kind, 12))
        rng = make_rng(8)
        a = rng.standard_normal((1, 37, 80))
        b = rng.standard_normal((1, 29, 80))
        with no_grad():
            y1, l1 = enc(np.concatenate([a, np.pad(b, ((0, 0), (0, 8), (0, 0)))]), [37, 29])
            garbage = np.concatenate([a, rng.standard_normal((1, 12, 80))], axis=1)
            bpad = np.concatenate([b, rng.standard_normal((1, 20, 80))], axis=1)
            y2, l2 = enc(np.concatenate([garbage, bpad]), [37, 29])
        assert l1.tolist() == l2.tolist()
        for i, n in enumerate(l1):
            np.testing.assert_allclose(y2.data[i, :n], y1.data[i, :n], atol=1e-10)

    def test_eval_mode_padding(self):
        enc = _toy_model().eval()
        x = make_rng(9).standard_normal((1, 24, 80))
        with no_grad():
            y1, _ = enc(x, [24])
            y2, _ = enc(np.concatenate([x, np.full((1, 9, 80), 5.0)], axis=1), [24])
        np.testing.assert_allclose(y2.data[0, :6], y1.data[0], atol=1e-10)


class TestGradient:
    def test_end_to_end_toy_encoder(self):
        cfg = EncoderConfig(2, 8, 2, 3, n_mels=8, sub_channels=(2, 4), relative_attention=True, max_rel=4)
        enc = build_encoder(cfg, ProjectionBlockConfig("conformer_plus_stack", 6), make_rng(0))
        params = enc.parameters()
        probe = [params[k] for k in ("feature_encoder/conv1_weight", "context_network/blocks/0/conv/depthwise",
                                     "context_network/blocks/1/attn/rel_key", "projection/linear/weight")]
        feats = Tensor(make_rng(1).standard_normal((2, 11, 8)))
        target = make_rng(2).standard_normal((2, 2, 6))

        def fn(x, *_):
            y, _ = enc(x, [11, 9])
            return ((y - Tensor(target)) ** 2).sum()

        err = grad_check(fn, feats, *probe, max_coords=12, rng=make_rng(3))
        assert err < 1e-4


class TestTransplant:
    def _pair(self, src_cfg, dst_cfg, dst_proj):
        src = build_encoder(src_cfg, ProjectionBlockConfig(out_dim=12), make_rng(0))
        dst = build_encoder(dst_cfg, dst_proj, make_rng(1))
        return src, dst

    def test_into_plus_variant(self):
        src, dst = self._pair(TOY, TOY, ProjectionBlockConfig("conformer_plus_stack", 12))
        fresh_before = {k: v.data.copy() for k, v in dst.named_parameters() if k.startswith("projection/")}
        report = checkpoint_transplant(src.state_dict(), dst)
        assert report.fraction_pretrainable_copied == 1.0
        assert all(k.startswith("projection/") for k in report.fresh)
        assert any(k.startswith("projection/conformer/") for k in report.fresh)
        srcp = src.parameters()
        for k, p in dst.named_parameters():
            if k.startswith(PRETRAINABLE_PREFIXES):
                np.testing.assert_array_equal(p.data, srcp[k].data)
            else:
                np.testing.assert_array_equal(p.data, fresh_before[k])

    def test_identical_architecture_has_no_fresh_encoder_paths(self):
        src, dst = self._pair(TOY, TOY, ProjectionBlockConfig(out_dim=12))
        report = checkpoint_transplant(src.state_dict(), dst)
        assert not [k for k in report.fresh if k.startswith(PRETRAINABLE_PREFIXES)]

    def test_depth_mismatch_rejected_unless_partial(self):
        deeper = EncoderConfig(3, 16, 2, 3)
        src, dst = self._pair(TOY, deeper, ProjectionBlockConfig(out_dim=12))
        with pytest.raises(EncoderError):
            checkpoint_transplant(src.state_dict(), dst)
        report = checkpoint_transplant(src.state_dict(), dst, allow_partial=True)
        assert any(k.startswith("context_network/blocks/2/") for k in report.fresh)
        assert 0 < report.fraction_pretrainable_copied < 1

    def test_shape_conflict_rejected(self):
        src, dst = self._pair(TOY, EncoderConfig(2, 16, 2, 5), ProjectionBlockConfig(out_dim=12))
        with pytest.raises(EncoderError, match="shape conflict"):
            checkpoint_transplant(src.state_dict(), dst, allow_partial=True)

    def test_pretraining_heads_ignored(self):
        src, dst = self._pair(TOY, TOY, ProjectionBlockConfig(out_dim=12))
        state = dict(src.state_dict(), **{"pretrain/target/weight": np.zeros((3, 3))})
        report = checkpoint_transplant(state, dst)
        assert "pretrain/target/weight" in report.ignored


class TestConfigText:
    def test_round_trip(self):
        cfg = EncoderConfig(3, 32, 4, 7, relative_attention=True, time_reduction=2, sub_channels=(4, 8))
        assert parse_encoder_config(format_encoder_config(cfg)) == cfg

    def test_variant_seed_with_override(self):
        cfg = parse_encoder_config("variant = XL\ntime_reduction = 2x\n")
        assert (cfg.n_layers, cfg.enc_dim, cfg.time_reduction) == (24, 1024, 2)

    @pytest.mark.parametrize("text", ["n_layers = 2\nenc_dim = 15\nn_heads = 2\nconv_kernel = 3",
                                      "bogus = 1", "n_layers 2"])
    def test_malformed_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_encoder_config(text)
