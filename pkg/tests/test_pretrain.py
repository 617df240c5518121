import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semisup_asr.encoder import EncoderConfig
from semisup_asr.frontend import SegmentationPolicy
from semisup_asr.numcore import Optimizer, OptimizerConfig, Tensor, grad_check, make_rng
from semisup_asr.pretrain import (
    ContrastiveConfig,
    PretrainError,
    PretrainMaskPolicy,
    PretrainModel,
    apply_feature_mask,
    contrastive_loss,
    make_segments,
    masks_to_array,
    pretrain_step,
    sample_distractors,
    sample_masks,
    train_pretrain,
)
from semisup_asr.synth import SyntheticTaskSpec, synth_generate

POLICY = PretrainMaskPolicy()
COVERAGE = 1 - (1 - 0.065) ** 10


class TestMasks:
    def test_coverage_matches_independent_starts(self):
        t, n = 200, 10_000
        frac = np.mean([sample_masks(t, POLICY, 0, (i,)).time_mask()[10:].mean() for i in range(n)])
        assert abs(frac - COVERAGE) < 0.01 * COVERAGE

    def test_position_uniform_away_from_start(self):
        t, n = 60, 40_000
        hits = np.zeros(t)
        for i in range(n):
            hits += sample_masks(t, POLICY, 1, (i,)).time_mask()
        # draws are conditioned on at least one masked frame
        expected = COVERAGE / (1 - (1 - 0.065) ** t)
        marginal = hits[10:] / n
        assert np.max(np.abs(marginal - expected)) < 0.01

    def test_single_frame(self):
        m = sample_masks(1, POLICY, 3)
        assert m.time_mask().tolist() == [True]

    @given(st.integers(1, 80), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_never_empty_and_clipped(self, t, seed):
        mask = sample_masks(t, PretrainMaskPolicy(0.01, 10), seed).time_mask()
        assert mask.shape == (t,) and mask.any()

    def test_deterministic(self):
        a, b = sample_masks(50, POLICY, 9, ("u", 1)), sample_masks(50, POLICY, 9, ("u", 1))
        np.testing.assert_array_equal(a.time_mask(), b.time_mask())

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            PretrainMaskPolicy(0.0, 10)


class TestFeatureMask:
    def setup_method(self):
        rng = make_rng(0, "fm")
        self.x = Tensor(rng.standard_normal((2, 5, 3)), requires_grad=True)
        self.v = Tensor(rng.standard_normal(3), requires_grad=True)

    def test_empty_mask_is_identity(self):
        out = apply_feature_mask(self.x, np.zeros((2, 5), bool), self.v)
        np.testing.assert_array_equal(out.data, self.x.data)

    def test_all_masked(self):
        out = apply_feature_mask(self.x, np.ones((2, 5), bool), self.v)
        np.testing.assert_array_equal(out.data, np.broadcast_to(self.v.data, (2, 5, 3)))

    def test_gradients_split_by_mask(self):
        mask = np.zeros((2, 5), bool)
        mask[0, 1:3] = mask[1, 4] = True
        w = make_rng(1, "w").standard_normal((2, 5, 3))
        (apply_feature_mask(self.x, mask, self.v) * w).sum().backward()
        np.testing.assert_allclose(self.v.grad, w[mask].sum(0), atol=1e-12)
        np.testing.assert_array_equal(self.x.grad[mask], 0.0)
        np.testing.assert_array_equal(self.x.grad[~mask], w[~mask])
        assert grad_check(lambda x, v: (apply_feature_mask(x, mask, v) ** 2).sum(), self.x, self.v) < 1e-6


def _vectors(seed, b=1, t=12, d=4):
    rng = make_rng(seed, "vec")
    return Tensor(rng.standard_normal((b, t, d)), requires_grad=True), Tensor(rng.standard_normal((b, t, d)),
                                                                              requires_grad=True)


class TestContrastiveLoss:
    @pytest.mark.parametrize("k", [1, 4, 9])
    def test_uniform_similarity(self, k):
        same = Tensor(np.ones((1, 12, 4)))
        mask = np.zeros((1, 12), bool)
        mask[0, :k + 1] = True
        loss = contrastive_loss(same, same, mask, ContrastiveConfig(n_distractors=k), seed=0)
        assert loss.item() == pytest.approx(np.log(k + 1), abs=1e-12)

    def test_saturation(self):
        q = Tensor(np.eye(6)[None])
        mask = np.ones((1, 6), bool)
        loss = contrastive_loss(q, q, mask, ContrastiveConfig(n_distractors=5, temperature=1e-3), seed=0)
        assert loss.item() < 1e-100

    def test_three_positions_one_distractor(self):
        c, q = _vectors(2, t=5)
        mask = np.array([[True, False, True, True, False]])
        cfg = ContrastiveConfig(n_distractors=1)
        pos = [0, 2, 3]

        def cos(a, b):
            return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

        def oracle(choice):
            total = 0.0
            for i, j in zip(pos, choice):
                s_pos, s_neg = cos(c.data[0, i], q.data[0, i]) / 0.1, cos(c.data[0, i], q.data[0, j]) / 0.1
                total += -s_pos + np.logaddexp(s_pos, s_neg)
            return total / 3

        options = {ch: oracle(ch) for ch in itertools.product(*[[p for p in pos if p != i] for i in pos])}
        drawn = sample_distractors(3, 1, make_rng(11, "distractors"))
        expected = tuple(pos[int(d)] for d in drawn[:, 0])
        got = contrastive_loss(c, q, mask, cfg, seed=11).item()
        assert got == pytest.approx(options[expected], abs=1e-10)
        assert sum(abs(got - v) < 1e-10 for v in options.values()) >= 1

    def test_common_rescaling(self):
        c, q = _vectors(3, b=2)
        mask = masks_to_array([sample_masks(12, POLICY, 0, (i,)) for i in range(2)], 12)
        cfg = ContrastiveConfig(n_distractors=3)
        a = contrastive_loss(c, q, mask, cfg, seed=4).item()
        b = contrastive_loss(c * 3.0, q * 3.0, mask, cfg, seed=4).item()
        assert abs(a - b) < 1e-9

    def test_unmasked_targets_irrelevant(self):
        c, q = _vectors(5)
        mask = np.zeros((1, 12), bool)
        mask[0, [1, 4, 5, 9]] = True
        cfg = ContrastiveConfig(n_distractors=3)
        noisy = q.data.copy()
        noisy[~mask] += 100.0
        assert contrastive_loss(c, q, mask, cfg, 1).item() == contrastive_loss(c, Tensor(noisy), mask, cfg, 1).item()

    def test_gradient(self):
        c, q = _vectors(6, b=2)
        mask = np.zeros((2, 12), bool)
        mask[0, 2:8] = mask[1, [0, 3, 11]] = True
        cfg = ContrastiveConfig(n_distractors=4)
        assert grad_check(lambda a, b: contrastive_loss(a, b, mask, cfg, 3), c, q) < 1e-6

    def test_replacement_is_flagged(self):
        c, q = _vectors(7)
        mask = np.zeros((1, 12), bool)
        mask[0, :3] = True
        with pytest.warns(UserWarning, match="replacement"):
            _, info = contrastive_loss(c, q, mask, ContrastiveConfig(5, clip_to_available=False), 0,
                                       return_info=True)
        assert info["with_replacement"]

    def test_no_masked_positions(self):
        c, q = _vectors(8)
        with pytest.raises(PretrainError):
            contrastive_loss(c, q, np.zeros((1, 12), bool), ContrastiveConfig(), 0)

    @given(st.integers(2, 30), st.integers(1, 12), st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_distractors_exclude_self(self, m, k, seed):
        k = min(k, m - 1)
        d = sample_distractors(m, k, make_rng(seed, "d"))
        assert not np.any(d == np.arange(m)[:, None])
        assert all(len(set(row)) == k for row in d)


TOY = EncoderConfig(n_layers=2, enc_dim=16, n_heads=2, conv_kernel=3, n_mels=16, sub_channels=(4, 8),
                    time_reduction=2, ff_mult=2)


@pytest.fixture(scope="module")
def segments():
    task = synth_generate(SyntheticTaskSpec(n_supervised=0, n_unlabeled=120, n_dev=0), 0)
    return make_segments([u.features for u in task.unlabeled], SegmentationPolicy(32, 64, 32), 2.0, 0)


def _opt(model, lr=2e-3):
    return Optimizer(dict(model.named_parameters()), OptimizerConfig(kind="adam", peak_lr=lr, warmup_steps=20))


class TestPretraining:
    def test_end_to_end_gradient(self):
        model = PretrainModel(TOY, ContrastiveConfig(n_distractors=3), make_rng(0, "pm"))
        model.train()
        x = make_rng(1, "x").standard_normal((2, 24, 16))
        params = [p for _, p in model.named_parameters()]
        err = grad_check(lambda *ps: model(x, [24, 20], POLICY, ContrastiveConfig(n_distractors=3), 5),
                         *params, max_coords=6, rng=make_rng(2, "coords"))
        assert err < 1e-4

    def test_loss_decreases(self, segments):
        cfg = EncoderConfig(n_layers=2, enc_dim=48, n_heads=4, conv_kernel=5, n_mels=16, sub_channels=(8, 16),
                            time_reduction=2, ff_mult=2)
        model = PretrainModel(cfg, ContrastiveConfig(), make_rng(0, "pm"))
        losses = train_pretrain(model, segments, 200, _opt(model, lr=3e-3), 16, 32, 2.0, seed=0)
        assert np.mean(losses[-10:]) <= 0.8 * np.mean(losses[:10])

    def test_zero_lr(self, segments):
        model = PretrainModel(TOY, ContrastiveConfig(), make_rng(0, "pm"))
        before = {k: p.data.copy() for k, p in model.named_parameters()}
        train_pretrain(model, segments, 3, _opt(model, lr=0.0), 4, 32, 2.0, seed=0)
        for k, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[k])

    def test_deterministic(self, segments):
        runs = []
        for _ in range(2):
            model = PretrainModel(TOY, ContrastiveConfig(), make_rng(0, "pm"))
            runs.append(train_pretrain(model, segments, 4, _opt(model), 4, 32, 2.0, seed=7))
        assert runs[0] == runs[1]

    def test_non_finite_rolled_back(self, segments):
        model = PretrainModel(TOY, ContrastiveConfig(), make_rng(0, "pm"))
        model.pretrain.target.weight.data[...] = np.inf
        opt = _opt(model)
        before = {k: p.data.copy() for k, p in model.named_parameters()}
        from semisup_asr.pretrain import sample_chunk_batch

        with pytest.raises(PretrainError):
            pretrain_step(sample_chunk_batch(segments, 2, 32, 2.0, 0, 0), model, opt)
        for k, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[k])
        assert opt.step_count == 0

    def test_heads_not_in_encoder_state(self):
        model = PretrainModel(TOY, ContrastiveConfig(), make_rng(0, "pm"))
        keys = model.encoder_state()
        assert keys and not any(k.startswith("pretrain/") for k in keys)
        assert all(k.startswith(("feature_encoder/", "context_network/")) for k in keys)
