import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semisup_asr.encoder import EncoderConfig, ProjectionBlockConfig
from semisup_asr.frontend import FeatureSequence, SpecAugmentPolicy
from semisup_asr.numcore import OptimizerConfig, Tensor, grad_check, make_rng, no_grad, transformer_lr
from semisup_asr.numcore import functional as F
from semisup_asr.synth import SyntheticTaskSpec, synth_generate
from semisup_asr.textkit import FusionParams, LmConfig, TransformerLM, corpus_wer, train_lm, train_wpm
from semisup_asr.transducer import (
    Decoder,
    DecoderConfig,
    FinetuneConfig,
    Hypothesis,
    NonFiniteLoss,
    TransducerError,
    beam_search,
    build_transducer,
    decode_record,
    decode_utterance,
    finetune_step,
    fused_score,
    greedy_decode,
    lattice_scores,
    load_transducer,
    make_optimizers,
    read_decode_manifest,
    rnnt_loss,
    save_transducer,
    train_transducer,
    tune_fusion,
    write_decode_manifest,
)


def random_lattice(rng, t, u, v):
    logits = rng.standard_normal((t, u + 1, v)) * 1.5
    return logits - np.log(np.exp(logits).sum(-1, keepdims=True))


def brute_force_nll(lp, labels):
    """-log of the sum over every placement of the labels among T + U steps (last step blank)."""
    t, u = lp.shape[0], len(labels)
    total = []
    for label_steps in itertools.combinations(range(t + u - 1), u):
        ti = ui = 0
        s = 0.0
        for step in range(t + u):
            if step in label_steps:
                s += lp[ti, ui, labels[ui]]
                ui += 1
            else:
                s += lp[ti, ui, 0]
                ti += 1
        total.append(s)
    return -np.logaddexp.reduce(total)


class TestRnntLoss:
    def test_matches_enumeration_on_random_lattices(self):
        rng = make_rng(0, "rnnt-oracle")
        worst = 0.0
        for _ in range(200):
            t, u, v = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(2, 4))
            lp = random_lattice(rng, t, u, v)
            labels = rng.integers(1, v, size=u).tolist()
            worst = max(worst, abs(rnnt_loss(lp, labels).item() - brute_force_nll(lp, labels)))
        assert worst < 1e-8

    def test_two_paths_example(self):
        lp = np.log(np.array([[[0.6, 0.4], [0.3, 0.7]], [[0.2, 0.8], [0.9, 0.1]]]))
        # label at frame 0 then blank, blank; or blank, label at frame 1 then blank
        p = 0.4 * 0.3 * 0.9 + 0.6 * 0.8 * 0.9
        assert rnnt_loss(lp, [1]).item() == pytest.approx(-np.log(p), abs=1e-12)

    def test_no_labels_is_blank_path(self):
        lp = random_lattice(make_rng(1, "u0"), 4, 0, 3)
        assert rnnt_loss(lp, []).item() == pytest.approx(-lp[:, 0, 0].sum(), abs=1e-12)

    def test_no_frames_rejected(self):
        with pytest.raises(TransducerError):
            rnnt_loss(np.zeros((0, 2, 3)), [1])

    def test_forward_and_backward_agree(self):
        rng = make_rng(2, "ab")
        lat = np.stack([random_lattice(rng, 5, 3, 4) for _ in range(3)])
        sc = lattice_scores(lat, np.array([[1, 2, 3], [2, 2, 0], [3, 0, 0]]), [5, 3, 4], [3, 2, 1])
        np.testing.assert_allclose(sc.log_z_alpha, sc.log_z_beta, atol=1e-8)

    def test_padding_does_not_leak(self):
        rng = make_rng(3, "pad")
        a, b = random_lattice(rng, 3, 1, 4), random_lattice(rng, 5, 3, 4)
        lat = np.zeros((2, 5, 4, 4))
        lat[0, :3, :2] = a
        lat[0, 3:] = 123.0
        lat[1] = b
        losses = rnnt_loss(lat, np.array([[2, 0, 0], [1, 3, 2]]), [3, 5], [1, 3], reduction="none").data
        np.testing.assert_allclose(losses, [rnnt_loss(a, [2]).item(), rnnt_loss(b, [1, 3, 2]).item()], atol=1e-12)

    def test_gradient_on_padded_batch(self):
        rng = make_rng(4, "grad")
        logits = Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
        labels = np.array([[1, 2], [2, 0]])
        err = grad_check(lambda x: rnnt_loss(F.log_softmax(x), labels, [4, 2], [2, 1]), logits)
        assert err < 1e-5

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_loss_is_a_valid_nll(self, seed):
        rng = make_rng(seed, "nll")
        lp = random_lattice(rng, 3, 2, 3)
        assert rnnt_loss(lp, rng.integers(1, 3, size=2).tolist()).item() > 0


class TestFusedScore:
    def test_no_fusion_is_asr_score(self):
        assert fused_score(Hypothesis((3, 4), -7.5, -2.0), FusionParams()) == -7.5

    def test_arithmetic(self):
        assert fused_score(Hypothesis((1, 2, 3), -10.0, -4.0), FusionParams(0.5, 1.0)) == pytest.approx(-9.0)

    @given(st.floats(0, 5), st.floats(0.1, 5))
    def test_reward_favours_longer(self, beta, delta):
        short, long = Hypothesis((1,), -1.0, -1.0), Hypothesis((1, 2, 3), -4.0, -3.0)
        lo, hi = FusionParams(0.3, beta), FusionParams(0.3, beta + delta)
        assert fused_score(long, hi) - fused_score(short, hi) >= fused_score(long, lo) - fused_score(short, lo)

    @given(st.floats(-50, 50))
    def test_argmax_shift_invariant(self, c):
        hyps = [Hypothesis((1,), -2.0, -1.0), Hypothesis((1, 2), -2.5, -0.2), Hypothesis((), -3.0)]
        p = FusionParams(0.8, 0.4)
        shifted = [Hypothesis(h.tokens, h.asr_logp + c, h.lm_logp) for h in hyps]
        best = max(range(3), key=lambda i: fused_score(hyps[i], p))
        assert best == max(range(3), key=lambda i: fused_score(shifted[i], p))


def toy_decoder(seed, vocab=3, enc_dim=4, dim=6):
    return Decoder(enc_dim, DecoderConfig(vocab, 1, dim), make_rng(seed, "toy-decoder"))


def sequence_logp(decoder, enc, tokens):
    """Exact log P(tokens | enc) from the decoder's full lattice."""
    with no_grad():
        dec = decoder.prediction(np.array([tokens]).reshape(1, -1))
        lat = decoder.joint(Tensor(enc[None]), dec).data[0]
    return -rnnt_loss(lat, list(tokens)).item()


class TestSearch:
    @pytest.mark.parametrize("seed", range(8))
    def test_beam_one_is_greedy(self, seed):
        dec = toy_decoder(seed, vocab=5)
        enc = make_rng(seed, "enc").standard_normal((6, 4)) * 2
        g = greedy_decode(enc, dec)
        b = beam_search(enc, dec, beam=1)
        assert b.tokens == g.tokens
        assert b.asr_logp == pytest.approx(g.asr_logp, abs=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_wide_beam_is_exact_argmax(self, seed):
        dec = toy_decoder(seed)
        enc = make_rng(seed, "enc").standard_normal((3, 4)) * 2
        candidates = [()] + [(a,) for a in (1, 2)] + [(a, b) for a in (1, 2) for b in (1, 2)]
        scores = {c: sequence_logp(dec, enc, c) for c in candidates}
        best = max(candidates, key=lambda c: (scores[c], [-x for x in c]))
        hyp = beam_search(enc, dec, beam=16, max_len=2)
        assert hyp.tokens == best
        assert hyp.asr_logp == pytest.approx(scores[best], abs=1e-10)

    def test_deterministic(self):
        dec = toy_decoder(7, vocab=6)
        enc = make_rng(7, "enc").standard_normal((8, 4))
        assert beam_search(enc, dec, beam=4) == beam_search(enc, dec, beam=4)

    @pytest.mark.parametrize("seed", range(4))
    def test_width_monotone_once_search_is_exhaustive(self, seed):
        dec = toy_decoder(seed)
        enc = make_rng(seed, "enc").standard_normal((3, 4)) * 2
        scores = [beam_search(enc, dec, beam=b, max_len=2).asr_logp for b in (16, 24, 32)]
        assert scores[0] <= scores[1] + 1e-12 <= scores[2] + 2e-12

    @pytest.mark.xfail(strict=False, reason="pruning can drop a finished hypothesis that a narrower beam kept")
    def test_width_monotone_in_general(self):
        for seed in range(200):
            dec = toy_decoder(seed, vocab=5)
            enc = make_rng(seed, "enc").standard_normal((6, 4)) * 2
            scores = [beam_search(enc, dec, beam=b).asr_logp for b in (1, 2, 4, 6, 8)]
            assert all(a <= b + 1e-9 for a, b in zip(scores, scores[1:])), seed

    def test_lm_ignored_without_weight(self):
        dec = toy_decoder(3, vocab=5)
        enc = make_rng(3, "enc").standard_normal((6, 4)) * 2
        lm = TransformerLM(LmConfig(5, n_layers=1, model_dim=8, n_heads=2), make_rng(0, "lm"))
        assert beam_search(enc, dec, lm, FusionParams(0.0, 0.0), beam=4).tokens == beam_search(enc, dec, beam=4).tokens


class TableJoint:
    """Joint whose distribution is a lookup on (frame, tokens emitted so far)."""

    def __init__(self, table):
        self.table = np.log(np.asarray(table, dtype=np.float64))
        self.out = SimpleNamespace(weight=np.zeros((1, self.table.shape[-1])))

    def project_encoder(self, enc):
        return np.asarray(enc)

    def project_decoder(self, dec):
        return dec

    def log_probs(self, enc_row, dec):
        dec = np.asarray(dec)
        rows = dec.reshape(-1, 1)[:, 0].astype(int)
        out = self.table[int(enc_row[0]), np.minimum(rows, self.table.shape[1] - 1)]
        return out if dec.ndim == 2 else out[0]


class CountingPrediction:
    def initial_state(self):
        return -1

    def step(self, token, state):
        return np.array([state + 1.0]), state + 1


class TableModel:
    training = False

    def __init__(self, table):
        self.decoder = SimpleNamespace(joint=TableJoint(table), prediction=CountingPrediction())

    def eval(self):
        pass

    def train(self, mode=True):
        pass

    def encode_numpy(self, feats):
        return feats


@pytest.fixture(scope="module")
def lm():
    """Has only ever seen token 4."""
    lm = TransformerLM(LmConfig(5, n_layers=1, model_dim=8, n_heads=2), make_rng(0, "lm"))
    train_lm(lm, [[4]] * 32, steps=60, batch_size=8, seed=0)
    lm.eval()
    return lm


class TestTuneFusion:
    def _model(self):
        # frame 0: 3 slightly beats 4; afterwards blank dominates
        table = [[[0.01, 0.0, 0.0, 0.55, 0.44], [0.99, 0.0, 0.0, 0.005, 0.005]],
                 [[0.98, 0.0, 0.0, 0.01, 0.01], [0.98, 0.0, 0.0, 0.01, 0.01]]]
        table = np.asarray(table) + 1e-12
        return TableModel(table / table.sum(-1, keepdims=True))

    def test_single_point_grid(self, lm):
        res = tune_fusion(self._model(), lm, [(np.array([[0.0], [1.0]]), "4")], [(0, 0)], beam=4)
        assert res.best == FusionParams(0.0, 0.0)
        assert len(res.log) == 1

    def test_lm_fixes_substitution(self, lm):
        dev = [(np.array([[0.0], [1.0]]), "4")]
        grid = [(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]
        res = tune_fusion(self._model(), lm, dev, grid, beam=4)
        assert [r["wer"] for r in res.log][0] == 1.0
        assert res.best.lam > 0
        assert len(res.log) == len(grid)

    def test_ties_go_to_smaller_weights(self, lm):
        dev = [(np.array([[0.0], [1.0]]), "4")]
        res = tune_fusion(self._model(), lm, dev, [(1.0, 0.0), (0.5, 0.0), (2.0, 0.5)], beam=4)
        assert res.best == FusionParams(0.5, 0.0)

    def test_empty_grid_rejected(self, lm):
        with pytest.raises(ValueError):
            tune_fusion(self._model(), lm, [(np.zeros((2, 1)), "4")], [])


ENC = EncoderConfig(n_layers=1, enc_dim=16, n_heads=2, conv_kernel=3, n_mels=16, sub_channels=(4, 8),
                    time_reduction=2, ff_mult=2)


def small_model(vocab, seed=0):
    return build_transducer(ENC, ProjectionBlockConfig(out_dim=16), DecoderConfig(vocab, 1, 16), make_rng(seed, "m"))


def desk_config(scale=1.0):
    return FinetuneConfig(
        encoder_opt=OptimizerConfig(kind="adam", peak_lr=2e-3 * scale, warmup_steps=100),
        decoder_opt=OptimizerConfig(kind="adam", peak_lr=4e-3 * scale, warmup_steps=50),
        ema_decay=0.99, spec_augment=SpecAugmentPolicy(2, 5, 10, 0.05), batch_size=8)


class TestFinetune:
    def test_separate_schedules(self):
        opts = make_optimizers(small_model(6), FinetuneConfig())
        enc, dec = opts["encoder"].config, opts["decoder"].config
        assert transformer_lr(5000, enc.peak_lr, enc.warmup_steps) == pytest.approx(3e-4)
        lr = [transformer_lr(s, dec.peak_lr, dec.warmup_steps) for s in (1500, 4999, 5000)]
        assert lr[0] == pytest.approx(1e-3)
        assert lr[2] < lr[1] < lr[0]

    def _batch(self, n=2):
        rng = make_rng(0, "batch")
        return [(FeatureSequence(rng.standard_normal((20, 16)), 20 - 3 * i), [3, 4, 5][: 3 - i]) for i in range(n)]

    def test_zero_lr_leaves_params(self):
        model = small_model(6)
        before = {k: p.data.copy() for k, p in model.named_parameters()}
        zero = OptimizerConfig(kind="adam", peak_lr=0.0, warmup_steps=10)
        opts = make_optimizers(model, FinetuneConfig(encoder_opt=zero, decoder_opt=zero))
        finetune_step(self._batch(), model, opts, spec_policy=SpecAugmentPolicy(2, 5, 2, 0.05))
        for k, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[k])

    def test_non_finite_rolls_back(self):
        model = small_model(6)
        model.feature_encoder.conv1_weight.data[...] = np.nan
        before = {k: p.data.copy() for k, p in model.named_parameters()}
        buffers = {k: b.copy() for k, b in model.named_buffers()}
        opts = make_optimizers(model, FinetuneConfig())
        with pytest.raises(NonFiniteLoss):
            finetune_step(self._batch(), model, opts)
        for k, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, before[k])
        for k, b in model.named_buffers():
            np.testing.assert_array_equal(b, buffers[k])
        assert opts["encoder"].step_count == 0

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = small_model(6)
            opts = make_optimizers(model, desk_config())
            runs.append([finetune_step(self._batch(), model, opts, spec_policy=SpecAugmentPolicy(2, 5, 2, 0.05),
                                       seed=3) for _ in range(3)])
        assert runs[0] == runs[1]

    def test_training_wer_halves(self):
        task = synth_generate(SyntheticTaskSpec(n_supervised=50, n_unlabeled=0, n_dev=0), 0)
        tok = train_wpm([u.text for u in task.supervised], 20)
        data = [(u.features, tok.encode(u.text)) for u in task.supervised]
        model = small_model(len(tok))

        def wer():
            hyps = [decode_utterance(model, u.features.frames, beam=1) for u in task.supervised]
            return corpus_wer((u.text, tok.decode(h.tokens)) for u, h in zip(task.supervised, hyps))

        start = wer()
        train_transducer(model, data, 300, desk_config(), seed=0)
        assert wer() < 0.5 * start


class TestArtifacts:
    def test_decode_manifest_round_trip(self, tmp_path):
        h = Hypothesis((4, 5), -3.25, -1.5)
        rec = decode_record("utt1", h, FusionParams(0.5, 0.25), "ab")
        write_decode_manifest(tmp_path / "d.jsonl", [rec])
        back = read_decode_manifest(tmp_path / "d.jsonl")
        assert back == [rec]
        assert back[0]["fused_score"] == pytest.approx(-3.25 - 0.75 + 0.5)

    def test_decode_manifest_missing_field(self, tmp_path):
        (tmp_path / "d.jsonl").write_text('{"id": "x"}\n')
        with pytest.raises(ValueError, match="missing"):
            read_decode_manifest(tmp_path / "d.jsonl")

    def test_checkpoint_round_trip(self, tmp_path):
        model = small_model(7, seed=2)
        save_transducer(tmp_path / "m.ckpt", model)
        back, _ = load_transducer(tmp_path / "m.ckpt")
        feats = make_rng(0, "x").standard_normal((18, 16))
        model.eval()
        np.testing.assert_array_equal(model.encode_numpy(feats), back.encode_numpy(feats))
        assert decode_utterance(model, feats, beam=2) == decode_utterance(back, feats, beam=2)
