import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semisup_asr.numcore import (
    EmaState,
    GradCheckError,
    Module,
    Optimizer,
    OptimizerConfig,
    OptimizerError,
    Parameter,
    Tensor,
    adafactor_step,
    adam_step,
    clip_global_norm,
    concat,
    einsum,
    ema_update,
    factored_second_moment,
    global_norm,
    grad_check,
    init_param,
    load_arrays,
    make_rng,
    save_arrays,
    second_moment_size,
    swish,
    transformer_lr,
)
from semisup_asr.numcore import functional as F


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestGradCheck:
    def test_square(self):
        err = grad_check(lambda x: (x * x).sum(), Tensor(np.array([3.0]), requires_grad=True))
        assert err < 1e-8

    def test_matmul_sum(self):
        rng = np.random.default_rng(0)
        a, b = _t(rng, 2, 2), _t(rng, 2, 2)
        assert grad_check(lambda a, b: (a @ b).sum(), a, b) < 1e-5

    def test_softmax_cross_entropy(self):
        logits = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        assert grad_check(lambda z: -F.log_softmax(z)[1], logits) < 1e-5

    def test_non_finite_reports_coordinate(self):
        x = Tensor(np.array([1.0, 1e-7]), requires_grad=True)
        with pytest.raises(GradCheckError, match=r"\(1,\)"):
            grad_check(lambda x: x.log().sum(), x, epsilon=1e-3)


PRIMITIVES = {
    "matmul": lambda r: ((lambda a, b: ((a @ b) ** 2).sum()), [_t(r, 3, 4), _t(r, 4, 2)]),
    "batched_matmul": lambda r: ((lambda a, b: ((a @ b) ** 2).sum()), [_t(r, 2, 3, 4), _t(r, 4, 2)]),
    "depthwise_conv1d": lambda r: (
        (lambda x, w: (F.depthwise_conv1d(x, w, 1, 2) ** 2).sum()), [_t(r, 2, 6, 3), _t(r, 4, 3)]),
    "conv2d_strided": lambda r: (
        (lambda x, w, b: (F.conv2d(x, w, b, (2, 2), ((1, 1), (1, 1))) ** 2).sum()),
        [_t(r, 2, 7, 6, 2), _t(r, 3, 3, 2, 3), _t(r, 3)]),
    "layer_norm": lambda r: (
        (lambda x, g, b: (F.layer_norm(x, g, b) * Tensor(np.arange(5.0))).sum() ** 2),
        [_t(r, 3, 5), _t(r, 5), _t(r, 5)]),
    "batch_norm": lambda r: (
        (lambda x, g, b: (F.batch_norm(x, g, b, np.zeros(4), np.ones(4),
                                       mask=np.array([[1, 1, 0], [1, 1, 1]], bool)) ** 3).sum()),
        [_t(r, 2, 3, 4), _t(r, 4), _t(r, 4)]),
    "softmax": lambda r: ((lambda x: (F.softmax(x) * Tensor(np.arange(4.0))).sum()), [_t(r, 3, 4)]),
    "log_softmax": lambda r: ((lambda x: (F.log_softmax(x, axis=0) ** 2).sum()), [_t(r, 3, 4)]),
    "logsumexp": lambda r: ((lambda x: (F.logsumexp(x, axis=1) ** 2).sum()), [_t(r, 3, 4)]),
    "swish": lambda r: ((lambda x: (swish(x) ** 2).sum()), [_t(r, 3, 4)]),
    "glu": lambda r: ((lambda x: (F.glu(x) ** 2).sum()), [_t(r, 3, 6)]),
    "sigmoid_tanh": lambda r: ((lambda x: (x.sigmoid() * x.tanh()).sum()), [_t(r, 5)]),
    "lstm_cell": lambda r: (
        (lambda x, h, c, wx, wh, b: sum((t ** 2).sum() for t in F.lstm_cell(x, h, c, wx, wh, b))),
        [_t(r, 2, 3), _t(r, 2, 4), _t(r, 2, 4), _t(r, 3, 16), _t(r, 4, 16), _t(r, 16)]),
    "embedding": lambda r: (
        (lambda w: (F.embedding(w, np.array([[0, 2, 2], [1, 0, 3]])) ** 2).sum()), [_t(r, 4, 3)]),
    "einsum": lambda r: (
        (lambda q, k: (einsum("bhid,ijd->bhij", q, k) ** 2).sum()), [_t(r, 1, 2, 3, 4), _t(r, 3, 3, 4)]),
    "concat_getitem": lambda r: (
        (lambda a, b: (concat([a, b], 1)[:, 1:4] ** 2).sum()), [_t(r, 2, 3), _t(r, 2, 2)]),
    "cosine": lambda r: ((lambda a, b: F.cosine_similarity(a, b).sum()), [_t(r, 3, 4), _t(r, 3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, args = PRIMITIVES[name](rng)
    assert grad_check(fn, *args) < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    out = F.conv2d(Tensor(x), Tensor(w), None, (2, 2), ((1, 1), (1, 1))).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 2, 3))
    for i in range(3):
        for j in range(2):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.einsum("hwc,hwco->o", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_batch_norm_ignores_masked_cells():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0]], bool)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out1 = F.batch_norm(Tensor(x), g, b, np.zeros(3), np.ones(3), mask=mask).data
    x2 = x.copy()
    x2[0, 3:] = 1e6
    out2 = F.batch_norm(Tensor(x2), g, b, np.zeros(3), np.ones(3), mask=mask).data
    np.testing.assert_array_equal(out1[0, :3], out2[0, :3])


class TestSchedule:
    def test_peak(self):
        assert transformer_lr(100, 2e-3, 100) == pytest.approx(2e-3)

    def test_half_warmup(self):
        assert transformer_lr(50, 2e-3, 100) == pytest.approx(1e-3)

    def test_decay_branch(self):
        assert transformer_lr(400, 2e-3, 100) == pytest.approx(1e-3)

    def test_step_zero_rejected(self):
        with pytest.raises(OptimizerError):
            transformer_lr(0, 1.0, 10)

    @given(st.integers(1, 10_000), st.integers(1, 1000))
    def test_never_exceeds_peak(self, step, warmup):
        assert transformer_lr(step, 1.0, warmup) <= 1.0 + 1e-12


class TestClipping:
    def test_halves(self):
        g = {"a": np.array([24.0, 32.0])}  # norm 40
        out, norm = clip_global_norm(g, 20.0)
        assert norm == pytest.approx(40.0)
        np.testing.assert_allclose(out["a"], [12.0, 16.0])

    def test_identity_below_cap(self):
        g = {"a": np.array([6.0, 8.0])}
        out, _ = clip_global_norm(g, 20.0)
        np.testing.assert_array_equal(out["a"], g["a"])

    def test_zeros(self):
        out, _ = clip_global_norm({"a": np.zeros(3)}, 20.0)
        np.testing.assert_array_equal(out["a"], 0.0)

    def test_non_finite(self):
        with pytest.raises(OptimizerError, match="b"):
            clip_global_norm({"a": np.ones(2), "b": np.array([1.0, np.nan])}, 1.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.1, 100))
    def test_idempotent(self, vals, cap):
        g = {"a": np.array(vals)}
        once, _ = clip_global_norm(g, cap)
        twice, _ = clip_global_norm(once, cap)
        np.testing.assert_allclose(once["a"], twice["a"], rtol=1e-12, atol=1e-12)
        assert global_norm(once) <= cap * (1 + 1e-12)


class TestAdam:
    def test_momentum_free_step(self):
        cfg = OptimizerConfig(kind="adam", beta1=0.0, beta2=0.0, peak_lr=0.1, warmup_steps=1)
        p = {"w": np.array([1.0, 2.0])}
        g = {"w": np.array([0.5, -2.0])}
        adam_step(p, g, {}, cfg)
        np.testing.assert_allclose(p["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 2.0 + 0.1 * 2.0 / (2.0 + 1e-8)])

    def test_zero_grad_no_change(self):
        cfg = OptimizerConfig(kind="adam", peak_lr=0.1, warmup_steps=1)
        p = {"w": np.array([1.0, 2.0])}
        adam_step(p, {"w": np.zeros(2)}, {}, cfg)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_two_steps_decrease_square(self):
        cfg = OptimizerConfig(kind="adam", peak_lr=0.1, warmup_steps=1)
        p, state = {"x": np.array([3.0])}, {}
        for _ in range(2):
            adam_step(p, {"x": 2 * p["x"]}, state, cfg)
        assert p["x"][0] ** 2 < 9.0

    def test_shape_mismatch(self):
        with pytest.raises(OptimizerError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, OptimizerConfig())


class TestAdafactor:
    cfg = OptimizerConfig(kind="adafactor", beta1=0.9, beta2=0.98, peak_lr=0.01, warmup_steps=1)

    def test_factored_state_size(self):
        p = {"w": np.ones((4, 5))}
        state = {}
        adafactor_step(p, {"w": np.ones((4, 5))}, state, self.cfg)
        assert second_moment_size(state, "w") == 9

    def test_rank_one_reconstruction(self):
        a = np.array([1.0, 2.0, 0.5, 3.0])
        b = np.array([0.2, 1.5, 4.0])
        v = np.outer(a, b)
        est = factored_second_moment(v.mean(axis=1), v.mean(axis=0))
        np.testing.assert_allclose(est, v, rtol=1e-12)

    def test_vector_matches_unfactored(self):
        rng = np.random.default_rng(3)
        unf = OptimizerConfig(kind="adafactor", beta1=0.9, beta2=0.98, peak_lr=0.01,
                              warmup_steps=1, factored_second_moment=False)
        p1 = {"b": rng.standard_normal(6)}
        p2 = {"b": p1["b"].copy()}
        s1, s2 = {}, {}
        for _ in range(20):
            g = rng.standard_normal(6)
            adafactor_step(p1, {"b": g}, s1, self.cfg)
            adafactor_step(p2, {"b": g}, s2, unf)
            np.testing.assert_allclose(p1["b"], p2["b"], atol=1e-10)

    def test_decreases_quadratic(self):
        rng = np.random.default_rng(4)
        target = rng.standard_normal((3, 4))
        cfg = OptimizerConfig(kind="adafactor", beta1=0.9, beta2=0.98, peak_lr=0.05, warmup_steps=200)
        p, state = {"w": np.zeros((3, 4))}, {}
        for _ in range(200):
            adafactor_step(p, {"w": 2 * (p["w"] - target)}, state, cfg)
        assert np.sum((p["w"] - target) ** 2) < 0.1 * np.sum(target**2)


class TestEma:
    def test_decay_zero(self):
        ema = EmaState(0.0, {"w": np.zeros(2)})
        ema_update(ema, {"w": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(ema.shadow["w"], [1.0, 2.0])

    def test_decay_one(self):
        ema = EmaState(1.0, {"w": np.array([5.0])})
        ema_update(ema, {"w": np.array([1.0])})
        np.testing.assert_array_equal(ema.shadow["w"], [5.0])

    def test_paper_decay(self):
        ema = EmaState(0.9999, {"w": np.zeros(1)})
        ema_update(ema, {"w": np.ones(1)})
        assert ema.shadow["w"][0] == pytest.approx(1e-4, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ema_update(EmaState(0.5, {"w": np.zeros(2)}), {"w": np.zeros(3)})


class _Toy(Module):
    def __init__(self, rng):
        super().__init__()
        self.w = init_param(rng, (3, 2))
        self.b = init_param(rng, (2,), kind="const")
        self.register_buffer("stat", np.zeros(2))

    def __call__(self, x):
        return x @ self.w + self.b


def test_training_step_bit_reproducible():
    def run():
        m = _Toy(make_rng(7, "init"))
        opt = Optimizer(m.parameters(), OptimizerConfig(kind="adam", peak_lr=0.05, warmup_steps=2))
        rng = make_rng(7, "data")
        for _ in range(5):
            x = Tensor(rng.standard_normal((4, 3)))
            m.zero_grad()
            (m(x) ** 2).sum().backward()
            opt.step()
        return m.state_dict()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_meta_parameters_allocate_nothing():
    p = Parameter.meta((10_000, 10_000))
    assert p.size == 10**8 and p.is_meta
    assert p.data.strides == (0, 0)


def test_checkpoint_roundtrip_and_byte_stable(tmp_path):
    arrays = {"params/a": np.arange(6.0).reshape(2, 3), "ema/a": np.ones((2, 3)), "optim/enc/step": np.array([3.0])}
    save_arrays(tmp_path / "x.ckpt", arrays, {"note": "x"})
    save_arrays(tmp_path / "y.ckpt", dict(reversed(arrays.items())), {"note": "x"})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    loaded, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"note": "x"}
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)


def test_rng_streams_independent_and_reproducible():
    a = make_rng(1, "x").random(3)
    np.testing.assert_array_equal(a, make_rng(1, "x").random(3))
    assert not np.allclose(a, make_rng(1, "y").random(3))
    assert math.isfinite(a.sum())
