import math

import numpy as np
import pytest

from sisvae.datagen import SeriesMatrix, SynthConfig, correlated_preset
from sisvae.nets import ModelConfig, ModelParams
from sisvae.diffcore import ShapeError
from sisvae.training import (AdamState, Chunk, NonFiniteLoss, TrainConfig, adam_step, clip_global_norm,
                             denormalize, make_windows, normalize, train)


class TestNormalize:
    def test_constant_row(self):
        s = SeriesMatrix(np.array([[3.0, 3.0, 3.0], [1.0, 2.0, 3.0]]))
        out, stats = normalize(s)
        np.testing.assert_array_equal(out.values[0], 0.0)
        assert stats.std[0] == 1.0

    def test_population_std(self):
        out, stats = normalize(SeriesMatrix(np.array([[-1.0, 1.0]])))
        np.testing.assert_array_equal(out.values, [[-1.0, 1.0]])
        assert stats.mean[0] == 0.0 and stats.std[0] == 1.0

    def test_round_trip(self):
        x = np.random.default_rng(0).standard_normal((4, 30)) * 5 + 2
        out, stats = normalize(SeriesMatrix(x))
        np.testing.assert_allclose(denormalize(out, stats).values, x, atol=1e-12)

    def test_labels_pass_through(self):
        lab = np.zeros((2, 4), dtype=np.int8)
        lab[1, 2] = 1
        out, _ = normalize(SeriesMatrix(np.arange(8.0).reshape(2, 4), lab))
        np.testing.assert_array_equal(out.labels, lab)

    def test_errors(self):
        with pytest.raises(ValueError):
            normalize(SeriesMatrix(np.ones((2, 1))))


class TestWindows:
    def test_examples(self):
        x = np.arange(10.0)[None, :]
        assert [c.start for c in make_windows(x, 4, 2)] == [0, 2, 4, 6]
        assert [c.start for c in make_windows(x[:, :5], 3, 1)] == [0, 1, 2]
        assert [c.start for c in make_windows(x, 10, 3)] == [0]

    def test_contents(self):
        x = np.arange(20.0).reshape(2, 10)
        for c in make_windows(x, 4, 3):
            np.testing.assert_array_equal(c.values, x[:, c.start:c.start + 4])

    def test_count_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            T = int(rng.integers(1, 60))
            w = int(rng.integers(1, T + 1))
            s = int(rng.integers(1, 20))
            chunks = make_windows(np.zeros((1, T)), w, s)
            assert len(chunks) == (T - w) // s + 1
            assert chunks[-1].start + w <= T

    def test_too_wide(self):
        with pytest.raises(ValueError):
            make_windows(np.zeros((1, 5)), 6, 1)


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-python Adam over one coordinate."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


class TestAdam:
    def test_first_step_magnitude(self):
        p = {"w": np.array([1.0, -2.0, 0.5])}
        g = {"w": np.array([3.0, -0.01, 1e-3])}
        new, state = adam_step(p, g, AdamState(), lr=0.1)
        np.testing.assert_allclose(np.abs(new["w"] - p["w"]), 0.1, rtol=1e-4)
        assert state.t == 1

    def test_zero_gradient_no_move(self):
        p = {"w": np.array([1.0, 2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(2)
        grads = rng.standard_normal((100, 5))
        p = {"w": rng.standard_normal(5)}
        start = p["w"].copy()
        state = AdamState()
        for g in grads:
            p, state = adam_step(p, {"w": g}, state, lr=0.01)
        expected = [adam_scalar(start[i], grads[:, i], 0.01) for i in range(5)]
        np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-12)

    def test_does_not_mutate(self):
        p = {"w": np.ones(3)}
        adam_step(p, {"w": np.ones(3)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["w"], 1.0)

    def test_errors(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState(), lr=0.1)
        with pytest.raises(ValueError):
            adam_step({"w": np.ones(3)}, {"w": np.ones(3)}, AdamState(), lr=0.1, t=0)


class TestClip:
    def test_scales_to_norm(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        out, norm = clip_global_norm(g, 1.0)
        assert norm == 5.0
        assert np.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)

    def test_small_untouched(self):
        g = {"a": np.array([0.3])}
        out, _ = clip_global_norm(g, 1.0)
        assert out["a"] is g["a"]


class TestTrainConfig:
    def test_step_defaults_to_window(self):
        assert TrainConfig(window_w=30).step_s == 30

    @pytest.mark.parametrize("kw", [{"window_w": 1}, {"lr": 0.0}, {"lam": -0.1}, {"regularizer": "l1"},
                                    {"adam_beta1": 0.999, "adam_beta2": 0.9}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def _small_dataset(seed=0, M=3, T=40, W=8):
    x = np.random.default_rng(seed).standard_normal((M, T))
    return make_windows(x, W, W)


class TestTrain:
    cfg = ModelConfig(x_dim=3, h_dim=6, z_dim=2, feat_dim=5)

    def test_history_length(self):
        _, hist = train(_small_dataset(), TrainConfig(window_w=8, epochs=3, batch_size=2), self.cfg)
        assert [r.epoch for r in hist.records] == [0, 1, 2]
        assert all(np.isfinite(r.total) for r in hist.records)

    def test_deterministic(self):
        tc = TrainConfig(window_w=8, epochs=2, batch_size=2, seed=5)
        a, _ = train(_small_dataset(), tc, self.cfg)
        b, _ = train(_small_dataset(), tc, self.cfg)
        assert a.flat().tobytes() == b.flat().tobytes()
        c, _ = train(_small_dataset(), TrainConfig(window_w=8, epochs=2, batch_size=2, seed=6), self.cfg)
        assert a.flat().tobytes() != c.flat().tobytes()

    def test_does_not_mutate_dataset(self):
        data = _small_dataset()
        before = [c.values.copy() for c in data]
        train(data, TrainConfig(window_w=8, epochs=1), self.cfg)
        for c, b in zip(data, before):
            np.testing.assert_array_equal(c.values, b)

    def test_lambda_zero_equals_no_regularizer(self):
        base = dict(window_w=8, epochs=2, batch_size=2, seed=1, lam=0.0)
        a, ha = train(_small_dataset(), TrainConfig(regularizer="kl", **base), self.cfg)
        b, hb = train(_small_dataset(), TrainConfig(regularizer="none", **base), self.cfg)
        assert a.flat().tobytes() == b.flat().tobytes()
        np.testing.assert_array_equal(ha.column("total"), hb.column("total"))

    def test_callback_and_history_csv(self, tmp_path):
        seen = []
        _, hist = train(_small_dataset(), TrainConfig(window_w=8, epochs=2), self.cfg,
                        callback=lambda e, p, r: seen.append((e, isinstance(p, ModelParams))))
        assert seen == [(0, True), (1, True)]
        path = tmp_path / "h.csv"
        hist.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,inference_kl,neg_loglik,smooth,total,seconds"
        assert len(lines) == 3

    def test_non_finite_loss_reports_position(self):
        bad = ModelParams.init(self.cfg, np.random.default_rng(0))
        bad.arrays["dec.b_mu"][:] = np.inf
        with pytest.raises(NonFiniteLoss) as info, np.errstate(invalid="ignore"):
            train(_small_dataset(), TrainConfig(window_w=8, epochs=1), self.cfg, init_params=bad)
        assert info.value.epoch == 0 and info.value.batch == 0

    def test_input_validation(self):
        with pytest.raises(ValueError):
            train([], TrainConfig(window_w=8), self.cfg)
        mixed = [Chunk(np.zeros((3, 8)), 0), Chunk(np.zeros((3, 7)), 8)]
        with pytest.raises(ValueError):
            train(mixed, TrainConfig(window_w=8), self.cfg)
        with pytest.raises(ValueError):
            train(_small_dataset(M=4), TrainConfig(window_w=8), self.cfg)

    @pytest.mark.slow
    def test_loss_decreases_on_synthetic_data(self):
        data, _ = normalize(correlated_preset(SynthConfig(m=20, t=400, anomaly_prob=0.01, seed=0)))
        chunks = make_windows(data, 40, 40)
        _, hist = train(chunks, TrainConfig(window_w=40, epochs=30, seed=0), ModelConfig(x_dim=20, h_dim=32, z_dim=8))
        total = hist.column("total")
        assert np.isfinite(total).all()
        assert np.median(total[-5:]) < np.median(total[:5])
