import numpy as np
import pytest

from sisvae.datagen import (CSVFormatError, SeriesMatrix, SynthConfig, coregionalization, correlated_preset,
                            gen_correlated_series, gen_mackey_glass, inject_mackey_points, inject_point_anomalies,
                            inject_subseq_anomalies, jittered_cholesky, load_csv, mackey_preset, save_csv)


def runs(mask):
    """(start, length) of each run of ones in a 1-d 0/1 array."""
    padded = np.r_[0, mask, 0]
    edges = np.flatnonzero(np.diff(padded))
    return [(a, b - a) for a, b in zip(edges[::2], edges[1::2])]


class TestSeriesMatrix:
    def test_validation(self):
        with pytest.raises(ValueError):
            SeriesMatrix(np.zeros((2, 3)), labels=np.zeros((3, 2)))
        with pytest.raises(ValueError):
            SeriesMatrix(np.zeros((2, 3)), labels=np.full((2, 3), 2))
        with pytest.raises(ValueError):
            SeriesMatrix(np.zeros((2, 3)), series_ids=["a"])

    def test_default_ids(self):
        assert SeriesMatrix(np.zeros((2, 3))).series_ids == ["s0", "s1"]


class TestCorrelated:
    def test_shape_and_seed(self):
        cfg = SynthConfig(m=4, t=30, seed=3)
        a, b = gen_correlated_series(cfg), gen_correlated_series(cfg)
        assert a.values.shape == (4, 30)
        assert a.values.tobytes() == b.values.tobytes()
        assert a.labels.sum() == 0
        assert gen_correlated_series(SynthConfig(m=4, t=30, seed=4)).values.tobytes() != a.values.tobytes()

    def test_coregionalization_pd(self):
        for seed in range(10):
            B = coregionalization(8, np.random.default_rng(seed))
            assert np.linalg.eigvalsh(B).min() >= 0.1 - 1e-12

    def test_long_lengthscale_is_near_constant(self):
        T = 50
        steps = np.arange(T, dtype=float)

        def path_var(ls, seed):
            cfg = SynthConfig(m=1, t=T, kernel_lengthscale=ls, noise_base=0.0, seed=seed)
            return gen_correlated_series(cfg, coreg=np.ones((1, 1))).values[0].var()

        # E[within-path variance] = 1 - mean(K); about 8e-4 at lengthscale 10*T
        K = np.exp(-0.5 * ((steps[:, None] - steps[None, :]) / (10.0 * T)) ** 2)
        long_ = np.mean([path_var(10.0 * T, s) for s in range(200)])
        assert long_ == pytest.approx(1 - K.mean(), rel=0.3)
        assert long_ < 0.01 * np.mean([path_var(2.0, s) for s in range(20)])

    def test_kronecker_covariance(self):
        # empirical covariance over seeds matches B kron K on a small case
        m, t = 2, 4
        B = np.array([[2.0, 0.8], [0.8, 1.0]])
        steps = np.arange(t, dtype=float)
        K = np.exp(-0.5 * ((steps[:, None] - steps[None, :]) / 2.0) ** 2)
        draws = np.array([gen_correlated_series(SynthConfig(m=m, t=t, kernel_lengthscale=2.0, noise_base=0.0,
                                                            seed=s), coreg=B).values.reshape(-1)
                          for s in range(4000)])
        np.testing.assert_allclose(np.cov(draws.T), np.kron(B, K), atol=0.15)

    def test_noise_grows_in_time(self):
        cfg = SynthConfig(m=1, t=400, kernel_lengthscale=1e4, noise_base=1.0, seed=0)
        x = gen_correlated_series(cfg, coreg=np.full((1, 1), 1e-6)).values[0]
        assert x[300:].std() > x[:100].std()

    def test_strong_coupling_correlates_rows(self):
        B = np.array([[1.0, 0.95], [0.95, 1.0]])
        corrs = []
        for seed in range(20):
            x = gen_correlated_series(SynthConfig(m=2, t=200, seed=seed), coreg=B).values
            corrs.append(abs(np.corrcoef(x)[0, 1]))
        assert np.mean(corrs) > 0.5

    def test_jitter_escalation(self):
        K = np.ones((3, 3))  # singular
        L = jittered_cholesky(K)
        assert np.allclose(L @ L.T, K, atol=1e-6)
        with pytest.raises(np.linalg.LinAlgError):
            jittered_cholesky(-np.eye(2), max_tries=2)


class TestPointAnomalies:
    def base(self, m=100, t=200):
        return gen_correlated_series(SynthConfig(m=m, t=t, seed=1))

    def test_extremes(self):
        s = self.base(5, 20)
        none = inject_point_anomalies(s, 0.0, seed=0)
        assert none.values.tobytes() == s.values.tobytes() and none.labels.sum() == 0
        assert inject_point_anomalies(s, 1.0, seed=0).labels.all()

    def test_labels_exactly_at_changes(self):
        s = self.base(20, 100)
        out = inject_point_anomalies(s, 0.05, seed=2)
        np.testing.assert_array_equal(out.values != s.values, out.labels == 1)

    def test_binomial_count(self):
        out = inject_point_anomalies(self.base(), 0.02, seed=3)
        sd = np.sqrt(20000 * 0.02 * 0.98)
        assert abs(out.labels.sum() - 400) < 4 * sd

    def test_bumps_are_signed_integers(self):
        s = self.base(10, 50)
        out = inject_point_anomalies(s, 0.2, seed=4)
        d = (out.values - s.values)[out.labels == 1]
        np.testing.assert_allclose(d, np.round(d), atol=1e-9)
        assert (d > 0).any() and (d < 0).any()

    def test_mackey_recipe_labels(self):
        s = gen_mackey_glass(n=3000)
        out = inject_mackey_points(s, 0.003, seed=1)
        assert (out.values != s.values).sum() <= out.labels.sum()
        assert out.labels.sum() > 0


class TestMackeyGlass:
    def test_fixed_points(self):
        one = gen_mackey_glass(n=500, x0=1.0).values
        assert (one == 1.0).all()
        zero = gen_mackey_glass(n=500, x0=0.0).values
        assert (zero == 0.0).all()

    def test_default_bounded_non_constant(self):
        x = gen_mackey_glass().values[0]
        assert x.shape == (5000,)
        assert 0 < x.min() and x.max() < 2
        assert x.std() > 0.05

    def test_starts_at_x0(self):
        assert gen_mackey_glass(n=3, x0=1.2).values[0, 0] == 1.2

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_mackey_glass(n=0)
        with pytest.raises(ValueError):
            gen_mackey_glass(dt=0.0)


class TestSubsequences:
    def test_count_zero(self):
        s = gen_mackey_glass(n=200)
        out = inject_subseq_anomalies(s, 0, 10, 28, seed=0)
        assert out.values.tobytes() == s.values.tobytes() and out.labels.sum() == 0

    def test_runs_within_bounds(self):
        for seed in range(30):
            out = inject_subseq_anomalies(gen_mackey_glass(n=300), 2, 10, 28, seed=seed)
            r = runs(out.labels[0])
            # adjacent windows can merge into one labeled run
            total = sum(n for _, n in r)
            assert 20 <= total <= 56
            if len(r) == 2:
                assert all(10 <= n <= 28 for _, n in r)

    def test_replaced_variance(self):
        variances = []
        for seed in range(100):
            out = inject_subseq_anomalies(gen_mackey_glass(n=300), 1, 20, 20, seed=seed)
            variances.append(out.values[0][out.labels[0] == 1])
        pooled = np.concatenate(variances)
        # GP marginal is N(0, 1); at lengthscale 0.3 neighbouring steps have correlation ~0.004
        assert abs(pooled.var() - 1.0) < 3 * np.sqrt(2.0 / pooled.size)

    def test_placement_failure(self):
        with pytest.raises(RuntimeError):
            inject_subseq_anomalies(gen_mackey_glass(n=30), 3, 12, 12, seed=0, max_attempts=50)

    def test_preset(self):
        out = mackey_preset(n=5000, seed=7)
        assert out.values.shape == (1, 5000)
        assert out.labels.sum() >= 20


class TestCsv:
    def test_round_trip(self, tmp_path):
        s = correlated_preset(SynthConfig(m=3, t=12, anomaly_prob=0.2, seed=5))
        path = tmp_path / "d.csv"
        save_csv(s, path)
        back = load_csv(path)
        assert back.values.tobytes() == s.values.tobytes()
        np.testing.assert_array_equal(back.labels, s.labels)
        assert back.series_ids == s.series_ids
        assert path.read_text().splitlines()[0] == "t,s0,s1,s2"

    def test_missing_labels_ok(self, tmp_path):
        path = tmp_path / "d.csv"
        save_csv(SeriesMatrix(np.ones((2, 3))), path)
        assert load_csv(path).labels is None

    def test_bad_row_names_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("t,a,b\n0,1.0,2.0\n1,3.0\n")
        with pytest.raises(CSVFormatError, match=":3:"):
            load_csv(path)

    def test_bad_value_and_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("t,a\n0,abc\n")
        with pytest.raises(CSVFormatError, match=":2:"):
            load_csv(path)
        path.write_text("time,a\n0,1\n")
        with pytest.raises(CSVFormatError, match=":1:"):
            load_csv(path)
