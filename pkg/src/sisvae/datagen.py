"""Synthetic series generators, anomaly injectors and CSV persistence."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cholesky, LinAlgError


@dataclass
class SeriesMatrix:
    """M x T observations, optional M x T binary labels, and per-row ids."""

    values: np.ndarray
    labels: np.ndarray | None = None
    series_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-d, got shape {self.values.shape}")
        if not self.series_ids:
            self.series_ids = [f"s{i}" for i in range(self.values.shape[0])]
        if len(self.series_ids) != self.values.shape[0]:
            raise ValueError("series_ids length must equal the number of rows")
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != self.values.shape:
                raise ValueError(f"labels shape {lab.shape} != values shape {self.values.shape}")
            if not np.isin(lab, (0, 1)).all():
                raise ValueError("labels must contain only 0 and 1")
            self.labels = lab.astype(np.int8)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def t(self) -> int:
        return self.values.shape[1]

    def copy(self) -> SeriesMatrix:
        return SeriesMatrix(self.values.copy(), None if self.labels is None else self.labels.copy(),
                            list(self.series_ids))


@dataclass(frozen=True)
class SynthConfig:
    m: int = 100
    t: int = 200
    anomaly_prob: float = 0.02
    kernel_lengthscale: float = 10.0
    noise_base: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.t < 2:
            raise ValueError("need m >= 1 and t >= 2")
        if not (0.0 <= self.anomaly_prob <= 1.0):
            raise ValueError("anomaly_prob must lie in [0, 1]")
        if self.kernel_lengthscale <= 0 or self.noise_base < 0:
            raise ValueError("kernel_lengthscale must be > 0 and noise_base >= 0")


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(stream)))


def rbf_kernel(t: np.ndarray, lengthscale: float, variance: float = 1.0) -> np.ndarray:
    d = t[:, None] - t[None, :]
    return variance * np.exp(-0.5 * (d / lengthscale) ** 2)


def jittered_cholesky(K: np.ndarray, jitter: float = 1e-8, max_tries: int = 8) -> np.ndarray:
    """Lower Cholesky factor of K + jitter*I, growing the jitter tenfold on failure."""
    eye = np.eye(K.shape[0])
    j = jitter
    for _ in range(max_tries):
        try:
            return cholesky(K + j * eye, lower=True)
        except LinAlgError:
            j *= 10.0
    raise LinAlgError(f"Cholesky failed even with jitter {j / 10.0:g}")


def coregionalization(m: int, rng: np.random.Generator) -> np.ndarray:
    C = rng.standard_normal((m, m))
    return C @ C.T + 0.1 * np.eye(m)


def gen_correlated_series(config: SynthConfig, coreg: np.ndarray | None = None) -> SeriesMatrix:
    """Multi-output GP draw f ~ N(0, B kron K) plus noise growing linearly in time.

    Uses chol(B kron K) = chol(B) kron chol(K), so the sample is
    L_B Z L_K^T for a standard normal M x T matrix Z.
    """
    B = coregionalization(config.m, _rng(config.seed, 0)) if coreg is None else np.asarray(coreg, float)
    if B.shape != (config.m, config.m):
        raise ValueError(f"coregionalization must be {config.m}x{config.m}")
    steps = np.arange(config.t, dtype=np.float64)
    L_K = jittered_cholesky(rbf_kernel(steps, config.kernel_lengthscale))
    L_B = jittered_cholesky(B)
    Z = _rng(config.seed, 1).standard_normal((config.m, config.t))
    f = L_B @ Z @ L_K.T
    noise_sd = config.noise_base * (1.0 + steps / config.t)
    eps = _rng(config.seed, 2).standard_normal((config.m, config.t)) * noise_sd
    return SeriesMatrix(f + eps, np.zeros((config.m, config.t), dtype=np.int8))


def inject_point_anomalies(series: SeriesMatrix, p: float, seed: int) -> SeriesMatrix:
    """Add sign * Poisson(max(|x|, 0.5)) at Bernoulli(p) positions.

    The Poisson count is conditioned on being non-zero.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    rng = _rng(seed, 10)
    x = series.values
    mask = rng.random(x.shape) < p
    sign = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
    rate = np.maximum(np.abs(x), 0.5)
    counts = rng.poisson(rate)
    # zero draws would leave a labeled point unchanged; redraw them
    zero = counts == 0
    while zero.any():
        counts[zero] = rng.poisson(rate[zero])
        zero = counts == 0
    bump = sign * counts
    values = np.where(mask, x + bump, x)
    labels = np.zeros(x.shape, dtype=np.int8) if series.labels is None else series.labels.copy()
    labels[mask] = 1
    return SeriesMatrix(values, labels, list(series.series_ids))


def inject_mackey_points(series: SeriesMatrix, rate: float, seed: int, bias: float = 0.2) -> SeriesMatrix:
    """Point anomalies made of Poisson(1) + N(0, 1) + a fixed bias, at a given rate."""
    rng = _rng(seed, 11)
    x = series.values
    mask = rng.random(x.shape) < rate
    bump = rng.poisson(1.0, size=x.shape) + rng.standard_normal(x.shape) + bias
    values = np.where(mask, x + bump, x)
    labels = np.zeros(x.shape, dtype=np.int8) if series.labels is None else series.labels.copy()
    labels[mask] = 1
    return SeriesMatrix(values, labels, list(series.series_ids))


def gen_mackey_glass(n: int = 5000, gamma: float = 0.1, beta: float = 10.0, alpha: float = 0.2,
                     tau: float = 17, dt: float = 1.0, x0: float = 1.2, seed: int = 0) -> SeriesMatrix:
    """Euler-integrated Mackey-Glass series (1 x n); history before 0 equals x0.

    ``seed`` is accepted for interface uniformity; the integration is deterministic.
    """
    if n < 1 or tau < 0 or dt <= 0:
        raise ValueError("need n >= 1, tau >= 0 and dt > 0")
    lag = int(round(tau / dt))
    x = np.empty(n + lag)
    x[: lag + 1] = x0
    for k in range(lag, n + lag - 1):
        d = x[k - lag]
        x[k + 1] = x[k] + dt * (alpha * d / (1.0 + d ** beta) - gamma * x[k])
        if not np.isfinite(x[k + 1]):
            raise FloatingPointError(f"Mackey-Glass state became non-finite at step {k + 1 - lag}")
    return SeriesMatrix(x[lag:].reshape(1, n), np.zeros((1, n), dtype=np.int8), ["mackey_glass"])


def inject_subseq_anomalies(series: SeriesMatrix, count: int, len_min: int, len_max: int, seed: int,
                            lengthscale: float = 0.3, max_attempts: int = 1000) -> SeriesMatrix:
    """Replace ``count`` non-overlapping windows of every row with GP(RBF) draws."""
    T = series.t
    if count < 0 or not (1 <= len_min <= len_max <= T):
        raise ValueError("need count >= 0 and 1 <= len_min <= len_max <= T")
    rng = _rng(seed, 12)
    taken = np.zeros(T, dtype=bool)
    spans: list[tuple[int, int]] = []
    attempts = 0
    while len(spans) < count:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"could not place {count} sub-sequences after {max_attempts} attempts")
        length = int(rng.integers(len_min, len_max + 1))
        start = int(rng.integers(0, T - length + 1))
        if taken[start:start + length].any():
            continue
        taken[start:start + length] = True
        spans.append((start, length))

    values = series.values.copy()
    labels = np.zeros(values.shape, dtype=np.int8) if series.labels is None else series.labels.copy()
    for start, length in spans:
        L = jittered_cholesky(rbf_kernel(np.arange(length, dtype=np.float64), lengthscale))
        draw = rng.standard_normal((series.m, length)) @ L.T
        values[:, start:start + length] = draw
        labels[:, start:start + length] = 1
    return SeriesMatrix(values, labels, list(series.series_ids))


def mackey_preset(n: int = 5000, seed: int = 0, point_rate: float = 0.003, subseq_count: int = 2,
                  len_min: int = 10, len_max: int = 28, **mg_kwargs) -> SeriesMatrix:
    base = gen_mackey_glass(n=n, seed=seed, **mg_kwargs)
    with_points = inject_mackey_points(base, point_rate, seed)
    return inject_subseq_anomalies(with_points, subseq_count, len_min, len_max, seed)


def correlated_preset(config: SynthConfig) -> SeriesMatrix:
    return inject_point_anomalies(gen_correlated_series(config), config.anomaly_prob, config.seed)


# ---------------------------------------------------------------------------
# CSV


def label_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".labels" + path.suffix)


def _write_table(path: Path, ids: list[str], table: np.ndarray, fmt) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *ids])
    for t in range(table.shape[1]):
        w.writerow([t, *(fmt(v) for v in table[:, t])])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue(), encoding="utf-8")
    tmp.replace(path)


def save_csv(series: SeriesMatrix, path) -> None:
    """Write values (and labels, to a sibling ``.labels`` file) as t-major CSV."""
    path = Path(path)
    _write_table(path, series.series_ids, series.values, lambda v: repr(float(v)))
    if series.labels is not None:
        _write_table(label_path(path), series.series_ids, series.labels, lambda v: str(int(v)))


class CSVFormatError(ValueError):
    pass


def _read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2 or header[0] != "t":
        raise CSVFormatError(f"{path}:1: header must be 't,<series ids...>'")
    ids = header[1:]
    data = np.empty((len(ids), len(rows) - 1))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CSVFormatError(f"{path}:{i}: expected {len(header)} columns, got {len(row)}")
        try:
            data[:, i - 2] = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise CSVFormatError(f"{path}:{i}: {exc}") from None
    if data.shape[1] == 0:
        raise CSVFormatError(f"{path}: no data rows")
    return ids, data


def load_csv(path, labels_path=None) -> SeriesMatrix:
    path = Path(path)
    ids, values = _read_table(path)
    lp = Path(labels_path) if labels_path is not None else label_path(path)
    labels = None
    if lp.exists():
        lids, lab = _read_table(lp)
        if lab.shape != values.shape:
            raise CSVFormatError(f"{lp}: label shape {lab.shape} != data shape {values.shape}")
        labels = lab.astype(np.int8)
    return SeriesMatrix(values, labels, ids)


__all__ = [
    "SeriesMatrix",
    "SynthConfig",
    "CSVFormatError",
    "rbf_kernel",
    "jittered_cholesky",
    "coregionalization",
    "gen_correlated_series",
    "inject_point_anomalies",
    "inject_mackey_points",
    "gen_mackey_glass",
    "inject_subseq_anomalies",
    "mackey_preset",
    "correlated_preset",
    "label_path",
    "save_csv",
    "load_csv",
]
