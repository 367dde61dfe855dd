"""Anomaly scores from a trained model: Monte-Carlo reconstruction probability and reconstruction error."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datagen import SeriesMatrix
from .nets import ModelParams, unroll
from .objective import gauss_logpdf

CRITERIA = ("prob", "error")


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # M x T
    covered: np.ndarray  # M x T bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.covered = np.asarray(self.covered, dtype=bool)
        if self.scores.shape != self.covered.shape:
            raise ValueError("scores and covered must share a shape")


def _pass_noise(seed: int, chunk_index: int, l: int, W: int, z_dim: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chunk_index), int(l)))
    return np.random.default_rng(ss).standard_normal((W, z_dim))


def score_smc(params: ModelParams, chunk, L: int = 128, seed: int = 0, chunk_index: int = 0,
              first_pass: int = 0) -> np.ndarray:
    """Per-position negative log-likelihood averaged over L posterior sample paths.

    Pass ``l`` draws its noise from (seed, chunk_index, first_pass + l), so a
    run of a+b passes equals the weighted mean of an a-pass run and a b-pass
    run started at ``first_pass=a``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(chunk, dtype=np.float64)
    cfg = params.config
    M, W = x.shape
    noise = np.stack([_pass_noise(seed, chunk_index, first_pass + l, W, cfg.z_dim) for l in range(L)])
    batch = np.broadcast_to(x, (L, M, W))
    out = unroll(batch, params, cfg, noise, mode="score")
    A = np.zeros((M, W))
    for t in range(W):
        logp = gauss_logpdf(batch[:, :, t], out.recon.means[t], out.recon.stddevs[t]).values  # (L, M)
        A[:, t] = -logp.sum(axis=0) / L
    if not np.isfinite(A).all():
        m, t = np.argwhere(~np.isfinite(A))[0]
        raise FloatingPointError(f"non-finite score at series {m}, step {t}")
    return A


def score_error(params: ModelParams, chunk, seed: int = 0, chunk_index: int = 0) -> np.ndarray:
    """|x - decoded mean| along a single sampled path."""
    x = np.asarray(chunk, dtype=np.float64)
    M, W = x.shape
    noise = _pass_noise(seed, chunk_index, 0, W, params.config.z_dim)
    out = unroll(x, params, params.config, noise, mode="score")
    return np.abs(x - out.recon.mean_array().T)


def chunk_offsets(T: int, W: int) -> list[int]:
    """Non-overlapping offsets, plus an end-anchored chunk when W does not divide T."""
    if T < W:
        raise ValueError(f"series length {T} is shorter than window {W}")
    offsets = list(range(0, T - W + 1, W))
    if offsets[-1] + W < T:
        offsets.append(T - W)
    return offsets


def score_series(params: ModelParams, series: SeriesMatrix | np.ndarray, window: int,
                 criterion: str = "prob", L: int = 128, seed: int = 0) -> ScoreMatrix:
    """Score a whole M x T matrix chunk by chunk; overlapping positions are averaged."""
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}")
    x = series.values if isinstance(series, SeriesMatrix) else np.asarray(series, dtype=np.float64)
    M, T = x.shape
    if M != params.config.x_dim:
        raise ValueError(f"series has {M} rows but model x_dim is {params.config.x_dim}")
    total = np.zeros((M, T))
    counts = np.zeros(T)
    for k, o in enumerate(chunk_offsets(T, window)):
        chunk = x[:, o:o + window]
        if criterion == "prob":
            s = score_smc(params, chunk, L=L, seed=seed, chunk_index=k)
        else:
            s = score_error(params, chunk, seed=seed, chunk_index=k)
        total[:, o:o + window] += s
        counts[o:o + window] += 1
    covered = np.broadcast_to(counts > 0, (M, T)).copy()
    scores = np.where(covered, total / np.maximum(counts, 1), 0.0)
    return ScoreMatrix(scores, covered)


def threshold(scores: ScoreMatrix, alpha: float) -> np.ndarray:
    return ((scores.scores > alpha) & scores.covered).astype(np.int8)


def save_scores(scores: ScoreMatrix, path, series_ids: list[str] | None = None, alpha: float | None = None) -> None:
    """Long-format CSV: series_id, t, score, covered (+ alpha, flag)."""
    M, T = scores.scores.shape
    ids = series_ids or [f"s{i}" for i in range(M)]
    flags = threshold(scores, alpha) if alpha is not None else None
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["series_id", "t", "score", "covered"]
        if flags is not None:
            header += ["alpha", "flag"]
        w.writerow(header)
        for m in range(M):
            for t in range(T):
                row = [ids[m], t, repr(float(scores.scores[m, t])), int(scores.covered[m, t])]
                if flags is not None:
                    row += [repr(float(alpha)), int(flags[m, t])]
                w.writerow(row)


def load_scores(path) -> tuple[ScoreMatrix, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no score rows")
    ids: list[str] = []
    for r in rows:
        if r["series_id"] not in ids:
            ids.append(r["series_id"])
    T = max(int(r["t"]) for r in rows) + 1
    scores = np.zeros((len(ids), T))
    covered = np.zeros((len(ids), T), dtype=bool)
    pos = {s: i for i, s in enumerate(ids)}
    for r in rows:
        m, t = pos[r["series_id"]], int(r["t"])
        scores[m, t] = float(r["score"])
        covered[m, t] = r["covered"] == "1"
    return ScoreMatrix(scores, covered), ids
