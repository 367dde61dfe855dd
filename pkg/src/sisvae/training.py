"""Windowing, normalization, Adam and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .datagen import SeriesMatrix
from .nets import ModelConfig, ModelParams, unroll
from .objective import REGULARIZERS, sisvae_loss

log = logging.getLogger(__name__)

# stream ids for splitting one master seed
INIT_STREAM, SHUFFLE_STREAM, NOISE_STREAM = 0, 1, 2


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray


def normalize(series: SeriesMatrix) -> tuple[SeriesMatrix, Normalization]:
    """Standardize each row with its mean and population std."""
    x = series.values
    if x.size == 0:
        raise ValueError("cannot normalize an empty matrix")
    if x.shape[1] < 2:
        raise ValueError("normalize needs at least two timesteps")
    mean = x.mean(axis=1)
    std = x.std(axis=1)
    flat = std < 1e-12
    std = np.where(flat, 1.0, std)
    z = (x - mean[:, None]) / std[:, None]
    z[flat] = 0.0
    out = SeriesMatrix(z, None if series.labels is None else series.labels.copy(), list(series.series_ids))
    return out, Normalization(mean, std)


def denormalize(series: SeriesMatrix, stats: Normalization) -> SeriesMatrix:
    x = series.values * stats.std[:, None] + stats.mean[:, None]
    return SeriesMatrix(x, None if series.labels is None else series.labels.copy(), list(series.series_ids))


@dataclass(frozen=True)
class Chunk:
    values: np.ndarray  # M x W
    start: int


def make_windows(series: SeriesMatrix | np.ndarray, w: int, s: int) -> list[Chunk]:
    x = series.values if isinstance(series, SeriesMatrix) else np.asarray(series, dtype=np.float64)
    T = x.shape[1]
    if w < 1 or s < 1:
        raise ValueError("window and step must be positive")
    if w > T:
        raise ValueError(f"window {w} exceeds series length {T}")
    return [Chunk(x[:, o:o + w].copy(), o) for o in range(0, T - w + 1, s)]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: a.reshape(-1).tolist() for k, a in self.m.items()},
            "v": {k: a.reshape(-1).tolist() for k, a in self.v.items()},
        }


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              t: int | None = None) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns new arrays and a new state."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise dc.ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    window_w: int = 120
    step_s: int | None = None  # defaults to window_w
    batch_size: int = 8
    epochs: int = 200
    lr: float = 1e-3
    lam: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    regularizer: str = "kl"
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.step_s is None:
            self.step_s = self.window_w
        if self.window_w < 2 or self.step_s < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("need window_w >= 2, step_s >= 1, batch_size >= 1, epochs >= 1")
        if self.lr <= 0 or self.lam < 0:
            raise ValueError("need lr > 0 and lambda >= 0")
        if not (0.0 < self.adam_beta1 < self.adam_beta2 < 1.0):
            raise ValueError("need 0 < beta1 < beta2 < 1")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")


@dataclass
class EpochRecord:
    epoch: int
    inference_kl: float
    neg_loglik: float
    smooth: float
    total: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    optimizer_state: AdamState | None = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path) -> None:
        names = ["epoch", "inference_kl", "neg_loglik", "smooth", "total", "seconds"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for r in self.records:
                row = asdict(r)
                w.writerow([row["epoch"]] + [repr(float(row[n])) for n in names[1:]])


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def loss_and_grads(params: ModelParams, x_batch: np.ndarray, noise: np.ndarray, lam: float,
                   regularizer: str):
    """Forward a (B, M, W) batch, backpropagate, and return (breakdown, grads)."""
    tensors = params.tensors(requires_grad=True)
    with dc.Tape():
        out = unroll(x_batch, tensors, params.config, noise, mode="train")
        loss = sisvae_loss(out.posterior, out.prior, out.recon, x_batch, lam, regularizer)
    if not np.isfinite(loss.total):
        return loss, None
    dc.backward(loss.objective)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in tensors.items()}
    return loss, grads


def train(dataset: list[Chunk], config: TrainConfig, model_config: ModelConfig,
          callback: Callable[[int, ModelParams, EpochRecord], None] | None = None,
          init_params: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """Fit the model on a list of equally shaped chunks.

    Deterministic given (config.seed, config, dataset). ``callback`` is called
    after each epoch with (epoch, params, record).
    """
    if not dataset:
        raise ValueError("empty dataset")
    shapes = {c.values.shape for c in dataset}
    if len(shapes) != 1:
        raise ValueError(f"chunks have differing shapes: {sorted(shapes)}")
    M, W = next(iter(shapes))
    if M != model_config.x_dim:
        raise ValueError(f"chunks have {M} series but model x_dim is {model_config.x_dim}")

    data = np.stack([c.values for c in dataset])  # (D, M, W), a private copy
    params = init_params.copy() if init_params is not None else ModelParams.init(
        model_config, stream_rng(config.seed, INIT_STREAM))
    state = AdamState()
    history = TrainHistory()
    n = len(dataset)
    P = config.batch_size

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = stream_rng(config.seed, SHUFFLE_STREAM, epoch).permutation(n)
        sums = np.zeros(4)
        n_batches = 0
        for b, lo in enumerate(range(0, n, P)):
            idx = order[lo:lo + P]
            x_batch = data[idx]
            noise = stream_rng(config.seed, NOISE_STREAM, epoch, b).standard_normal(
                (len(idx), W, model_config.z_dim))
            loss, grads = loss_and_grads(params, x_batch, noise, config.lam, config.regularizer)
            if grads is None:
                raise NonFiniteLoss(epoch, b)
            grads, _ = clip_global_norm(grads, config.clip_norm)
            new_arrays, state = adam_step(params.arrays, grads, state, config.lr, config.adam_beta1,
                                          config.adam_beta2, config.adam_eps)
            params = ModelParams(model_config, new_arrays)
            sums += [loss.inference_kl, loss.neg_loglik, loss.smooth, loss.total]
            n_batches += 1
        avg = sums / n_batches
        rec = EpochRecord(epoch, *map(float, avg), seconds=time.perf_counter() - t0)
        history.records.append(rec)
        log.debug("epoch %d total %.4f", epoch, rec.total)
        if callback is not None:
            callback(epoch, params, rec)
    history.optimizer_state = state
    return params, history
