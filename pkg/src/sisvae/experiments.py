"""Small end-to-end pipelines: train, score, evaluate, plus the parameter sweeps used by ``report``."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datagen import SeriesMatrix, SynthConfig, _rng, coregionalization, correlated_preset, gen_correlated_series
from .evalkit import LabeledScores, evaluate, ha_baseline
from .nets import ModelConfig, ModelParams, unroll
from .objective import smoothness_loss
from .scoring import score_series
from .training import TrainConfig, TrainHistory, make_windows, normalize, stream_rng, train


@dataclass
class DetectionRun:
    params: ModelParams
    history: TrainHistory
    metrics: dict
    ha_metrics: dict


def default_synth(**overrides) -> SynthConfig:
    """Desk-scale version of the correlated protocol (20 series x 400 steps)."""
    base = dict(m=20, t=400, anomaly_prob=0.02, kernel_lengthscale=80.0, noise_base=0.1, seed=1)
    base.update(overrides)
    return SynthConfig(**base)


def default_train(**overrides) -> TrainConfig:
    base = dict(window_w=40, step_s=40, batch_size=1, epochs=40, lr=5e-3, lam=0.5, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def run_detection(data: SeriesMatrix, train_cfg: TrainConfig, h_dim: int = 32, z_dim: int = 8,
                  L: int = 16, score_seed: int = 0, ks=(10, 50, 200)) -> DetectionRun:
    """Normalize, train on non-overlapping windows, score with reconstruction probability, evaluate."""
    if data.labels is None:
        raise ValueError("detection run needs labels")
    norm, _ = normalize(data)
    chunks = make_windows(norm, train_cfg.window_w, train_cfg.step_s)
    mcfg = ModelConfig(x_dim=data.m, h_dim=h_dim, z_dim=z_dim)
    params, history = train(chunks, train_cfg, mcfg)
    scores = score_series(params, norm, train_cfg.window_w, "prob", L=L, seed=score_seed)
    metrics = evaluate(LabeledScores.from_matrix(scores, data.labels), ks)
    ha = evaluate(LabeledScores.from_matrix(ha_baseline(norm), data.labels), ks)
    return DetectionRun(params, history, metrics, ha)


def heldout_smoothness(params: ModelParams, synth: SynthConfig, window: int, draw_seed: int,
                       seed: int = 0) -> float:
    """Mean smoothness loss of the reconstructions on fresh anomaly-free chunks.

    The chunks share the coupling matrix of ``synth`` but use new path and noise draws from ``draw_seed``.
    """
    coreg = coregionalization(synth.m, _rng(synth.seed, 0))
    clean, _ = normalize(gen_correlated_series(replace(synth, seed=draw_seed), coreg=coreg))
    chunks = make_windows(clean, window, window)
    total = 0.0
    for i, c in enumerate(chunks):
        noise = stream_rng(seed, i).standard_normal((window, params.config.z_dim))
        out = unroll(c.values, params, params.config, noise, mode="score")
        total += float(smoothness_loss(out.recon))
    return total / len(chunks)


# ---------------------------------------------------------------------------
# sweeps


def lambda_sweep(lams, seeds, synth: SynthConfig, train_cfg: TrainConfig, **kw) -> list[dict]:
    rows = []
    for seed in seeds:
        data = correlated_preset(replace(synth, seed=seed))
        for lam in lams:
            run = run_detection(data, replace(train_cfg, lam=float(lam), seed=seed), **kw)
            rows.append({"seed": seed, "lambda": float(lam), **_flat_metrics(run.metrics)})
    return rows


def proportion_sweep(probs, seeds, synth: SynthConfig, train_cfg: TrainConfig, **kw) -> list[dict]:
    rows = []
    for seed in seeds:
        for p in probs:
            data = correlated_preset(replace(synth, seed=seed, anomaly_prob=float(p)))
            run = run_detection(data, replace(train_cfg, seed=seed), **kw)
            rows.append({"seed": seed, "anomaly_prob": float(p), **_flat_metrics(run.metrics),
                         "ha_auprc": run.ha_metrics["auprc"]})
    return rows


def regularizer_convergence(regularizers, synth: SynthConfig, train_cfg: TrainConfig, h_dim=32, z_dim=8) -> list[dict]:
    """Per-epoch loss curves for each regularizer choice on the same data and seed."""
    data, _ = normalize(correlated_preset(synth))
    chunks = make_windows(data, train_cfg.window_w, train_cfg.step_s)
    mcfg = ModelConfig(x_dim=data.m, h_dim=h_dim, z_dim=z_dim)
    rows = []
    for reg in regularizers:
        _, hist = train(chunks, replace(train_cfg, regularizer=reg), mcfg)
        for r in hist.records:
            rows.append({"regularizer": reg, "epoch": r.epoch, "inference_kl": r.inference_kl,
                         "neg_loglik": r.neg_loglik, "smooth": r.smooth, "total": r.total})
    return rows


def _flat_metrics(m: dict) -> dict:
    out = {k: m[k] for k in ("auroc", "auprc", "best_f1")}
    for k, v in m["precision_at_k"].items():
        out[f"p_at_{k}"] = v
    return out


def write_rows(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("nothing to write")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    tmp.replace(path)
