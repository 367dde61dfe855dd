"""Loss terms: Gaussian KL, Gaussian log-likelihood and smoothness penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DomainError, ShapeError, Tensor
from .nets import DiagGaussianSeq

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

REGULARIZERS = ("kl", "mean", "none")


def _check_sigma(*sigmas: Tensor) -> None:
    for s in sigmas:
        if np.any(s.values <= 0):
            raise DomainError("standard deviations must be strictly positive")


def _same_shape(*ts: Tensor, what: str) -> None:
    if len({t.shape for t in ts}) != 1:
        raise ShapeError(f"{what}: shapes differ {[t.shape for t in ts]}")


def kl_elementwise(mu_q, sd_q, mu_p, sd_p) -> Tensor:
    """Per-coordinate KL( N(mu_q, sd_q^2) || N(mu_p, sd_p^2) )."""
    mu_q, sd_q, mu_p, sd_p = (dc.constant(a) for a in (mu_q, sd_q, mu_p, sd_p))
    _same_shape(mu_q, sd_q, mu_p, sd_p, what="kl")
    _check_sigma(sd_q, sd_p)
    log_q, log_p = dc.log(sd_q), dc.log(sd_p)
    # work with the ratio sd_q / sd_p so equal inputs give exactly zero
    log_ratio = dc.sub(log_q, log_p)
    ratio = dc.exp(log_ratio)
    scaled_gap = dc.mul(dc.sub(mu_q, mu_p), dc.exp(dc.negate(log_p)))
    quad = dc.add(dc.square(ratio), dc.square(scaled_gap))
    return dc.sub(dc.scalar_mul(quad, 0.5), dc.add(log_ratio, 0.5))


def kl_diag_gauss(mu_q, sd_q, mu_p, sd_p) -> Tensor:
    """KL divergence between two diagonal Gaussians, summed over all coordinates."""
    return dc.sum(kl_elementwise(mu_q, sd_q, mu_p, sd_p))


def gauss_logpdf(x, mu, sd) -> Tensor:
    """Per-coordinate Gaussian log-density."""
    x, mu, sd = dc.constant(x), dc.constant(mu), dc.constant(sd)
    _same_shape(x, mu, sd, what="gauss_loglik")
    _check_sigma(sd)
    log_sd = dc.log(sd)
    z2 = dc.mul(dc.square(dc.sub(x, mu)), dc.exp(dc.scalar_mul(log_sd, -2.0)))
    return dc.sub(dc.negate(dc.add(log_sd, dc.scalar_mul(z2, 0.5))), HALF_LOG_2PI)


def gauss_loglik(x, mu, sd) -> Tensor:
    return dc.sum(gauss_logpdf(x, mu, sd))


def _flat(parts: list[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else dc.concat(parts)


def smoothness_loss(recon: DiagGaussianSeq) -> Tensor:
    """Sum over t>=2 and every series of KL(p_{t-1} || p_t) between reconstructions."""
    W = len(recon)
    if W < 1:
        raise ShapeError("smoothness_loss: empty sequence")
    if W == 1:
        return dc.scalar_mul(dc.sum(recon.means[0]), 0.0)
    D = recon.dim
    mu, sd = _flat(recon.means), _flat(recon.stddevs)
    n = W * D
    return kl_diag_gauss(
        dc.slice_last(mu, 0, n - D),
        dc.slice_last(sd, 0, n - D),
        dc.slice_last(mu, D, n),
        dc.slice_last(sd, D, n),
    )


def mean_smoothness_loss(recon: DiagGaussianSeq) -> Tensor:
    """Sum of squared second differences of the reconstruction means."""
    W = len(recon)
    if W < 3:
        raise ShapeError(f"mean_smoothness_loss needs length >= 3, got {W}")
    D = recon.dim
    mu = _flat(recon.means)
    n = W * D
    second = dc.add(
        dc.sub(dc.slice_last(mu, 2 * D, n), dc.scalar_mul(dc.slice_last(mu, D, n - D), 2.0)),
        dc.slice_last(mu, 0, n - 2 * D),
    )
    return dc.sum(dc.square(second))


@dataclass
class LossBreakdown:
    inference_kl: float
    neg_loglik: float
    smooth: float
    total: float
    lam: float
    objective: Tensor  # differentiable scalar equal to total

    def as_row(self) -> dict[str, float]:
        return {
            "inference_kl": self.inference_kl,
            "neg_loglik": self.neg_loglik,
            "smooth": self.smooth,
            "total": self.total,
        }


def _x_steps(x_chunk: np.ndarray, W: int) -> list[np.ndarray]:
    x = np.asarray(x_chunk, dtype=np.float64)
    if x.shape[-1] != W:
        raise ShapeError(f"x_chunk has {x.shape[-1]} timesteps, distributions have {W}")
    return [x[..., :, t] for t in range(W)]


def sisvae_loss(posterior: DiagGaussianSeq, prior_seq: DiagGaussianSeq, recon: DiagGaussianSeq,
                x_chunk, lam: float = 0.5, regularizer: str = "kl") -> LossBreakdown:
    """Minimized objective: inference KL + negative log-likelihood + lam * smoothness.

    For a batch (rows = chunks) every term is summed over time and series
    within a chunk, then averaged over chunks.
    """
    if regularizer not in REGULARIZERS:
        raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {regularizer!r}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    W = len(recon)
    if not (len(posterior) == len(prior_seq) == W):
        raise ShapeError(f"sequence lengths differ: {len(posterior)}, {len(prior_seq)}, {W}")
    xs = _x_steps(x_chunk, W)
    n_chunks = int(np.prod(recon.means[0].shape[:-1]))
    scale = 1.0 / n_chunks

    kl = dc.scalar_mul(kl_diag_gauss(_flat(posterior.means), _flat(posterior.stddevs),
                                     _flat(prior_seq.means), _flat(prior_seq.stddevs)), scale)
    x_flat = np.concatenate(xs, axis=-1) if W > 1 else xs[0]
    nll = dc.scalar_mul(gauss_loglik(x_flat, _flat(recon.means), _flat(recon.stddevs)), -scale)
    total = dc.add(kl, nll)

    if regularizer == "none":
        smooth_val = 0.0
    else:
        if lam == 0.0:
            # report the value without putting it in the graph
            detached = DiagGaussianSeq([m.detach() for m in recon.means], [s.detach() for s in recon.stddevs])
            recon_for_smooth = detached
        else:
            recon_for_smooth = recon
        fn = smoothness_loss if regularizer == "kl" else mean_smoothness_loss
        smooth = dc.scalar_mul(fn(recon_for_smooth), scale)
        smooth_val = float(smooth)
        if lam != 0.0:
            total = dc.add(total, dc.scalar_mul(smooth, lam))

    return LossBreakdown(
        inference_kl=float(kl),
        neg_loglik=float(nll),
        smooth=smooth_val,
        total=float(total),
        lam=float(lam),
        objective=total,
    )
