"""Independent reference implementations used as test oracles.

Everything here is written directly against numpy (no diffcore), and the
model forward accepts a dtype so finite differences can run in extended
precision.
"""

import itertools
import math

import numpy as np
from scipy import integrate, stats


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def softplus(a):
    # log(1 + e^a) without overflow
    return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))


def gru_reference(y, h, P):
    """h_new = (1-s) * tanh(W_h y + r*(U_h h) + b_h) + s * h_prev, written out per gate."""
    r = sigmoid(y @ P["gru.W_r"] + h @ P["gru.U_r"] + P["gru.b_r"])
    s = sigmoid(y @ P["gru.W_s"] + h @ P["gru.U_s"] + P["gru.b_s"])
    cand = np.tanh(y @ P["gru.W_h"] + r * (h @ P["gru.U_h"]) + P["gru.b_h"])
    return (1 - s) * cand + s * h


def gru_loops(y, h, P):
    """Same transition with explicit scalar loops; slow but shares no code with numpy matmul."""
    H = len(h)
    out = []
    for j in range(H):
        def pre(g):
            acc = float(P[f"gru.b_{g}"][j])
            for i in range(len(y)):
                acc += y[i] * P[f"gru.W_{g}"][i, j]
            rec = 0.0
            for i in range(H):
                rec += h[i] * P[f"gru.U_{g}"][i, j]
            return acc, rec
        ar, rr = pre("r")
        r = 1.0 / (1.0 + math.exp(-(ar + rr)))
        as_, rs = pre("s")
        s = 1.0 / (1.0 + math.exp(-(as_ + rs)))
        ah, rh = pre("h")
        cand = math.tanh(ah + r * rh)
        out.append((1 - s) * cand + s * h[j])
    return np.array(out)


def _head(inp, P, name, floor):
    hid = np.tanh(inp @ P[f"{name}.W_hid"] + P[f"{name}.b_hid"])
    mu = hid @ P[f"{name}.W_mu"] + P[f"{name}.b_mu"]
    sd = softplus(hid @ P[f"{name}.W_sig"] + P[f"{name}.b_sig"]) + floor
    return mu, sd


def kl_terms(mq, sq, mp, sp):
    return np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2 * sp ** 2) - 0.5


def kl_quad(mq, sq, mp, sp):
    """KL(q || p) for scalar Gaussians by adaptive quadrature of q * log(q/p)."""
    def integrand(x):
        return stats.norm.pdf(x, mq, sq) * (stats.norm.logpdf(x, mq, sq) - stats.norm.logpdf(x, mp, sp))
    lo, hi = mq - 40 * sq, mq + 40 * sq
    val, _ = integrate.quad(integrand, lo, hi, points=[mq], epsabs=1e-13, epsrel=1e-12, limit=400)
    return val


def model_loss(arrays, x, noise, lam=0.5, sigma_floor=1e-3, dtype=np.float64):
    """Full training objective for a single (M, W) chunk, evaluated in ``dtype``."""
    P = {k: np.asarray(v, dtype=dtype) for k, v in arrays.items()}
    x = np.asarray(x, dtype=dtype)
    eps = np.asarray(noise, dtype=dtype)
    floor = dtype(sigma_floor)
    H = P["gru.U_r"].shape[0]
    h = np.zeros(H, dtype=dtype)
    kl = nll = dtype(0)
    recon = []
    half_log_2pi = dtype(0.5) * np.log(dtype(2) * _pi(dtype))
    for t in range(x.shape[1]):
        xt = x[:, t]
        fx = np.tanh(xt @ P["phi_x.W"] + P["phi_x.b"])
        mz, sz = _head(np.concatenate([fx, h]), P, "enc", floor)
        z = mz + sz * eps[t]
        m0, s0 = _head(h, P, "prior", floor)
        fz = np.tanh(z @ P["phi_z.W"] + P["phi_z.b"])
        mx, sx = _head(np.concatenate([fz, h]), P, "dec", floor)
        h = gru_reference(fz, h, P)
        kl += kl_terms(mz, sz, m0, s0).sum()
        nll += (np.log(sx) + (xt - mx) ** 2 / (2 * sx ** 2) + half_log_2pi).sum()
        recon.append((mx, sx))
    smooth = dtype(0)
    for (m1, s1), (m2, s2) in zip(recon[:-1], recon[1:]):
        smooth += kl_terms(m1, s1, m2, s2).sum()
    return kl + nll + dtype(lam) * smooth


def _pi(dtype):
    # pi to extended precision via atan
    return dtype(4) * np.arctan(dtype(1))


def central_diff_grad(f, arrays, step, dtype=np.longdouble):
    """Central differences of f(arrays) for every coordinate, perturbing in ``dtype``."""
    out = {}
    for name, a in arrays.items():
        base = np.asarray(a, dtype=dtype)
        g = np.zeros(base.shape, dtype=dtype)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            g[idx] = (f({**arrays, name: plus}) - f({**arrays, name: minus})) / (2 * step)
        out[name] = g
    return out


# ---------------------------------------------------------------------------
# metric oracles


def auroc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def threshold_sweep(scores, labels):
    """(precision, recall) at every distinct score s, flagging score >= s, in descending s order."""
    P = sum(labels)
    pts = []
    for s in sorted(set(scores), reverse=True):
        flagged = [y for v, y in zip(scores, labels) if v >= s]
        tp = sum(flagged)
        pts.append((tp / len(flagged), tp / P))
    return pts


def auprc_sweep(scores, labels):
    prev, total = 0.0, 0.0
    for prec, rec in threshold_sweep(scores, labels):
        total += (rec - prev) * prec
        prev = rec
    return total


def best_f1_sweep(scores, labels):
    best = 0.0
    for prec, rec in threshold_sweep(scores, labels):
        if prec + rec > 0:
            best = max(best, 2 * prec * rec / (prec + rec))
    return best


def precision_at_k_sorted(scores, labels, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sum(labels[i] for i in order[:k]) / k
