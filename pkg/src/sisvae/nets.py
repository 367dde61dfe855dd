"""Network components of the smoothness-inducing sequential VAE.

Every map works on a single timestep vector ``(D,)`` or on a batch of
independent chunks stacked as rows ``(B, D)``. Weight matrices are stored
input-major, ``(fan_in, fan_out)``, so ``W y`` is computed as ``y @ W``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

FORMAT_VERSION = 1

HEADS = ("enc", "prior", "dec")
GATES = ("r", "s", "h")


@dataclass(frozen=True)
class ModelConfig:
    x_dim: int
    h_dim: int = 200
    z_dim: int = 40
    feat_dim: int | None = None
    sigma_floor: float = 1e-3

    def __post_init__(self):
        if self.feat_dim is None:
            object.__setattr__(self, "feat_dim", self.h_dim)
        for name in ("x_dim", "h_dim", "z_dim", "feat_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive int, got {v!r}")
        if not (0.0 < self.sigma_floor <= 1e-2):
            raise ValueError(f"sigma_floor must lie in (0, 1e-2], got {self.sigma_floor}")

    def to_dict(self) -> dict:
        return {
            "x_dim": int(self.x_dim),
            "h_dim": int(self.h_dim),
            "z_dim": int(self.z_dim),
            "feat_dim": int(self.feat_dim),
            "sigma_floor": float(self.sigma_floor),
        }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable array, in canonical order."""
    f, h, z, x = cfg.feat_dim, cfg.h_dim, cfg.z_dim, cfg.x_dim
    shapes: dict[str, tuple[int, ...]] = {
        "phi_x.W": (x, f),
        "phi_x.b": (f,),
        "phi_z.W": (z, f),
        "phi_z.b": (f,),
    }
    head_io = {"enc": (f + h, z), "prior": (h, z), "dec": (f + h, x)}
    for head, (n_in, n_out) in head_io.items():
        shapes[f"{head}.W_hid"] = (n_in, h)
        shapes[f"{head}.b_hid"] = (h,)
        shapes[f"{head}.W_mu"] = (h, n_out)
        shapes[f"{head}.b_mu"] = (n_out,)
        shapes[f"{head}.W_sig"] = (h, n_out)
        shapes[f"{head}.b_sig"] = (n_out,)
    for g in GATES:
        shapes[f"gru.W_{g}"] = (f, h)
        shapes[f"gru.U_{g}"] = (h, h)
        shapes[f"gru.b_{g}"] = (h,)
    return shapes


def _fan_in(name: str, shapes: Mapping[str, tuple[int, ...]]) -> int:
    prefix, leaf = name.split(".")
    if leaf.startswith("W") or leaf.startswith("U"):
        return shapes[name][0]
    # a bias shares the fan-in of its layer's input weight
    weight = {"b": "W", "b_hid": "W_hid", "b_mu": "W_mu", "b_sig": "W_sig"}.get(leaf)
    if weight is None:  # gru.b_r etc.
        weight = "W_" + leaf.split("_")[1]
    return shapes[f"{prefix}.{weight}"][0]


@dataclass
class ModelParams:
    """All learnable arrays, keyed by name (see :func:`param_shapes`)."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(self.arrays) != set(expected):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ShapeError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> ModelParams:
        shapes = param_shapes(config)
        arrays = {}
        for name, shape in shapes.items():
            a = np.sqrt(1.0 / _fan_in(name, shapes))
            arrays[name] = rng.uniform(-a, a, size=shape)
        return cls(config, arrays)

    @classmethod
    def zeros(cls, config: ModelConfig) -> ModelParams:
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    def names(self) -> list[str]:
        return list(param_shapes(self.config))

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        out, i = {}, 0
        for n, s in param_shapes(self.config).items():
            k = int(np.prod(s))
            out[n] = np.asarray(vec[i:i + k], dtype=np.float64).reshape(s)
            i += k
        return ModelParams(self.config, out)

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self.config).values())


def _view(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors(requires_grad=False)
    return params


@dataclass
class DiagGaussianSeq:
    """Per-timestep diagonal Gaussians; entry t has shape (D,) or (B, D)."""

    means: list[Tensor]
    stddevs: list[Tensor]

    def __len__(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means[0].shape[-1]

    def mean_array(self) -> np.ndarray:
        """Means stacked with time on axis -2: (T, D) or (B, T, D)."""
        return np.stack([m.values for m in self.means], axis=-2)

    def std_array(self) -> np.ndarray:
        return np.stack([s.values for s in self.stddevs], axis=-2)

    @classmethod
    def from_arrays(cls, means, stddevs) -> DiagGaussianSeq:
        """Build from (T, D) or (B, T, D) arrays."""
        means = np.asarray(means, dtype=np.float64)
        stddevs = np.asarray(stddevs, dtype=np.float64)
        if means.shape != stddevs.shape:
            raise ShapeError(f"means {means.shape} vs stddevs {stddevs.shape}")
        T = means.shape[-2]
        return cls(
            [Tensor(means[..., t, :]) for t in range(T)],
            [Tensor(stddevs[..., t, :]) for t in range(T)],
        )


# ---------------------------------------------------------------------------
# building blocks


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, W), b)


def feature_x(x, params) -> Tensor:
    p = _view(params)
    return dc.tanh(_affine(dc.constant(x), p["phi_x.W"], p["phi_x.b"]))


def feature_z(z, params) -> Tensor:
    p = _view(params)
    return dc.tanh(_affine(dc.constant(z), p["phi_z.W"], p["phi_z.b"]))


def gru_step(y, h_prev, params) -> Tensor:
    """One GRU transition with reset gate r and update gate s."""
    p = _view(params)
    y, h_prev = dc.constant(y), dc.constant(h_prev)
    W_r, U_r, b_r = p["gru.W_r"], p["gru.U_r"], p["gru.b_r"]
    W_s, U_s, b_s = p["gru.W_s"], p["gru.U_s"], p["gru.b_s"]
    W_h, U_h, b_h = p["gru.W_h"], p["gru.U_h"], p["gru.b_h"]
    if y.shape[-1] != W_r.shape[0]:
        raise ShapeError(f"gru_step: input width {y.shape[-1]} != {W_r.shape[0]}")
    if h_prev.shape[-1] != U_r.shape[0]:
        raise ShapeError(f"gru_step: hidden width {h_prev.shape[-1]} != {U_r.shape[0]}")
    r = dc.sigmoid(dc.add(dc.add(dc.matmul(y, W_r), dc.matmul(h_prev, U_r)), b_r))
    s = dc.sigmoid(dc.add(dc.add(dc.matmul(y, W_s), dc.matmul(h_prev, U_s)), b_s))
    h_cand = dc.tanh(dc.add(dc.add(dc.matmul(y, W_h), dc.mul(r, dc.matmul(h_prev, U_h))), b_h))
    return dc.add(dc.mul(dc.sub(1.0, s), h_cand), dc.mul(s, h_prev))


def gaussian_head(inp, head: str, params, config: ModelConfig | None = None) -> tuple[Tensor, Tensor]:
    """Map an input to (mean, stddev) through one tanh hidden layer.

    The stddev is ``softplus(raw) + sigma_floor``.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    if config is None:
        if not isinstance(params, ModelParams):
            raise ValueError("config is required when params is a tensor map")
        config = params.config
    p = _view(params)
    inp = dc.constant(inp)
    W_hid = p[f"{head}.W_hid"]
    if inp.shape[-1] != W_hid.shape[0]:
        raise ShapeError(f"{head} head: input width {inp.shape[-1]} != {W_hid.shape[0]}")
    hid = dc.tanh(_affine(inp, W_hid, p[f"{head}.b_hid"]))
    mu = _affine(hid, p[f"{head}.W_mu"], p[f"{head}.b_mu"])
    raw = _affine(hid, p[f"{head}.W_sig"], p[f"{head}.b_sig"])
    sigma = dc.add(dc.softplus(raw), config.sigma_floor)
    return mu, sigma


def reparameterize(mu, sigma, eps) -> Tensor:
    mu, sigma, eps = dc.constant(mu), dc.constant(sigma), dc.constant(eps)
    if not (mu.shape == sigma.shape == eps.shape):
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {sigma.shape}, {eps.shape}")
    return dc.add(mu, dc.mul(sigma, eps))


@dataclass
class Unrolled:
    posterior: DiagGaussianSeq
    prior: DiagGaussianSeq
    recon: DiagGaussianSeq
    z_path: list[Tensor]
    h_path: list[Tensor]


def unroll(x_chunk, params, config: ModelConfig, noise, mode: str = "train") -> Unrolled:
    """Run encode, sample, prior, decode and recurrence over a chunk.

    ``x_chunk`` is (M, W) for one chunk or (B, M, W) for a batch; ``noise``
    is (W, z_dim) or (B, W, z_dim) accordingly. ``mode`` is a label only.
    """
    if mode not in ("train", "score"):
        raise ValueError(f"mode must be 'train' or 'score', got {mode!r}")
    x = np.asarray(x_chunk, dtype=np.float64)
    eps = np.asarray(noise, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"x_chunk must be (M, W) or (B, M, W), got {x.shape}")
    if x.shape[-2] != config.x_dim:
        raise ShapeError(f"x_chunk has {x.shape[-2]} series, model expects x_dim={config.x_dim}")
    W = x.shape[-1]
    if eps.shape != x.shape[:-2] + (W, config.z_dim):
        raise ShapeError(f"noise shape {eps.shape} does not match {x.shape[:-2] + (W, config.z_dim)}")

    p = _view(params)
    batch = x.shape[:-2]
    h = Tensor(np.zeros(batch + (config.h_dim,)))
    post_mu, post_sd, pri_mu, pri_sd, rec_mu, rec_sd = [], [], [], [], [], []
    z_path, h_path = [], []
    for t in range(W):
        x_t = x[..., :, t]
        mu_z, sd_z = gaussian_head(dc.concat([feature_x(x_t, p), h]), "enc", p, config)
        z_t = reparameterize(mu_z, sd_z, eps[..., t, :])
        mu_0, sd_0 = gaussian_head(h, "prior", p, config)
        fz = feature_z(z_t, p)
        mu_x, sd_x = gaussian_head(dc.concat([fz, h]), "dec", p, config)
        h = gru_step(fz, h, p)
        post_mu.append(mu_z)
        post_sd.append(sd_z)
        pri_mu.append(mu_0)
        pri_sd.append(sd_0)
        rec_mu.append(mu_x)
        rec_sd.append(sd_x)
        z_path.append(z_t)
        h_path.append(h)
    return Unrolled(
        DiagGaussianSeq(post_mu, post_sd),
        DiagGaussianSeq(pri_mu, pri_sd),
        DiagGaussianSeq(rec_mu, rec_sd),
        z_path,
        h_path,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, trainer_state: dict | None = None, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "parameters": {
            n: {"shape": list(params.arrays[n].shape), "values": params.arrays[n].reshape(-1).tolist()}
            for n in params.names()
        },
    }
    if trainer_state is not None:
        doc["trainer_state"] = trainer_state
    if extra:
        doc.update(extra)
    text = json.dumps(doc, indent=1)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    cfg = ModelConfig(**doc["model_config"])
    arrays = {
        n: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for n, entry in doc["parameters"].items()
    }
    return ModelParams(cfg, arrays), doc
