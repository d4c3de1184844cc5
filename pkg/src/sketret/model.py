"""Toy differentiable encoders, attention gates, classifiers and codecs.

All trainable tensors live in one :class:`ModelParams` name -> tensor map.
Forward functions are plain functions of ``(params, inputs)`` so the
trainer can partition the map freely (discriminator vs. everything else).
Any leading batch axes are allowed on inputs.

Parameter groups::

    phi.*  / psi.*      image / sketch branch: backbone, att, latent heads
    h.*                 seen-class classifier on latent samples
    l.*                 local domain classifier on pooled attended maps
    f.*                 optional global domain classifier on latents
    v_p.* / v_alpha.*   cross-modal codecs (stochastic encoder + decoder)
    g1.* g2.* g3.*      semantic projection network
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, fields
from typing import Iterator, Literal, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .data import Modality

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0
PROB_EPS = 1e-6
LEAKY_SLOPE = 0.01

BRANCH = {"image": "phi", "sketch": "psi"}
Codec = Literal["v_p", "v_alpha"]
GammaMode = Literal["dissimilarity", "similarity"]

__all__ = [
    "ShapeError",
    "DimensionSpec",
    "ModelParams",
    "GaussianLatent",
    "init_params",
    "backbone_forward",
    "attention_apply",
    "spatial_average_pool",
    "latent_head",
    "encode",
    "classify",
    "local_domain_classify",
    "global_domain_classify",
    "codec_forward",
    "noise_like",
]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DimensionSpec:
    """Tensor shapes and architecture switches of the toy model."""

    grid: int = 7
    channels: int = 8
    latent_dim: int = 32
    hidden_dim: int = 64
    codec_dim: int = 16
    n_seen: int = 6
    sem_dim: int = 16
    sem_hidden: int = 32
    gcn_dim: int = 32
    gcn_pool: int = 2
    attention: bool = True
    gcn: bool = True
    gamma_mode: GammaMode = "dissimilarity"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type in ("int",) and value < 1:
                raise ShapeError(f"{f.name} must be positive, got {value}")
        if self.gcn_dim % self.gcn_pool:
            raise ShapeError("gcn_dim must be divisible by gcn_pool")
        if self.gamma_mode not in ("dissimilarity", "similarity"):
            raise ShapeError(f"unknown gamma_mode {self.gamma_mode!r}")

    @property
    def flat_dim(self) -> int:
        return self.grid * self.grid * self.channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Every parameter name with its shape, in canonical order."""
        g2, c, d, hd = self.grid * self.grid, self.channels, self.latent_dim, self.hidden_dim
        s: dict[str, tuple[int, ...]] = {}
        for branch in ("phi", "psi"):
            s[f"{branch}.backbone.weight"] = (c, c)
            s[f"{branch}.backbone.bias"] = (c,)
            s[f"{branch}.att.weight"] = (c, 1)
            s[f"{branch}.att.bias"] = (1,)
            s[f"{branch}.hidden.weight"] = (self.flat_dim, hd)
            s[f"{branch}.hidden.bias"] = (hd,)
            s[f"{branch}.mean.weight"] = (hd, d)
            s[f"{branch}.mean.bias"] = (d,)
            s[f"{branch}.logvar.weight"] = (hd, d)
            s[f"{branch}.logvar.bias"] = (d,)
        s["h.weight"] = (d, self.n_seen)
        s["h.bias"] = (self.n_seen,)
        s["l.weight"] = (g2, 1)
        s["l.bias"] = (1,)
        s["f.weight"] = (d, 1)
        s["f.bias"] = (1,)
        for codec in ("v_p", "v_alpha"):
            s[f"{codec}.enc_mean.weight"] = (self.flat_dim, self.codec_dim)
            s[f"{codec}.enc_mean.bias"] = (self.codec_dim,)
            s[f"{codec}.enc_logvar.weight"] = (self.flat_dim, self.codec_dim)
            s[f"{codec}.enc_logvar.bias"] = (self.codec_dim,)
            s[f"{codec}.dec.weight"] = (self.codec_dim, d)
            s[f"{codec}.dec.bias"] = (d,)
        sh = self.sem_hidden
        s["g1.0.weight"] = (self.sem_dim, sh)
        s["g1.0.bias"] = (sh,)
        s["g1.1.weight"] = (sh, sh)
        s["g1.1.bias"] = (sh,)
        s["g2.weight"] = (self.sem_dim, self.gcn_dim)
        s["g3.0.weight"] = (sh + self.gcn_dim // self.gcn_pool, sh)
        s["g3.0.bias"] = (sh,)
        s["g3.1.weight"] = (sh, d)
        s["g3.1.bias"] = (d,)
        return s

    def as_dict(self) -> dict:
        return asdict(self)


class ModelParams(Mapping[str, torch.Tensor]):
    """Named float64 tensors plus the :class:`DimensionSpec` they were built for."""

    def __init__(self, dims: DimensionSpec, tensors: Mapping[str, torch.Tensor | np.ndarray]):
        expected = dims.shapes()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"parameter names mismatch: missing={missing} extra={extra}")
        self.dims = dims
        self._tensors: dict[str, torch.Tensor] = {}
        for name, shape in expected.items():
            t = torch.as_tensor(np.array(tensors[name]) if isinstance(tensors[name], np.ndarray)
                                else tensors[name], dtype=torch.float64)
            if tuple(t.shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(t.shape)}")
            if not torch.isfinite(t).all():
                raise ValueError(f"{name} holds non-finite values")
            self._tensors[name] = t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def group(self, *prefixes: str) -> list[str]:
        return [n for n in self._tensors if n.split(".", 1)[0] in prefixes]

    def clone(self, requires_grad: bool = False) -> "ModelParams":
        out = ModelParams.__new__(ModelParams)
        out.dims = self.dims
        out._tensors = {
            n: t.detach().clone().requires_grad_(requires_grad) for n, t in self._tensors.items()
        }
        return out

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().numpy().copy() for n, t in self._tensors.items()}

    def n_scalars(self) -> int:
        return sum(t.numel() for t in self._tensors.values())


@dataclass(frozen=True, eq=False)
class GaussianLatent:
    """Diagonal Gaussian with a reparameterized draw.

    ``sample = mean + exp(log_var / 2) * noise``; batch axes lead.
    """

    mean: torch.Tensor
    log_var: torch.Tensor
    sample: torch.Tensor
    noise: torch.Tensor

    @classmethod
    def from_params(cls, mean, log_var, noise=None) -> "GaussianLatent":
        mean = torch.as_tensor(mean, dtype=torch.float64)
        log_var = torch.as_tensor(log_var, dtype=torch.float64)
        if mean.shape != log_var.shape:
            raise ShapeError(f"mean {tuple(mean.shape)} vs log_var {tuple(log_var.shape)}")
        if noise is None:
            noise = torch.zeros_like(mean)
        sample = mean + torch.exp(0.5 * log_var) * noise
        return cls(mean, log_var, sample, noise)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def init_params(dims: DimensionSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    tensors = {}
    for name, shape in dims.shapes().items():
        if name.endswith(".bias"):
            tensors[name] = torch.zeros(shape, dtype=torch.float64)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            u = torch.rand(shape, generator=gen, dtype=torch.float64)
            tensors[name] = (2.0 * u - 1.0) * bound
    return ModelParams(dims, tensors)


def noise_like(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def _as_maps(params: ModelParams, maps) -> torch.Tensor:
    if isinstance(maps, np.ndarray) and not maps.flags.writeable:
        maps = maps.copy()
    x = torch.as_tensor(maps, dtype=torch.float64)
    d = params.dims
    if x.shape[-3:] != (d.grid, d.grid, d.channels):
        raise ShapeError(
            f"feature map trailing shape {tuple(x.shape[-3:])} != {(d.grid, d.grid, d.channels)}"
        )
    return x


def _leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def backbone_forward(params: ModelParams, maps, modality: Modality) -> torch.Tensor:
    """Position-wise affine map followed by ``tanh`` on a ``(..., G, G, C)`` grid."""
    x = _as_maps(params, maps)
    b = BRANCH[modality]
    return torch.tanh(x @ params[f"{b}.backbone.weight"] + params[f"{b}.backbone.bias"])


def attention_apply(params: ModelParams, maps, modality: Modality) -> torch.Tensor:
    """Spatial sigmoid gate broadcast over channels; identity when attention is disabled."""
    x = _as_maps(params, maps)
    if not params.dims.attention:
        return x
    b = BRANCH[modality]
    gate = torch.sigmoid(x @ params[f"{b}.att.weight"] + params[f"{b}.att.bias"])
    return x * gate


def spatial_average_pool(maps) -> torch.Tensor:
    """Mean over the channel axis: ``(..., G, G, C) -> (..., G, G)``."""
    return torch.as_tensor(maps, dtype=torch.float64).mean(dim=-1)


def _flatten(x: torch.Tensor, n_trailing: int) -> torch.Tensor:
    return x.reshape(*x.shape[:-n_trailing], -1)


def latent_head(params: ModelParams, attended, modality: Modality, noise) -> GaussianLatent:
    """Flatten -> leaky hidden layer -> (mean, clamped log-variance) heads -> reparameterized draw.

    ``noise`` is either a standard-normal tensor of the latent shape or an
    integer seed for one.
    """
    x = _flatten(_as_maps(params, attended), 3)
    b = BRANCH[modality]
    hidden = _leaky(x @ params[f"{b}.hidden.weight"] + params[f"{b}.hidden.bias"])
    mean = hidden @ params[f"{b}.mean.weight"] + params[f"{b}.mean.bias"]
    log_var = hidden @ params[f"{b}.logvar.weight"] + params[f"{b}.logvar.bias"]
    log_var = torch.clamp(log_var, LOGVAR_MIN, LOGVAR_MAX)
    if not isinstance(noise, torch.Tensor):
        noise = noise_like(tuple(mean.shape), noise)
    return GaussianLatent.from_params(mean, log_var, noise)


def encode(params: ModelParams, maps, modality: Modality, noise) -> tuple[torch.Tensor, GaussianLatent]:
    """Full branch: backbone -> attention -> latent head. Returns ``(attended, latent)``."""
    attended = attention_apply(params, backbone_forward(params, maps, modality), modality)
    return attended, latent_head(params, attended, modality, noise)


def classify(params: ModelParams, z) -> torch.Tensor:
    return torch.as_tensor(z, dtype=torch.float64) @ params["h.weight"] + params["h.bias"]


def _clipped_logistic(logit: torch.Tensor) -> torch.Tensor:
    return torch.clamp(torch.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


def local_domain_classify(params: ModelParams, pooled) -> torch.Tensor:
    """P(image) for a pooled ``(..., G, G)`` map, clipped to ``[1e-6, 1 - 1e-6]``."""
    x = _flatten(torch.as_tensor(pooled, dtype=torch.float64), 2)
    return _clipped_logistic(x @ params["l.weight"] + params["l.bias"]).squeeze(-1)


def global_domain_classify(params: ModelParams, z) -> torch.Tensor:
    z = torch.as_tensor(z, dtype=torch.float64)
    return _clipped_logistic(z @ params["f.weight"] + params["f.bias"]).squeeze(-1)


def codec_forward(params: ModelParams, which: Codec, attended, noise) -> tuple[torch.Tensor, GaussianLatent]:
    """Stochastic single-layer encoder on a flattened attended map, linear decoder to latent size."""
    if which not in ("v_p", "v_alpha"):
        raise ValueError(f"unknown codec {which!r}")
    x = _flatten(_as_maps(params, attended), 3)
    mean = x @ params[f"{which}.enc_mean.weight"] + params[f"{which}.enc_mean.bias"]
    log_var = x @ params[f"{which}.enc_logvar.weight"] + params[f"{which}.enc_logvar.bias"]
    log_var = torch.clamp(log_var, LOGVAR_MIN, LOGVAR_MAX)
    if not isinstance(noise, torch.Tensor):
        noise = noise_like(tuple(mean.shape), noise)
    enc = GaussianLatent.from_params(mean, log_var, noise)
    recon = enc.sample @ params[f"{which}.dec.weight"] + params[f"{which}.dec.bias"]
    return recon, enc
