"""Closed-form losses of the bi-level objective.

All functions accept torch tensors with optional leading batch axes and
reduce only over the feature (last) axis, so the trainer decides how to
average over a batch. Gradients come from autograd on these expressions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .model import GaussianLatent, PROB_EPS

# Every term the total objective knows about, in reporting order.
TERMS = ("tskl", "triplet", "class", "local_adv", "recon", "semantic", "global_adv")
DEFAULT_TERMS = frozenset(TERMS) - {"global_adv"}
BASELINE_TERMS = frozenset({"triplet", "semantic"})
ADVERSARIAL_TERMS = frozenset({"local_adv", "global_adv"})

__all__ = [
    "TERMS",
    "DEFAULT_TERMS",
    "BASELINE_TERMS",
    "LossConfig",
    "gaussian_kl",
    "symmetric_kl",
    "tskl_triplet",
    "instance_triplet",
    "classification_ce",
    "local_adversarial",
    "global_adversarial",
    "unit_gaussian_kl",
    "crossmodal_recon",
    "cosine_margin",
    "semantic_loss",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """Loss weights and margins; defaults are the Sketchy setting (mu, lambda) = (0.1, 0.1)."""

    beta: float = 1e-4
    lam: float = 0.1
    mu: float = 0.1
    t_pos: float = 1.0
    t_neg: float = 0.0
    enable_global_adversarial: bool = False

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0 or self.mu < 0:
            raise ValueError("beta, lam and mu must be non-negative")


def _t(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def _check_dims(p: GaussianLatent, q: GaussianLatent) -> None:
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {p.mean.shape[-1]} vs {q.mean.shape[-1]}")


def gaussian_kl(p: GaussianLatent, q: GaussianLatent) -> torch.Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    _check_dims(p, q)
    var_p, var_q = torch.exp(p.log_var), torch.exp(q.log_var)
    per_dim = 0.5 * (q.log_var - p.log_var) + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q) - 0.5
    return per_dim.sum(dim=-1)


def symmetric_kl(p: GaussianLatent, q: GaussianLatent) -> torch.Tensor:
    return 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p))


def tskl_triplet(p_anchor: GaussianLatent, p_pos: GaussianLatent, p_neg: GaussianLatent,
                 cfg: LossConfig) -> torch.Tensor:
    gap = symmetric_kl(p_anchor, p_pos) - symmetric_kl(p_anchor, p_neg) + cfg.lam
    return cfg.beta * torch.clamp(gap, min=0.0)


def instance_triplet(z_anchor, z_pos, z_neg, mu: float) -> torch.Tensor:
    z_anchor, z_pos, z_neg = _t(z_anchor), _t(z_pos), _t(z_neg)
    d_pos = torch.linalg.vector_norm(z_anchor - z_pos, dim=-1)
    d_neg = torch.linalg.vector_norm(z_anchor - z_neg, dim=-1)
    return torch.clamp(mu + d_pos - d_neg, min=0.0)


def classification_ce(logits, label) -> torch.Tensor:
    """Softmax cross-entropy with log-sum-exp stabilisation."""
    logits = _t(logits)
    label = torch.as_tensor(label, dtype=torch.int64)
    n_classes = logits.shape[-1]
    if torch.any(label < 0) or torch.any(label >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    lse = torch.logsumexp(logits, dim=-1)
    picked = torch.gather(logits, -1, label.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def local_adversarial(l_sketch, l_image) -> torch.Tensor:
    """Min-max value with the 0.5 pseudo-decision boundary weights.

    The discriminator ascends this, the attended feature branches descend it.
    """
    l_sketch = torch.clamp(_t(l_sketch), PROB_EPS, 1.0 - PROB_EPS)
    l_image = torch.clamp(_t(l_image), PROB_EPS, 1.0 - PROB_EPS)
    return 0.5 * torch.log1p(-l_sketch) + 0.5 * torch.log(l_image)


def global_adversarial(f_sketch, f_pos, f_neg) -> torch.Tensor:
    """Optional latent-level counterpart of :func:`local_adversarial` with hard labels
    (sketch -> 0, both images -> 1); off by default."""
    f_sketch = torch.clamp(_t(f_sketch), PROB_EPS, 1.0 - PROB_EPS)
    f_pos = torch.clamp(_t(f_pos), PROB_EPS, 1.0 - PROB_EPS)
    f_neg = torch.clamp(_t(f_neg), PROB_EPS, 1.0 - PROB_EPS)
    return 0.5 * torch.log1p(-f_sketch) + 0.25 * (torch.log(f_pos) + torch.log(f_neg))


def unit_gaussian_kl(enc: GaussianLatent) -> torch.Tensor:
    """KL(enc || N(0, I))."""
    return 0.5 * (torch.exp(enc.log_var) + enc.mean ** 2 - 1.0 - enc.log_var).sum(dim=-1)


def crossmodal_recon(recon_p, target_sketch_latent, enc_p: GaussianLatent,
                     recon_alpha, target_image_latent, enc_alpha: GaussianLatent) -> torch.Tensor:
    """Squared reconstruction error plus bottleneck KL, in both directions.

    ``recon_p`` reconstructs the sketch latent from the attended image map,
    ``recon_alpha`` reconstructs the image latent from the attended sketch map.
    """
    recon_p, recon_alpha = _t(recon_p), _t(recon_alpha)
    target_sketch_latent, target_image_latent = _t(target_sketch_latent), _t(target_image_latent)
    if recon_p.shape != target_sketch_latent.shape or recon_alpha.shape != target_image_latent.shape:
        raise ValueError("reconstruction and target shapes differ")
    rec1 = ((recon_p - target_sketch_latent) ** 2).sum(dim=-1) + unit_gaussian_kl(enc_p)
    rec2 = ((recon_alpha - target_image_latent) ** 2).sum(dim=-1) + unit_gaussian_kl(enc_alpha)
    return rec1 + rec2


def cosine_margin(x, y, t: float) -> torch.Tensor:
    """``0.5 * (t - cos(x, y))``."""
    x, y = _t(x), _t(y)
    nx = torch.linalg.vector_norm(x, dim=-1)
    ny = torch.linalg.vector_norm(y, dim=-1)
    if torch.any(nx == 0) or torch.any(ny == 0):
        raise ValueError("cosine_margin is undefined for zero-norm vectors")
    cos = (x * y).sum(dim=-1) / (nx * ny)
    return 0.5 * (t - cos)


def semantic_loss(z_anchor, z_pos, z_neg, g_wplus, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return (cosine_margin(z_anchor, g_wplus, cfg.t_pos)
            + cosine_margin(z_pos, g_wplus, cfg.t_pos)
            + cosine_margin(z_neg, g_wplus, cfg.t_neg))


def total_loss(components: Mapping[str, torch.Tensor], enabled=DEFAULT_TERMS
               ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sum of enabled component values.

    Returns ``(total, breakdown)`` where the breakdown holds every enabled
    term (in :data:`TERMS` order) and the total is their left-to-right sum.
    """
    unknown = set(enabled) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    breakdown = {name: _t(components[name]) for name in TERMS if name in enabled}
    total = torch.zeros((), dtype=torch.float64)
    for value in breakdown.values():
        total = total + value
    return total, breakdown

