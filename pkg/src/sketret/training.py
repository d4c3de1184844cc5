"""Alternating min-max training, gradient audit and checkpoint persistence."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import losses as L
from .data import DatasetBundle, mine_triplets, triplet_arrays
from .graph import SemanticGraph, build_adjacency, semantic_project
from .model import (
    DimensionSpec,
    ModelParams,
    codec_forward,
    classify,
    encode,
    global_domain_classify,
    init_params,
    local_domain_classify,
    spatial_average_pool,
)
from .tensorio import ContainerError, read_tensors, tensor_text, text_tensor, write_tensors

logger = logging.getLogger(__name__)

DISCRIMINATOR_GROUPS = ("l", "f")

__all__ = [
    "TrainingDivergedError",
    "ModelConfig",
    "TrainConfig",
    "Checkpoint",
    "AuditResult",
    "dims_for",
    "seen_graph",
    "batch_terms",
    "epoch_losses",
    "train",
    "finite_difference_audit",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_config_hash",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, term: str, epoch: int, batch: int):
        self.term = term
        super().__init__(f"non-finite value in loss term {term!r} (epoch {epoch}, batch {batch})")


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    hidden_dim: int = 64
    codec_dim: int = 16
    sem_hidden: int = 32
    gcn_dim: int = 32
    gcn_pool: int = 2
    attention: bool = True
    gcn: bool = True
    gamma_mode: str = "dissimilarity"

    def __post_init__(self):
        if self.gamma_mode not in ("dissimilarity", "similarity"):
            raise ValueError(f"gamma_mode must be 'dissimilarity' or 'similarity', got {self.gamma_mode!r}")
        if min(self.latent_dim, self.hidden_dim, self.codec_dim, self.sem_hidden,
               self.gcn_dim, self.gcn_pool) < 1:
            raise ValueError("model dimensions must be positive")
        if self.gcn_dim % self.gcn_pool:
            raise ValueError("gcn_dim must be a multiple of gcn_pool")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    triplets_per_epoch: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    terms: frozenset = L.DEFAULT_TERMS
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "terms", frozenset(self.terms))
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.triplets_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("triplets_per_epoch and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        unknown = self.terms - set(L.TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")

    @property
    def active_terms(self) -> frozenset:
        if self.loss.enable_global_adversarial:
            return self.terms | {"global_adv"}
        return self.terms


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    train_config: TrainConfig
    epoch: int
    loss_history: list[dict[str, float]]

    def __post_init__(self):
        if len(self.loss_history) != self.epoch:
            raise ValueError(f"{len(self.loss_history)} history rows for epoch {self.epoch}")


@dataclass(frozen=True)
class AuditResult:
    max_relative_error: float
    # (parameter name, flat index, analytic, numeric, relative error)
    probes: tuple[tuple[str, int, float, float, float], ...]


def dims_for(bundle: DatasetBundle, model: ModelConfig) -> DimensionSpec:
    g, _, c = bundle.map_shape
    split = bundle.require_split()
    return DimensionSpec(
        grid=g, channels=c, latent_dim=model.latent_dim, hidden_dim=model.hidden_dim,
        codec_dim=model.codec_dim, n_seen=len(split.seen_classes), sem_dim=bundle.prototypes.dim,
        sem_hidden=model.sem_hidden, gcn_dim=model.gcn_dim, gcn_pool=model.gcn_pool,
        attention=model.attention, gcn=model.gcn, gamma_mode=model.gamma_mode,
    )


def seen_graph(bundle: DatasetBundle, gamma_mode: str = "dissimilarity") -> SemanticGraph:
    split = bundle.require_split()
    return build_adjacency(bundle.prototypes.vectors[list(split.seen_classes)], gamma_mode)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _noise_seeds(noise_seed: int) -> dict[str, int]:
    keys = ("anchor", "positive", "negative", "v_p", "v_alpha")
    states = np.random.SeedSequence(int(noise_seed)).generate_state(len(keys))
    return dict(zip(keys, (int(s) for s in states)))


class _BatchContext:
    """Tensors and lookups shared by every batch of one training run."""

    def __init__(self, bundle: DatasetBundle, graph: SemanticGraph):
        split = bundle.require_split()
        self.sketch_maps = torch.from_numpy(np.array(bundle.arrays("sketch")[0]))
        self.image_maps = torch.from_numpy(np.array(bundle.arrays("image")[0]))
        self.image_labels = bundle.arrays("image")[1]
        label_of = np.full(bundle.n_classes, -1, dtype=np.int64)
        label_of[list(split.seen_classes)] = np.arange(len(split.seen_classes))
        self.seen_label = label_of
        self.graph = graph


def batch_terms(params: ModelParams, ctx: _BatchContext, batch: dict[str, np.ndarray],
                loss_cfg: L.LossConfig, terms: Iterable[str], noise_seed: int) -> dict[str, torch.Tensor]:
    """Batch-mean value of every requested loss term."""
    terms = set(terms)
    seeds = _noise_seeds(noise_seed)
    a_maps = ctx.sketch_maps[batch["anchor"]]
    p_maps = ctx.image_maps[batch["positive"]]
    n_maps = ctx.image_maps[batch["negative"]]
    att_a, lat_a = encode(params, a_maps, "sketch", seeds["anchor"])
    att_p, lat_p = encode(params, p_maps, "image", seeds["positive"])
    _, lat_n = encode(params, n_maps, "image", seeds["negative"])
    za, zp, zn = lat_a.sample, lat_p.sample, lat_n.sample
    out: dict[str, torch.Tensor] = {}

    if "tskl" in terms:
        out["tskl"] = L.tskl_triplet(lat_a, lat_p, lat_n, loss_cfg).mean()
    if "triplet" in terms:
        out["triplet"] = L.instance_triplet(za, zp, zn, loss_cfg.mu).mean()
    if "class" in terms:
        y_pos = torch.from_numpy(ctx.seen_label[batch["prototype"]])
        y_neg = torch.from_numpy(ctx.seen_label[ctx.image_labels[batch["negative"]]])
        ce = (L.classification_ce(classify(params, za), y_pos)
              + L.classification_ce(classify(params, zp), y_pos)
              + L.classification_ce(classify(params, zn), y_neg))
        out["class"] = ce.mean()
    if "local_adv" in terms:
        l_sketch = local_domain_classify(params, spatial_average_pool(att_a))
        l_image = local_domain_classify(params, spatial_average_pool(att_p))
        out["local_adv"] = L.local_adversarial(l_sketch, l_image).mean()
    if "recon" in terms:
        recon_p, enc_p = codec_forward(params, "v_p", att_p, seeds["v_p"])
        recon_a, enc_a = codec_forward(params, "v_alpha", att_a, seeds["v_alpha"])
        out["recon"] = L.crossmodal_recon(recon_p, za, enc_p, recon_a, zp, enc_a).mean()
    if "semantic" in terms:
        g = semantic_project(ctx.graph, params)
        g_plus = g[torch.from_numpy(ctx.seen_label[batch["prototype"]])]
        out["semantic"] = L.semantic_loss(za, zp, zn, g_plus, loss_cfg).mean()
    if "global_adv" in terms:
        out["global_adv"] = L.global_adversarial(
            global_domain_classify(params, za),
            global_domain_classify(params, zp),
            global_domain_classify(params, zn),
        ).mean()
    return out


def _discriminator_objective(params, ctx, batch, terms, noise_seed) -> torch.Tensor:
    """Adversarial value with feature branches held fixed (ascended by l and f)."""
    seeds = _noise_seeds(noise_seed)
    with torch.no_grad():
        att_a, lat_a = encode(params, ctx.sketch_maps[batch["anchor"]], "sketch", seeds["anchor"])
        att_p, lat_p = encode(params, ctx.image_maps[batch["positive"]], "image", seeds["positive"])
        _, lat_n = encode(params, ctx.image_maps[batch["negative"]], "image", seeds["negative"])
    value = torch.zeros((), dtype=torch.float64)
    if "local_adv" in terms:
        value = value + L.local_adversarial(
            local_domain_classify(params, spatial_average_pool(att_a)),
            local_domain_classify(params, spatial_average_pool(att_p)),
        ).mean()
    if "global_adv" in terms:
        value = value + L.global_adversarial(
            global_domain_classify(params, lat_a.sample),
            global_domain_classify(params, lat_p.sample),
            global_domain_classify(params, lat_n.sample),
        ).mean()
    return value


def _epoch_triplets(bundle: DatasetBundle, config: TrainConfig, epoch: int) -> dict[str, np.ndarray]:
    triplets = mine_triplets(bundle, config.triplets_per_epoch, _derive_seed(config.seed, epoch, 0))
    return triplet_arrays(triplets)


def epoch_losses(params: ModelParams, bundle: DatasetBundle, config: TrainConfig, epoch: int,
                 ctx: _BatchContext | None = None) -> dict[str, float]:
    """Per-term losses recorded in the history for ``epoch`` (0-based).

    Evaluated on all triplets mined for that epoch with a fixed noise draw,
    so the value is reproducible from the parameters alone.
    """
    if ctx is None:
        ctx = _BatchContext(bundle, seen_graph(bundle, params.dims.gamma_mode))
    arrays = _epoch_triplets(bundle, config, epoch)
    with torch.no_grad():
        values = batch_terms(params, ctx, arrays, config.loss, config.active_terms,
                             _derive_seed(config.seed, epoch, 2))
        total, breakdown = L.total_loss(values, config.active_terms)
    row = {k: float(v) for k, v in breakdown.items()}
    row["total"] = float(total)
    return row


def _check_finite(values: dict[str, torch.Tensor], epoch: int, batch: int) -> None:
    for name, value in values.items():
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(name, epoch, batch)


def train(bundle: DatasetBundle, config: TrainConfig | None = None,
          on_epoch_end: Callable[[int, ModelParams], None] | None = None,
          init: ModelParams | None = None) -> Checkpoint:
    """Optimize the enabled objective with alternating adversarial updates.

    Each mini-batch first takes one ascent step for the domain classifiers
    on the adversarial value, then one descent step for every other
    parameter on the summed objective. Both use SGD with momentum.
    """
    config = config or TrainConfig()
    dims = dims_for(bundle, config.model)
    params = (init if init is not None else init_params(dims, config.seed)).clone(requires_grad=True)
    ctx = _BatchContext(bundle, seen_graph(bundle, dims.gamma_mode))
    terms = config.active_terms

    disc_names = params.group(*DISCRIMINATOR_GROUPS)
    feat_names = [n for n in params if n not in disc_names]
    disc_opt = torch.optim.SGD([params[n] for n in disc_names], lr=config.learning_rate,
                               momentum=config.momentum, maximize=True)
    feat_opt = torch.optim.SGD([params[n] for n in feat_names], lr=config.learning_rate,
                               momentum=config.momentum)
    adversarial = bool(terms & L.ADVERSARIAL_TERMS)

    history: list[dict[str, float]] = []
    for epoch in range(config.epochs):
        arrays = _epoch_triplets(bundle, config, epoch)
        n = len(arrays["anchor"])
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = {k: v[start:start + config.batch_size] for k, v in arrays.items()}
            noise_seed = _derive_seed(config.seed, epoch, 1, b)
            if adversarial:
                disc_opt.zero_grad(set_to_none=True)
                value = _discriminator_objective(params, ctx, batch, terms, noise_seed)
                _check_finite({"discriminator": value}, epoch, b)
                value.backward()
                disc_opt.step()
            feat_opt.zero_grad(set_to_none=True)
            values = batch_terms(params, ctx, batch, config.loss, terms, noise_seed)
            _check_finite(values, epoch, b)
            total, _ = L.total_loss(values, terms)
            total.backward()
            # the discriminator is only ever moved by its own ascent step
            for name in disc_names:
                params[name].grad = None
            feat_opt.step()
        row = epoch_losses(params, bundle, config, epoch, ctx)
        if not math.isfinite(row["total"]):
            raise TrainingDivergedError("total", epoch, -1)
        history.append(row)
        logger.debug("epoch %d: %s", epoch + 1, row)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params.clone())
    return Checkpoint(params.clone(), config, config.epochs, history)


def finite_difference_audit(bundle: DatasetBundle, config: TrainConfig | None = None,
                            probes: int = 24, seed: int = 0, n_triplets: int = 8,
                            step: float = 1e-5) -> AuditResult:
    """Compare autograd gradients of the summed objective with central differences.

    Probed entries are drawn uniformly over all parameter scalars that the
    enabled terms touch. Relative error is ``|a - n| / max(|a|, |n|)``;
    entries where both are below ``1e-6`` count as agreeing if their
    absolute difference is below ``1e-10``.
    """
    config = config or TrainConfig()
    dims = dims_for(bundle, config.model)
    params = init_params(dims, seed).clone(requires_grad=True)
    ctx = _BatchContext(bundle, seen_graph(bundle, dims.gamma_mode))
    terms = config.active_terms
    batch = triplet_arrays(mine_triplets(bundle, n_triplets, _derive_seed(seed, 99)))
    noise_seed = _derive_seed(seed, 98)

    def objective() -> torch.Tensor:
        total, _ = L.total_loss(batch_terms(params, ctx, batch, config.loss, terms, noise_seed), terms)
        return total

    total = objective()
    names = list(params)
    grads = torch.autograd.grad(total, [params[n] for n in names], allow_unused=True)
    grads = {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}

    sizes = np.array([params[n].numel() for n in names])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=min(probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    records = []
    worst = 0.0
    with torch.no_grad():
        for flat in np.sort(picks):
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[i], int(flat - offsets[i])
            view = params[name].view(-1)
            original = view[idx].item()
            view[idx] = original + step
            up = objective().item()
            view[idx] = original - step
            down = objective().item()
            view[idx] = original
            numeric = (up - down) / (2 * step)
            analytic = grads[name].view(-1)[idx].item()
            scale = max(abs(analytic), abs(numeric))
            diff = abs(analytic - numeric)
            if scale < 1e-6:
                rel = 0.0 if diff < 1e-10 else diff / max(scale, 1e-300)
            else:
                rel = diff / scale
            worst = max(worst, rel)
            records.append((name, idx, analytic, numeric, rel))
    return AuditResult(worst, tuple(records))


# -- persistence ----------------------------------------------------------------

_DIM_FIELDS = [f.name for f in fields(DimensionSpec)]
_GAMMA_MODES = ("dissimilarity", "similarity")


def _dims_vector(dims: DimensionSpec) -> np.ndarray:
    out = []
    for name in _DIM_FIELDS:
        value = getattr(dims, name)
        out.append(_GAMMA_MODES.index(value) if name == "gamma_mode" else float(value))
    return np.array(out, dtype=np.float64)


def _dims_from_vector(vec: np.ndarray) -> DimensionSpec:
    kwargs = {}
    for name, value in zip(_DIM_FIELDS, vec):
        if name == "gamma_mode":
            kwargs[name] = _GAMMA_MODES[int(value)]
        elif name in ("attention", "gcn"):
            kwargs[name] = bool(value)
        else:
            kwargs[name] = int(value)
    return DimensionSpec(**kwargs)


def save_checkpoint(ckpt: Checkpoint, path: str | Path, config_hash: str | None = None) -> None:
    cfg = ckpt.train_config
    tensors: dict[str, np.ndarray] = {}
    if config_hash is not None:
        tensors["meta.config_hash"] = text_tensor(config_hash)
    tensors["meta.epoch"] = np.array(ckpt.epoch, dtype=np.float64)
    tensors["meta.dims"] = _dims_vector(ckpt.params.dims)
    tensors["meta.train"] = np.array(
        [cfg.epochs, cfg.triplets_per_epoch, cfg.batch_size, cfg.learning_rate, cfg.momentum, cfg.seed],
        dtype=np.float64,
    )
    lc = cfg.loss
    tensors["meta.loss"] = np.array(
        [lc.beta, lc.lam, lc.mu, lc.t_pos, lc.t_neg, float(lc.enable_global_adversarial)]
    )
    tensors["meta.terms"] = np.array([float(t in cfg.terms) for t in L.TERMS])
    columns = list(L.TERMS) + ["total"]
    hist = np.full((len(ckpt.loss_history), len(columns)), np.nan)
    for r, row in enumerate(ckpt.loss_history):
        for c, name in enumerate(columns):
            if name in row:
                hist[r, c] = row[name]
    tensors["meta.history"] = hist.reshape(len(ckpt.loss_history), len(columns))
    for name, value in ckpt.params.to_numpy().items():
        tensors[f"param.{name}"] = value
    write_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    t = read_tensors(path)
    try:
        dims = _dims_from_vector(t["meta.dims"])
        epochs, n_trip, batch, lr, mom, seed = t["meta.train"]
        beta, lam, mu, t_pos, t_neg, glob = t["meta.loss"]
        terms = frozenset(name for name, on in zip(L.TERMS, t["meta.terms"]) if on)
        hist = t["meta.history"]
        epoch = int(t["meta.epoch"])
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"checkpoint metadata incomplete: {exc}") from None
    model = ModelConfig(
        latent_dim=dims.latent_dim, hidden_dim=dims.hidden_dim, codec_dim=dims.codec_dim,
        sem_hidden=dims.sem_hidden, gcn_dim=dims.gcn_dim, gcn_pool=dims.gcn_pool,
        attention=dims.attention, gcn=dims.gcn, gamma_mode=dims.gamma_mode,
    )
    config = TrainConfig(
        epochs=int(epochs), triplets_per_epoch=int(n_trip), batch_size=int(batch),
        learning_rate=float(lr), momentum=float(mom),
        loss=L.LossConfig(float(beta), float(lam), float(mu), float(t_pos), float(t_neg), bool(glob)),
        terms=terms, model=model, seed=int(seed),
    )
    columns = list(L.TERMS) + ["total"]
    history = [
        {name: float(v) for name, v in zip(columns, row) if not np.isnan(v)} for row in hist
    ]
    params = ModelParams(dims, {k[len("param."):]: torch.from_numpy(v) for k, v in t.items()
                                if k.startswith("param.")})
    return Checkpoint(params, config, epoch, history)



def checkpoint_config_hash(path: str | Path) -> str | None:
    t = read_tensors(path)
    return tensor_text(t["meta.config_hash"]) if "meta.config_hash" in t else None
