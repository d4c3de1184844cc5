"""Semantic class graph, GCN branch and neighbourhood-topology diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import LEAKY_SLOPE, ModelParams, ShapeError

__all__ = [
    "UndefinedScoreError",
    "SemanticGraph",
    "cosine_similarity_matrix",
    "build_adjacency",
    "gcn_layer",
    "semantic_project",
    "topology_preservation_score",
]


class UndefinedScoreError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SemanticGraph:
    """Prototypes, their pairwise cosine dissimilarity ``gamma`` and the
    symmetric-normalized propagation operator built from it."""

    prototypes: np.ndarray
    gamma: np.ndarray
    propagation: np.ndarray
    gamma_mode: str = "dissimilarity"

    @property
    def n_nodes(self) -> int:
        return self.prototypes.shape[0]


def cosine_similarity_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm row(s) {np.flatnonzero(norms == 0).tolist()}")
    unit = x / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    return 0.5 * (sim + sim.T)


def build_adjacency(prototypes: np.ndarray, gamma_mode: str = "dissimilarity") -> SemanticGraph:
    """``gamma[i, j] = 1 - cos(w_i, w_j)``; propagation ``D^-1/2 (A + I) D^-1/2``.

    ``A`` is ``gamma`` itself by default. With ``gamma_mode="similarity"``
    the edges are ``1 - gamma / 2`` instead (zero diagonal kept).
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    try:
        sim = cosine_similarity_matrix(protos)
    except ValueError as exc:
        raise ValueError(f"zero-norm prototype: {exc}") from None
    gamma = 1.0 - sim
    np.fill_diagonal(gamma, 0.0)
    if gamma_mode == "dissimilarity":
        adjacency = gamma
    elif gamma_mode == "similarity":
        adjacency = 1.0 - gamma / 2.0
        np.fill_diagonal(adjacency, 0.0)
    else:
        raise ValueError(f"unknown gamma_mode {gamma_mode!r}")
    a_hat = adjacency + np.eye(len(protos))
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    propagation = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    return SemanticGraph(protos, gamma, propagation, gamma_mode)


def gcn_layer(graph: SemanticGraph | np.ndarray, features, weights, activation: str = "leaky") -> torch.Tensor:
    """One propagation step ``act(P @ X @ W)``; ``activation`` is ``"leaky"`` or ``"linear"``."""
    prop = graph.propagation if isinstance(graph, SemanticGraph) else graph
    prop = torch.as_tensor(prop, dtype=torch.float64)
    x = torch.as_tensor(features, dtype=torch.float64)
    w = torch.as_tensor(weights, dtype=torch.float64)
    if x.shape[0] != prop.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows for a {prop.shape[0]}-node graph")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"features have {x.shape[1]} columns, weights {w.shape[0]} rows")
    out = prop @ x @ w
    if activation == "leaky":
        return F.leaky_relu(out, LEAKY_SLOPE)
    if activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def _mlp(x: torch.Tensor, params: ModelParams, prefix: str, final_linear: bool) -> torch.Tensor:
    out = x @ params[f"{prefix}.0.weight"] + params[f"{prefix}.0.bias"]
    out = F.leaky_relu(out, LEAKY_SLOPE)
    out = out @ params[f"{prefix}.1.weight"] + params[f"{prefix}.1.bias"]
    return out if final_linear else F.leaky_relu(out, LEAKY_SLOPE)


def semantic_project(graph: SemanticGraph, params: ModelParams, use_gcn: bool | None = None) -> torch.Tensor:
    """Per-class latent embeddings ``g3([g1(W), pool(g2(Gamma, W))])``.

    The GCN output is average-pooled along features in windows of
    ``dims.gcn_pool``. ``use_gcn=False`` (or ``dims.gcn`` false) replaces
    that half of the concatenation with zeros.
    """
    dims = params.dims
    if use_gcn is None:
        use_gcn = dims.gcn
    w = torch.as_tensor(graph.prototypes, dtype=torch.float64)
    if w.shape[1] != dims.sem_dim:
        raise ShapeError(f"prototype dim {w.shape[1]} != sem_dim {dims.sem_dim}")
    if w.shape[0] != dims.n_seen:
        raise ShapeError(f"{w.shape[0]} prototypes for a model with {dims.n_seen} seen classes")
    mlp_branch = _mlp(w, params, "g1", final_linear=False)
    gcn_out = gcn_layer(graph, w, params["g2.weight"])
    pooled = gcn_out.reshape(w.shape[0], -1, dims.gcn_pool).mean(dim=-1)
    if not use_gcn:
        pooled = torch.zeros_like(pooled)
    return _mlp(torch.cat([mlp_branch, pooled], dim=1), params, "g3", final_linear=True)


def topology_preservation_score(original, projected) -> float:
    """Pearson correlation of the strict upper triangles of both cosine-similarity matrices."""
    original = np.asarray(original, dtype=np.float64)
    projected = np.asarray(projected.detach().numpy() if isinstance(projected, torch.Tensor)
                           else projected, dtype=np.float64)
    if original.shape[0] != projected.shape[0]:
        raise ValueError("row counts differ")
    if original.shape[0] < 3:
        raise ValueError("need at least 3 rows")
    iu = np.triu_indices(original.shape[0], k=1)
    a = cosine_similarity_matrix(original)[iu]
    b = cosine_similarity_matrix(projected)[iu]
    a, b = a - a.mean(), b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    # centred similarities this small are rounding noise, not structure
    if denom < 1e-12:
        raise UndefinedScoreError("similarity upper triangle has zero variance")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))
