"""Embedding, ranking, retrieval metrics and hubness statistics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from .data import DatasetBundle, Modality
from .model import ModelParams, encode

Mode = Literal["ZS", "GZS"]

__all__ = [
    "UndefinedMetricError",
    "HubnessStats",
    "MetricsReport",
    "RetrievalRun",
    "embed_set",
    "rank",
    "rank_all",
    "precision_at_k",
    "average_precision",
    "hubness_stats",
    "retrieve",
    "evaluate",
    "write_rankings_csv",
]


class UndefinedMetricError(ValueError):
    pass


@dataclass
class HubnessStats:
    k: int
    n_k: dict[int, int]
    skewness: float
    top_hubs: list[tuple[int, int]]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_k": {str(i): c for i, c in self.n_k.items()},
            "skewness": self.skewness,
            "top_hubs": [list(h) for h in self.top_hubs],
        }


@dataclass
class MetricsReport:
    map_all: float
    map_at_200: float
    p_at_100: float
    p_at_200: float
    per_class_ap: dict[int, float]
    hubness: HubnessStats
    mode: Mode
    skipped_queries: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "map_all": self.map_all,
            "map_at_200": self.map_at_200,
            "p_at_100": self.p_at_100,
            "p_at_200": self.p_at_200,
            "per_class_ap": {str(c): v for c, v in self.per_class_ap.items()},
            "hubness": self.hubness.to_dict(),
            "mode": self.mode,
        }

    def to_json(self, **extra) -> str:
        doc = self.to_dict()
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=False)


@dataclass
class RetrievalRun:
    """Full rankings of one evaluation, kept for CSV dumps."""

    query_ids: np.ndarray
    query_labels: np.ndarray
    gallery_ids: np.ndarray
    gallery_labels: np.ndarray
    rankings: np.ndarray


def embed_set(params: ModelParams, maps, modality: Modality, noise_seed: int = 0) -> np.ndarray:
    """Latent means for a stack of feature maps, one row per sample.

    ``noise_seed`` only feeds the (unused) reparameterized draw; the mean
    makes embeddings deterministic.
    """
    with torch.no_grad():
        _, latent = encode(params, maps, modality, noise_seed)
    return latent.mean.numpy().copy()


def _sq_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - gallery[None, :, :]
    return np.einsum("qgd,qgd->qg", diff, diff)


def rank(query_row, gallery_matrix) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance, ties to the lower index."""
    gallery = np.atleast_2d(np.asarray(gallery_matrix, dtype=np.float64))
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    query = np.asarray(query_row, dtype=np.float64).reshape(1, -1)
    return np.argsort(_sq_distances(query, gallery)[0], kind="stable")


def rank_all(queries, gallery) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if gallery.shape[0] == 0:
        raise ValueError("empty gallery")
    return np.argsort(_sq_distances(queries, gallery), axis=1, kind="stable")


def precision_at_k(ranked_relevance: Sequence[int], k: int) -> float:
    """Relevant items among the first ``k`` divided by ``k``.

    When the list is shorter than ``k`` the missing tail counts as irrelevant.
    """
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    rel = np.asarray(ranked_relevance, dtype=np.int64)
    return int(rel[:k].sum()) / k


def average_precision(ranked_relevance: Sequence[int], cutoff: int | None = None) -> float:
    """AP over the first ``cutoff`` ranks (all ranks when ``None``).

    Precision at each relevant rank within the cutoff, summed and divided
    by ``min(total relevant, cutoff)``.
    """
    rel = np.asarray(ranked_relevance, dtype=np.int64)
    total = int(rel.sum())
    if total == 0:
        raise UndefinedMetricError("no relevant item in the ranked list")
    if cutoff is None:
        cutoff = len(rel)
    if cutoff <= 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    head = rel[:cutoff]
    positions = np.flatnonzero(head) + 1
    hits = np.arange(1, len(positions) + 1)
    return float(np.sum(hits / positions) / min(total, cutoff))


def hubness_stats(rankings: np.ndarray, k: int, gallery_size: int | None = None,
                  n_top: int = 8) -> HubnessStats:
    """k-occurrence counts of gallery items over all query rankings."""
    rankings = np.atleast_2d(np.asarray(rankings))
    if gallery_size is None:
        gallery_size = rankings.shape[1]
    if not 1 <= k <= gallery_size or k > rankings.shape[1]:
        raise ValueError(f"k={k} out of range for gallery of size {gallery_size}")
    counts = np.bincount(rankings[:, :k].reshape(-1), minlength=gallery_size).astype(np.int64)
    centred = counts - counts.mean()
    m2 = np.mean(centred ** 2)
    skew = 0.0 if m2 == 0 else float(np.mean(centred ** 3) / m2 ** 1.5)
    order = np.argsort(-counts, kind="stable")[:n_top]
    return HubnessStats(
        k=k,
        n_k={int(i): int(c) for i, c in enumerate(counts)},
        skewness=skew,
        top_hubs=[(int(i), int(counts[i])) for i in order],
    )


def _gallery_classes(bundle: DatasetBundle, mode: Mode) -> tuple[int, ...]:
    split = bundle.require_split()
    if mode == "ZS":
        return split.unseen_classes
    if mode == "GZS":
        return split.all_classes
    raise ValueError(f"unknown mode {mode!r}")


def retrieve(params: ModelParams, bundle: DatasetBundle, mode: Mode) -> RetrievalRun:
    split = bundle.require_split()
    q_ids = bundle.indices("sketch", split.unseen_classes)
    g_ids = bundle.indices("image", _gallery_classes(bundle, mode))
    if len(q_ids) == 0 or len(g_ids) == 0:
        raise ValueError("empty query or gallery set")
    s_maps, s_labels = bundle.arrays("sketch")
    i_maps, i_labels = bundle.arrays("image")
    queries = embed_set(params, s_maps[q_ids], "sketch")
    gallery = embed_set(params, i_maps[g_ids], "image")
    return RetrievalRun(q_ids, s_labels[q_ids], g_ids, i_labels[g_ids], rank_all(queries, gallery))


def metrics_from_rankings(run: RetrievalRun, mode: Mode, k_hub: int = 10) -> MetricsReport:
    """Aggregate metrics for already-ranked queries.

    ``map_all``/``map_at_200`` are means of the per-class means, so the
    per-class table averages exactly to the headline value.
    """
    ap_all: dict[int, list[float]] = {}
    ap_200: dict[int, list[float]] = {}
    p100, p200, skipped = [], [], []
    for q, label, order in zip(run.query_ids, run.query_labels, run.rankings):
        rel = (run.gallery_labels[order] == label).astype(np.int64)
        try:
            a_all, a_200 = average_precision(rel), average_precision(rel, 200)
        except UndefinedMetricError:
            skipped.append(int(q))
            continue
        ap_all.setdefault(int(label), []).append(a_all)
        ap_200.setdefault(int(label), []).append(a_200)
        p100.append(precision_at_k(rel, 100))
        p200.append(precision_at_k(rel, 200))
    if not ap_all:
        raise UndefinedMetricError("no query has a relevant gallery item")
    per_class = {c: float(np.mean(v)) for c, v in sorted(ap_all.items())}
    per_class_200 = [float(np.mean(v)) for _, v in sorted(ap_200.items())]
    k = min(k_hub, len(run.gallery_ids))
    return MetricsReport(
        map_all=float(np.mean(list(per_class.values()))),
        map_at_200=float(np.mean(per_class_200)),
        p_at_100=float(np.mean(p100)),
        p_at_200=float(np.mean(p200)),
        per_class_ap=per_class,
        hubness=hubness_stats(run.rankings, k),
        mode=mode,
        skipped_queries=skipped,
    )


def evaluate(params: ModelParams, bundle: DatasetBundle, mode: Mode = "ZS", k_hub: int = 10) -> MetricsReport:
    """Unseen-class sketch queries against the ZS (unseen images) or GZS (all images) gallery."""
    return metrics_from_rankings(retrieve(params, bundle, mode), mode, k_hub)


def write_rankings_csv(run: RetrievalRun, path: str | Path, config_hash: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query_id", "rank", "gallery_id", "class_match"])
        for q, label, order in zip(run.query_ids, run.query_labels, run.rankings):
            for r, g in enumerate(order, start=1):
                writer.writerow([int(q), r, int(run.gallery_ids[g]),
                                 int(run.gallery_labels[g] == label)])
