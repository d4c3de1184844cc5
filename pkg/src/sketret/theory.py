"""Empirical domain-divergence quantities behind the alpha/p/n ordering claim.

The H-divergence is replaced by the proxy A-distance ``2 (1 - 2 err)`` of a
held-out linear domain classifier. Nothing here asserts the ordering; the
report only records whether it holds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import DatasetBundle
from .model import ModelParams
from .retrieval import embed_set

MIN_SAMPLES = 20

__all__ = ["BoundReport", "estimate_divergence", "bound_report", "bound_report_from_embeddings"]


@dataclass(frozen=True)
class BoundReport:
    d_alpha_p: float
    d_alpha_n: float
    d_p_unit: float
    d_n_unit: float
    ordering_holds: bool
    unit_gap: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        doc = self.to_dict()
        doc.update(extra)
        return json.dumps(doc, indent=2)


def _split(x: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(len(x))
    n_train = min(len(x) - 1, max(1, int(round(train_fraction * len(x)))))
    return x[order[:n_train]], x[order[n_train:]]


def estimate_divergence(samples_a, samples_b, seed: int = 0, train_fraction: float = 0.7) -> float:
    """Proxy A-distance between two sample clouds, clamped to ``[0, 2]``.

    A standardized logistic-regression probe is fit on ``train_fraction``
    of each side (pooled, domain-labelled); ``err`` is its error on the rest.
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if min(len(a), len(b)) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples per side, got {len(a)} and {len(b)}")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample dimensions differ")
    # each side is split with the same seeded permutation rule, so swapping the
    # arguments only flips the labels of an identical train/test partition
    a_tr, a_te = _split(a, train_fraction, seed)
    b_tr, b_te = _split(b, train_fraction, seed)
    x_tr, x_te = np.concatenate([a_tr, b_tr]), np.concatenate([a_te, b_te])
    y_tr = np.concatenate([np.zeros(len(a_tr)), np.ones(len(b_tr))])
    y_te = np.concatenate([np.zeros(len(a_te)), np.ones(len(b_te))])
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    probe.fit(x_tr, y_tr)
    err = 1.0 - probe.score(x_te, y_te)
    return float(min(2.0, max(0.0, 2.0 * (1.0 - 2.0 * err))))


def bound_report_from_embeddings(sketch_emb: np.ndarray, sketch_labels: np.ndarray,
                                 image_emb: np.ndarray, image_labels: np.ndarray,
                                 classes, seed: int = 0) -> BoundReport:
    """Class-averaged divergences between anchor, positive, negative and unit-Gaussian clouds.

    For every class ``c``: anchors are class-``c`` sketches, positives the
    class-``c`` images, negatives an equally sized draw of other-class
    images. Each divergence is averaged over classes.
    """
    rng = np.random.default_rng(seed)
    d_ap, d_an, d_pu, d_nu = [], [], [], []
    classes = list(classes)
    for c in classes:
        anchors = sketch_emb[sketch_labels == c]
        positives = image_emb[image_labels == c]
        others = image_emb[np.isin(image_labels, classes) & (image_labels != c)]
        negatives = others[rng.choice(len(others), size=len(positives), replace=False)]
        unit_p = rng.standard_normal(positives.shape)
        unit_n = rng.standard_normal(negatives.shape)
        probe_seed = int(rng.integers(2**31))
        d_ap.append(estimate_divergence(anchors, positives, probe_seed))
        d_an.append(estimate_divergence(anchors, negatives, probe_seed))
        d_pu.append(estimate_divergence(positives, unit_p, probe_seed))
        d_nu.append(estimate_divergence(negatives, unit_n, probe_seed))
    d_alpha_p, d_alpha_n = float(np.mean(d_ap)), float(np.mean(d_an))
    d_p_unit, d_n_unit = float(np.mean(d_pu)), float(np.mean(d_nu))
    return BoundReport(d_alpha_p, d_alpha_n, d_p_unit, d_n_unit,
                       bool(d_alpha_p <= d_alpha_n), d_p_unit - d_n_unit)


def bound_report(params: ModelParams, bundle: DatasetBundle, seed: int = 0) -> BoundReport:
    """Divergence report on the seen classes' latent means."""
    split = bundle.require_split()
    s_maps, s_labels = bundle.arrays("sketch")
    i_maps, i_labels = bundle.arrays("image")
    return bound_report_from_embeddings(
        embed_set(params, s_maps, "sketch"), s_labels,
        embed_set(params, i_maps, "image"), i_labels,
        split.seen_classes, seed,
    )
