"""scikit-learn style wrapper around training and retrieval."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import DatasetBundle
from .losses import DEFAULT_TERMS, TERMS, LossConfig
from .retrieval import MetricsReport, embed_set, evaluate
from .training import Checkpoint, ModelConfig, TrainConfig, train

__all__ = ["SketchImageRetriever", "check_bundle", "check_feature_maps"]


def check_bundle(bundle) -> DatasetBundle:
    if not isinstance(bundle, DatasetBundle):
        raise TypeError(f"expected a DatasetBundle, got {type(bundle).__name__}")
    bundle.require_split()
    return bundle


def check_feature_maps(x, map_shape: tuple[int, int, int]) -> np.ndarray:
    """Coerce ``x`` to a finite float64 stack of ``(n, G, G, C)`` maps.

    Flat rows of length ``G*G*C`` are reshaped; a single map gains a leading axis.
    """
    arr = np.asarray(x, dtype=np.float64)
    size = int(np.prod(map_shape))
    if arr.shape == map_shape:
        arr = arr[None]
    elif arr.ndim == 2 and arr.shape[1] == size:
        arr = arr.reshape((-1,) + map_shape)
    elif arr.ndim == 1 and arr.shape[0] == size:
        arr = arr.reshape((1,) + map_shape)
    if arr.shape[1:] != map_shape:
        raise ValueError(f"expected maps of shape {map_shape} or flat rows of {size}, got {np.shape(x)}")
    if arr.shape[0] == 0:
        raise ValueError("no samples")
    if not np.isfinite(arr).all():
        raise ValueError("input contains NaN or infinity")
    return arr


class SketchImageRetriever(BaseEstimator, TransformerMixin):
    """Fit on a :class:`DatasetBundle`; transform feature maps to latent means.

    ``score`` is the zero-shot ``map_all`` on the bundle's unseen classes.
    """

    def __init__(self, epochs=40, triplets_per_epoch=200, batch_size=32, learning_rate=1e-3,
                 momentum=0.9, beta=1e-4, lam=0.1, mu=0.1, terms=None, latent_dim=32,
                 hidden_dim=64, codec_dim=16, attention=True, gcn=True,
                 gamma_mode="dissimilarity", global_adversarial=False, random_state=0):
        self.epochs = epochs
        self.triplets_per_epoch = triplets_per_epoch
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.beta = beta
        self.lam = lam
        self.mu = mu
        self.terms = terms
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.codec_dim = codec_dim
        self.attention = attention
        self.gcn = gcn
        self.gamma_mode = gamma_mode
        self.global_adversarial = global_adversarial
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        terms = DEFAULT_TERMS if self.terms is None else frozenset(self.terms)
        unknown = terms - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        return TrainConfig(
            epochs=self.epochs, triplets_per_epoch=self.triplets_per_epoch,
            batch_size=self.batch_size, learning_rate=self.learning_rate, momentum=self.momentum,
            loss=LossConfig(beta=self.beta, lam=self.lam, mu=self.mu,
                            enable_global_adversarial=self.global_adversarial),
            terms=terms,
            model=ModelConfig(latent_dim=self.latent_dim, hidden_dim=self.hidden_dim,
                              codec_dim=self.codec_dim, attention=self.attention, gcn=self.gcn,
                              gamma_mode=self.gamma_mode),
            seed=int(self.random_state),
        )

    def fit(self, X, y=None):
        bundle = check_bundle(X)
        self.checkpoint_: Checkpoint = train(bundle, self.train_config())
        self.params_ = self.checkpoint_.params
        self.history_ = self.checkpoint_.loss_history
        self.map_shape_ = bundle.map_shape
        self.n_features_in_ = int(np.prod(bundle.map_shape))
        return self

    def transform(self, X, modality="image"):
        check_is_fitted(self, "params_")
        if modality not in ("image", "sketch"):
            raise ValueError(f"modality must be 'image' or 'sketch', got {modality!r}")
        return embed_set(self.params_, check_feature_maps(X, self.map_shape_), modality)

    def evaluate(self, bundle, mode="ZS") -> MetricsReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_bundle(bundle), mode)

    def score(self, X, y=None) -> float:
        return self.evaluate(X, "ZS").map_all
