"""Toy-scale zero-shot sketch-based image retrieval with bi-level domain adaptation."""

from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    ClassSplit,
    DatasetBundle,
    GeneratorSpec,
    SemanticPrototypes,
    generate_synthetic_dataset,
    load_bundle,
    mine_triplets,
    save_bundle,
    split_seen_unseen,
)
from .estimator import SketchImageRetriever
from .graph import build_adjacency, semantic_project, topology_preservation_score
from .losses import LossConfig, symmetric_kl, gaussian_kl, total_loss
from .model import DimensionSpec, ModelParams, init_params
from .retrieval import MetricsReport, average_precision, evaluate, precision_at_k
from .theory import BoundReport, bound_report, estimate_divergence
from .training import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    TrainingDivergedError,
    finite_difference_audit,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
