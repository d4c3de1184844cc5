"""Multi-seed runs and the loss/component ablation table."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import DatasetBundle, generate_synthetic_dataset
from .graph import semantic_project, topology_preservation_score
from .losses import DEFAULT_TERMS
from .model import ModelParams
from .retrieval import MetricsReport, evaluate
from .training import Checkpoint, TrainConfig, seen_graph, train

__all__ = [
    "AblationRow",
    "LOSS_ROWS",
    "COMPONENT_ROWS",
    "RunResult",
    "bundle_for_seed",
    "run_seed",
    "run_ablation",
    "topology_score",
    "summarize_ablation",
]


@dataclass(frozen=True)
class AblationRow:
    label: str
    terms: frozenset
    attention: bool = True
    gcn: bool = True

    def apply(self, config: TrainConfig) -> TrainConfig:
        return replace(config, terms=self.terms,
                       model=replace(config.model, attention=self.attention, gcn=self.gcn))


def _row(label: str, *terms: str, **model) -> AblationRow:
    return AblationRow(label, frozenset(terms), **model)


_BASE = ("semantic", "triplet")

LOSS_ROWS: tuple[AblationRow, ...] = (
    _row("sem+tri", *_BASE),
    _row("sem+tri+tskl", *_BASE, "tskl"),
    _row("sem+tri+tskl+class", *_BASE, "tskl", "class"),
    _row("sem+tri+tskl+class+local_adv", *_BASE, "tskl", "class", "local_adv"),
    _row("sem+tri+tskl+class+recon", *_BASE, "tskl", "class", "recon"),
    _row("sem+tri+local_adv", *_BASE, "local_adv"),
    _row("sem+tri+recon", *_BASE, "recon"),
    _row("sem+tri+local_adv+recon", *_BASE, "local_adv", "recon"),
    AblationRow("full", DEFAULT_TERMS),
)

COMPONENT_ROWS: tuple[AblationRow, ...] = (
    AblationRow("full w/o gcn", DEFAULT_TERMS, gcn=False),
    AblationRow("full w/o attention", DEFAULT_TERMS, attention=False),
    AblationRow("full w/o gcn, attention", DEFAULT_TERMS, attention=False, gcn=False),
)


@dataclass
class RunResult:
    seed: int
    label: str
    checkpoint: Checkpoint
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    topology: float = float("nan")


def bundle_for_seed(experiment, seed: int) -> DatasetBundle:
    spec, _ = experiment.run_seeds(seed)
    return generate_synthetic_dataset(spec)


def topology_score(params: ModelParams, bundle: DatasetBundle) -> float:
    """Topology preservation of the seen-class semantic projection."""
    graph = seen_graph(bundle, params.dims.gamma_mode)
    with torch.no_grad():
        projected = semantic_project(graph, params)
    return topology_preservation_score(graph.prototypes, projected)


def run_seed(experiment, seed: int, row: AblationRow | None = None,
             modes: Sequence[str] | None = None) -> RunResult:
    """Generate, train and evaluate one seed, optionally under an ablation row."""
    bundle = bundle_for_seed(experiment, seed)
    _, config = experiment.run_seeds(seed)
    if row is not None:
        config = row.apply(config)
    ckpt = train(bundle, config)
    reports = {m: evaluate(ckpt.params, bundle, m.upper(), experiment.hubness_k)
               for m in (modes or experiment.modes)}
    return RunResult(seed, row.label if row else "config", ckpt, reports,
                     topology_score(ckpt.params, bundle))


def _ablation_job(args) -> dict:
    experiment, row, seed = args
    result = run_seed(experiment, seed, row, modes=("zs",))
    zs = result.reports["zs"]
    return {
        "row": row.label,
        "seed": seed,
        "map_all": zs.map_all,
        "map_at_200": zs.map_at_200,
        "p_at_100": zs.p_at_100,
        "p_at_200": zs.p_at_200,
        "hubness_skewness": zs.hubness.skewness,
        "topology": result.topology,
        "final_loss": result.checkpoint.loss_history[-1]["total"] if result.checkpoint.loss_history else float("nan"),
    }


def run_ablation(experiment, rows: Iterable[AblationRow] = LOSS_ROWS,
                 seeds: Sequence[int] | None = None, jobs: int | None = None) -> list[dict]:
    """One record per (row, seed), ordered by row then seed regardless of ``jobs``."""
    seeds = tuple(experiment.seeds if seeds is None else seeds)
    tasks = [(experiment, row, s) for row in rows for s in seeds]
    jobs = experiment.jobs if jobs is None else jobs
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_ablation_job, tasks))
    return [_ablation_job(t) for t in tasks]


def summarize_ablation(records: Sequence[dict]) -> list[dict]:
    """Mean and standard deviation of each metric per row, in first-seen row order."""
    labels = list(dict.fromkeys(r["row"] for r in records))
    out = []
    for label in labels:
        rows = [r for r in records if r["row"] == label]
        summary = {"row": label, "n_seeds": len(rows)}
        for key in ("map_all", "map_at_200", "p_at_100", "p_at_200", "hubness_skewness", "topology"):
            values = np.array([r[key] for r in rows], dtype=np.float64)
            summary[f"{key}_mean"] = float(values.mean())
            summary[f"{key}_std"] = float(values.std())
        out.append(summary)
    return out
