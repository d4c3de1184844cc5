"""``sketret`` command line: generate, train, eval, ablate, theory, plot.

Output layout under ``--out``::

    config.txt                  resolved configuration, first line carries the hash
    seed_<s>/dataset.bdas       generate
    seed_<s>/prototypes.txt
    seed_<s>/checkpoint.bdas    train
    seed_<s>/history.csv
    seed_<s>/metrics_<mode>.json, hubness_<mode>.csv, rankings_<mode>.csv   eval
    seed_<s>/bound_report.json  theory
    theory_summary.json
    ablation.csv, ablation_summary.csv
    plots/seed_<s>/similarity_original.csv, similarity_projected.csv, loss_curves.csv

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig, load_config
from .data import DatasetBundle, generate_synthetic_dataset, load_bundle, save_bundle
from .experiments import COMPONENT_ROWS, LOSS_ROWS, run_ablation, summarize_ablation
from .graph import cosine_similarity_matrix, semantic_project
from .losses import TERMS
from .retrieval import metrics_from_rankings, retrieve, write_rankings_csv
from .tensorio import ContainerError, text_tensor
from .theory import bound_report
from .training import (
    TrainingDivergedError,
    checkpoint_config_hash,
    load_checkpoint,
    save_checkpoint,
    seen_graph,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("sketret")


class CommandError(RuntimeError):
    """A command could not complete (missing inputs, refused overwrite...)."""


# -- file helpers -----------------------------------------------------------------

def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / f"seed_{seed}"


def _write_text(path: Path, text: str) -> None:
    """Write only when the content changes, so reruns leave files untouched."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and path.read_text(encoding="utf-8") == text:
        return
    path.write_text(text, encoding="utf-8")


def _csv_text(header: Sequence[str], rows, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _write_config(cfg: ExperimentConfig) -> None:
    _write_text(Path(cfg.out_dir) / "config.txt", f"# config_hash={cfg.config_hash}\n{cfg.dumps()}")


def _bundle(cfg: ExperimentConfig, seed: int) -> DatasetBundle:
    """The generated dataset on disk if present, else the same data regenerated in memory."""
    directory = _seed_dir(cfg, seed)
    if (directory / "dataset.bdas").exists():
        return load_bundle(directory)
    spec, _ = cfg.run_seeds(seed)
    return generate_synthetic_dataset(spec)


def _checkpoint(cfg: ExperimentConfig, seed: int):
    path = _seed_dir(cfg, seed) / "checkpoint.bdas"
    if not path.exists():
        raise CommandError(f"no checkpoint for seed {seed} at {path}; run 'sketret train' first")
    stored = checkpoint_config_hash(path)
    if stored is not None and stored != cfg.config_hash:
        logger.warning("checkpoint %s was trained under config %s, current config is %s",
                       path, stored, cfg.config_hash)
    return load_checkpoint(path)


def _map_seeds(cfg: ExperimentConfig, job: Callable[[ExperimentConfig, int], object]) -> list:
    """Run ``job`` per seed, in parallel when ``jobs > 1``; results keep seed order."""
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(job, [cfg] * len(cfg.seeds), cfg.seeds))
    return [job(cfg, s) for s in cfg.seeds]


# -- per-seed jobs (module level so worker processes can pickle them) ------------------

def _generate_one(cfg: ExperimentConfig, seed: int) -> str:
    spec, _ = cfg.run_seeds(seed)
    bundle = generate_synthetic_dataset(spec)
    directory = _seed_dir(cfg, seed)
    directory.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, directory, extra={"meta.config_hash": text_tensor(cfg.config_hash)})
    split = bundle.require_split()
    _, img_labels = bundle.arrays("image")
    _, skt_labels = bundle.arrays("sketch")
    return (f"seed {seed}: {bundle.n_classes} classes "
            f"(seen {list(split.seen_classes)}, unseen {list(split.unseen_classes)}), "
            f"{len(img_labels)} images, {len(skt_labels)} sketches "
            f"[{np.bincount(img_labels).min()}-{np.bincount(img_labels).max()} images/class, "
            f"{np.bincount(skt_labels).min()}-{np.bincount(skt_labels).max()} sketches/class]")


def _train_one(cfg: ExperimentConfig, seed: int) -> str:
    bundle = _bundle(cfg, seed)
    _, train_cfg = cfg.run_seeds(seed)
    ckpt = train(bundle, train_cfg)
    directory = _seed_dir(cfg, seed)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, directory / "checkpoint.bdas", cfg.config_hash)
    columns = list(TERMS) + ["total"]
    rows = [[e + 1] + [_fmt(row[c]) if c in row else "" for c in columns]
            for e, row in enumerate(ckpt.loss_history)]
    _write_text(directory / "history.csv", _csv_text(["epoch"] + columns, rows, cfg.config_hash))
    final = ckpt.loss_history[-1]["total"] if ckpt.loss_history else float("nan")
    return f"seed {seed}: {ckpt.epoch} epochs, final loss {final:.6g}"


def _eval_one(cfg: ExperimentConfig, seed: int) -> str:
    ckpt = _checkpoint(cfg, seed)
    bundle = _bundle(cfg, seed)
    directory = _seed_dir(cfg, seed)
    lines = []
    for mode in cfg.modes:
        run = retrieve(ckpt.params, bundle, mode.upper())
        report = metrics_from_rankings(run, mode.upper(), cfg.hubness_k)
        _write_text(directory / f"metrics_{mode}.json",
                    report.to_json(config_hash=cfg.config_hash, seed=seed) + "\n")
        hub_rows = [[int(run.gallery_ids[i]), int(run.gallery_labels[i]), c]
                    for i, c in report.hubness.n_k.items()]
        _write_text(directory / f"hubness_{mode}.csv",
                    _csv_text(["gallery_id", "class_id", f"n_{report.hubness.k}"], hub_rows, cfg.config_hash))
        write_rankings_csv(run, directory / f"rankings_{mode}.csv", cfg.config_hash)
        lines.append(f"seed {seed} {mode}: map_all={report.map_all:.4f} map@200={report.map_at_200:.4f} "
                     f"p@100={report.p_at_100:.4f} skew={report.hubness.skewness:.3f}")
    return "\n".join(lines)


def _theory_one(cfg: ExperimentConfig, seed: int) -> dict:
    ckpt = _checkpoint(cfg, seed)
    report = bound_report(ckpt.params, _bundle(cfg, seed), seed)
    _write_text(_seed_dir(cfg, seed) / "bound_report.json",
                report.to_json(config_hash=cfg.config_hash, seed=seed) + "\n")
    return {"seed": seed, **report.to_dict()}


def _plot_one(cfg: ExperimentConfig, seed: int) -> str:
    ckpt = _checkpoint(cfg, seed)
    bundle = _bundle(cfg, seed)
    graph = seen_graph(bundle, ckpt.params.dims.gamma_mode)
    with torch.no_grad():
        projected = semantic_project(graph, ckpt.params).numpy()
    names = [bundle.prototypes.class_names[c] for c in bundle.require_split().seen_classes]
    directory = Path(cfg.out_dir) / "plots" / f"seed_{seed}"
    for tag, matrix in (("original", graph.prototypes), ("projected", projected)):
        sim = cosine_similarity_matrix(matrix)
        rows = [[name] + [_fmt(v) for v in row] for name, row in zip(names, sim)]
        _write_text(directory / f"similarity_{tag}.csv",
                    _csv_text(["class"] + names, rows, cfg.config_hash))
    columns = list(TERMS) + ["total"]
    rows = [[e + 1] + [_fmt(r[c]) if c in r else "" for c in columns]
            for e, r in enumerate(ckpt.loss_history)]
    _write_text(directory / "loss_curves.csv", _csv_text(["epoch"] + columns, rows, cfg.config_hash))
    return f"seed {seed}: wrote {directory}"


# -- commands ---------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> None:
    if not force:
        existing = [_seed_dir(cfg, s) / "dataset.bdas" for s in cfg.seeds
                    if (_seed_dir(cfg, s) / "dataset.bdas").exists()]
        if existing:
            raise CommandError(f"{existing[0]} exists; pass --force to overwrite")
    _write_config(cfg)
    for line in _map_seeds(cfg, _generate_one):
        print(line)


def cmd_train(cfg: ExperimentConfig) -> None:
    _write_config(cfg)
    for line in _map_seeds(cfg, _train_one):
        print(line)


def cmd_eval(cfg: ExperimentConfig) -> None:
    for line in _map_seeds(cfg, _eval_one):
        print(line)


def cmd_theory(cfg: ExperimentConfig) -> None:
    reports = _map_seeds(cfg, _theory_one)
    passed = sum(r["ordering_holds"] for r in reports)
    summary = {
        "config_hash": cfg.config_hash,
        "seeds": list(cfg.seeds),
        "pass_count": passed,
        "pass_fraction": passed / len(reports),
        "reports": reports,
    }
    _write_text(Path(cfg.out_dir) / "theory_summary.json", json.dumps(summary, indent=2) + "\n")
    for r in reports:
        print(f"seed {r['seed']}: d(a,p)={r['d_alpha_p']:.3f} d(a,n)={r['d_alpha_n']:.3f} "
              f"ordering_holds={r['ordering_holds']}")
    print(f"ordering holds in {passed}/{len(reports)} seeds")


def cmd_ablate(cfg: ExperimentConfig, components: bool = True) -> None:
    rows = LOSS_ROWS + (COMPONENT_ROWS if components else ())
    records = run_ablation(cfg, rows)
    keys = list(records[0])
    _write_text(Path(cfg.out_dir) / "ablation.csv",
                _csv_text(keys, [[_fmt(r[k]) for k in keys] for r in records], cfg.config_hash))
    summary = summarize_ablation(records)
    skeys = list(summary[0])
    _write_text(Path(cfg.out_dir) / "ablation_summary.csv",
                _csv_text(skeys, [[_fmt(r[k]) for k in skeys] for r in summary], cfg.config_hash))
    width = max(len(r["row"]) for r in summary)
    print(f"{'row':<{width}}  map_all (mean ± std over {len(cfg.seeds)} seeds)  hubness skew")
    for r in summary:
        print(f"{r['row']:<{width}}  {r['map_all_mean']:.4f} ± {r['map_all_std']:.4f}"
              f"                 {r['hubness_skewness_mean']:.3f}")


def cmd_plot(cfg: ExperimentConfig) -> None:
    for line in _map_seeds(cfg, _plot_one):
        print(line)


# -- argument parsing -------------------------------------------------------------

def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value configuration file")
    seeds = common.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", type=_seed_list, help="comma-separated seed list")
    common.add_argument("--out", help="output directory (default: $SKETRET_OUT or ./sketret_out)")
    common.add_argument("--mode", choices=("zs", "gzs", "both"), help="evaluation gallery")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--jobs", type=int, help="parallel worker processes across seeds")
    common.add_argument("--force", action="store_true", help="overwrite existing datasets")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sketret", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic datasets")
    sub.add_parser("train", parents=[common], help="train and save checkpoints and loss history")
    sub.add_parser("eval", parents=[common], help="retrieval metrics and hubness for saved checkpoints")
    ablate = sub.add_parser("ablate", parents=[common], help="loss and component ablation table")
    ablate.add_argument("--losses-only", action="store_true", help="skip the model-component rows")
    sub.add_parser("theory", parents=[common], help="domain-divergence ordering report")
    plot = sub.add_parser("plot", parents=[common], help="similarity-matrix and loss-curve CSVs")
    plot.add_argument("results_dir", nargs="?", help="results directory (defaults to --out)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    elif args.seeds is not None:
        cfg = replace(cfg, seeds=args.seeds)
    out = getattr(args, "results_dir", None) or args.out
    if out:
        cfg = replace(cfg, out_dir=out)
    if args.mode:
        cfg = replace(cfg, modes=("zs", "gzs") if args.mode == "both" else (args.mode,))
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        cfg = replace(cfg, jobs=args.jobs)
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("duplicate seeds")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    commands = {
        "generate": lambda: cmd_generate(cfg, args.force),
        "train": lambda: cmd_train(cfg),
        "eval": lambda: cmd_eval(cfg),
        "ablate": lambda: cmd_ablate(cfg, components=not args.losses_only),
        "theory": lambda: cmd_theory(cfg),
        "plot": lambda: cmd_plot(cfg),
    }
    try:
        commands[args.command]()
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CommandError, ContainerError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
