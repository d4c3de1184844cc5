"""Flat ``key = value`` experiment configuration.

Keys are dotted paths into the nested dataclasses (``train.epochs``,
``loss.beta``, ``generator.n_classes``...). Unknown keys and badly typed
values raise :class:`ConfigError`. ``--set key=value`` overrides use the
same parser.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable

from .data import GeneratorSpec
from .losses import TERMS, LossConfig
from .training import ModelConfig, TrainConfig

DEFAULT_OUT = "sketret_out"
MODES = ("zs", "gzs")

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config_text", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = ("zs",)
    hubness_k: int = 10
    out_dir: str = DEFAULT_OUT
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1

    def run_seeds(self, seed: int) -> tuple[GeneratorSpec, TrainConfig]:
        """Generator and trainer configs for one run: both base seeds are offset by ``seed``."""
        return (replace(self.generator, seed=self.generator.seed + seed),
                replace(self.train, seed=self.train.seed + seed))

    def flat(self) -> dict[str, str]:
        return {key: _format(getter(self)) for key, (getter, _, _) in _REGISTRY.items()}

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.flat().items()))

    @property
    def config_hash(self) -> str:
        # keys that select what to run or where to write, not what a seed produces
        skip = ("output.dir", "jobs", "seeds", "eval.modes")
        flat = {k: v for k, v in self.flat().items() if k not in skip}
        text = "".join(f"{k}={v}\n" for k, v in sorted(flat.items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (frozenset, set)):
        return ",".join(t for t in TERMS if t in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_terms(text: str) -> frozenset:
    items = {t.strip() for t in text.split(",") if t.strip()}
    unknown = items - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}; known: {', '.join(TERMS)}")
    return frozenset(items)


def _parse_modes(text: str) -> tuple[str, ...]:
    text = text.strip().lower()
    if text == "both":
        return MODES
    items = tuple(m.strip() for m in text.split(",") if m.strip())
    if not items or any(m not in MODES for m in items):
        raise ValueError(f"modes must be drawn from {MODES} or 'both', got {text!r}")
    return tuple(m for m in MODES if m in items)


def _parse_ints(text: str) -> tuple[int, ...]:
    items = tuple(int(t) for t in text.split(",") if t.strip())
    if not items:
        raise ValueError("empty integer list")
    return items


_PARSERS: dict[type | str, Callable[[str], Any]] = {
    "int": int, "float": float, "bool": _parse_bool, "str": str,
}

# key -> (getter, setter, parser)
_REGISTRY: dict[str, tuple[Callable, Callable, Callable[[str], Any]]] = {}


def _register_dataclass(prefix: str, cls, get_obj: Callable, set_obj: Callable, skip: Iterable[str] = ()):
    for f in fields(cls):
        if f.name in skip:
            continue
        parser = _PARSERS.get(f.type if isinstance(f.type, str) else f.type.__name__)
        if parser is None:
            continue

        def getter(cfg, name=f.name):
            return getattr(get_obj(cfg), name)

        def setter(cfg, value, name=f.name):
            return set_obj(cfg, replace(get_obj(cfg), **{name: value}))

        _REGISTRY[f"{prefix}.{f.name}"] = (getter, setter, parser)


_register_dataclass("generator", GeneratorSpec, lambda c: c.generator,
                    lambda c, v: replace(c, generator=v))
_register_dataclass("train", TrainConfig, lambda c: c.train,
                    lambda c, v: replace(c, train=v), skip=("terms",))
_register_dataclass("loss", LossConfig, lambda c: c.train.loss,
                    lambda c, v: replace(c, train=replace(c.train, loss=v)))
_register_dataclass("model", ModelConfig, lambda c: c.train.model,
                    lambda c, v: replace(c, train=replace(c.train, model=v)))
_REGISTRY["ablation.terms"] = (
    lambda c: c.train.terms,
    lambda c, v: replace(c, train=replace(c.train, terms=v)),
    _parse_terms,
)
_REGISTRY["eval.modes"] = (lambda c: c.modes, lambda c, v: replace(c, modes=v), _parse_modes)
_REGISTRY["eval.hubness_k"] = (lambda c: c.hubness_k, lambda c, v: replace(c, hubness_k=v), int)
_REGISTRY["output.dir"] = (lambda c: c.out_dir, lambda c, v: replace(c, out_dir=v), str)
_REGISTRY["seeds"] = (lambda c: c.seeds, lambda c, v: replace(c, seeds=v), _parse_ints)
_REGISTRY["jobs"] = (lambda c: c.jobs, lambda c, v: replace(c, jobs=v), int)


def known_keys() -> list[str]:
    return sorted(_REGISTRY)


def _set(cfg: ExperimentConfig, key: str, raw: str, where: str) -> ExperimentConfig:
    if key not in _REGISTRY:
        raise ConfigError(f"{where}: unknown key {key!r}")
    _, setter, parser = _REGISTRY[key]
    try:
        return setter(cfg, parser(raw.strip()))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    try:
        cfg.generator.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.hubness_k < 1 or cfg.jobs < 1:
        raise ConfigError("eval.hubness_k and jobs must be positive")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("duplicate seeds")
    return cfg


def parse_config_text(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        cfg = _set(cfg, key.strip(), raw, f"{source}:{lineno}")
    return cfg


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg = _set(cfg, key.strip(), raw, "--set")
    return cfg


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Defaults, then ``SKETRET_OUT``, then the file, then ``--set`` overrides."""
    cfg = ExperimentConfig()
    env_out = os.environ.get("SKETRET_OUT")
    if env_out:
        cfg = replace(cfg, out_dir=env_out)
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_text(text, cfg, str(path))
    cfg = apply_overrides(cfg, overrides)
    try:
        # re-run dataclass checks on the nested configs
        TrainConfig(**{f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return _validate(cfg)
