"""Synthetic two-modality data, seen/unseen splits and triplet mining.

Every class owns a semantic prototype; a fixed random map turns the
prototype into a mid-level "frozen backbone" feature map template, so
visual appearance of unseen classes is predictable from their semantics.
Images add dense background clutter plus spatially smooth noise, sketches
are a sparse ternary rendering of a noisier copy of the template.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .tensorio import read_tensors, write_tensors

Modality = Literal["image", "sketch"]
MODALITIES: tuple[Modality, ...] = ("image", "sketch")

__all__ = [
    "InvalidSpecError",
    "EmbeddingFormatError",
    "GeneratorSpec",
    "SampleRecord",
    "ClassSplit",
    "SemanticPrototypes",
    "DatasetBundle",
    "Triplet",
    "generate_synthetic_dataset",
    "split_seen_unseen",
    "mine_triplets",
    "triplet_arrays",
    "load_semantic_embeddings",
    "save_semantic_embeddings",
    "concat_prototypes",
    "save_bundle",
    "load_bundle",
]


class InvalidSpecError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class GeneratorSpec:
    n_classes: int = 8
    images_per_class: int = 20
    sketches_per_class: int = 20
    grid: int = 7
    channels: int = 8
    sem_dim: int = 16
    n_superclusters: int = 3
    # spread of class prototypes around their super-cluster centre
    sem_spread: float = 0.6
    image_noise: float = 0.4
    sketch_noise: float = 0.8
    clutter: float = 1.0
    # |x| below this is dropped when rendering a sketch
    sketch_threshold: float = 0.6
    unseen_fraction: float = 0.25
    seed: int = 0

    @property
    def raw_dim(self) -> int:
        return self.grid * self.grid * self.channels

    def validate(self) -> None:
        if self.n_classes < 4:
            raise InvalidSpecError(f"need at least 4 classes, got {self.n_classes}")
        if min(self.images_per_class, self.sketches_per_class) < 2:
            raise InvalidSpecError("need at least 2 samples per class per modality")
        if self.grid < 1 or self.channels < 1 or self.sem_dim < 1:
            raise InvalidSpecError("grid, channels and sem_dim must be positive")
        if not 1 <= self.n_superclusters <= self.n_classes:
            raise InvalidSpecError("n_superclusters must lie in [1, n_classes]")
        for name in ("sem_spread", "image_noise", "sketch_noise", "clutter", "sketch_threshold"):
            if getattr(self, name) < 0:
                raise InvalidSpecError(f"{name} must be non-negative")
        n_unseen = _unseen_count(self.n_classes, self.unseen_fraction)
        if not 0 < self.unseen_fraction < 1 or n_unseen < 1 or self.n_classes - n_unseen < 2:
            raise InvalidSpecError(
                f"unseen_fraction={self.unseen_fraction} leaves no valid seen/unseen split"
            )


@dataclass(frozen=True, eq=False)
class SampleRecord:
    modality: Modality
    class_id: int
    feature_map: np.ndarray

    @property
    def flat_features(self) -> np.ndarray:
        return self.feature_map.reshape(-1)


@dataclass(frozen=True)
class ClassSplit:
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]

    def __post_init__(self):
        seen, unseen = set(self.seen_classes), set(self.unseen_classes)
        if not seen or not unseen:
            raise InvalidSpecError("seen and unseen class sets must both be non-empty")
        if seen & unseen:
            raise InvalidSpecError(f"classes {sorted(seen & unseen)} are both seen and unseen")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen_classes + self.unseen_classes))

    def seen_index(self, class_id: int) -> int:
        """Position of ``class_id`` among the seen classes (classifier label)."""
        return self.seen_classes.index(class_id)


@dataclass(frozen=True, eq=False)
class SemanticPrototypes:
    class_names: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.class_names):
            raise ValueError(
                f"need one vector per class: {len(self.class_names)} names, "
                f"vectors of shape {vectors.shape}"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names")
        if np.any(~np.isfinite(vectors)):
            raise ValueError("prototype vectors must be finite")
        zero = np.flatnonzero(~np.any(vectors != 0, axis=1))
        if zero.size:
            raise ValueError(f"all-zero prototype for class {self.class_names[zero[0]]!r}")
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    images: list[SampleRecord]
    sketches: list[SampleRecord]
    prototypes: SemanticPrototypes
    split: ClassSplit | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.prototypes)
        for modality, records in (("image", self.images), ("sketch", self.sketches)):
            present = {r.class_id for r in records}
            if any(r.modality != modality for r in records):
                raise ValueError(f"{modality} list holds records of another modality")
            if present != set(range(n)):
                raise ValueError(f"every class must appear among the {modality}s")

    @property
    def n_classes(self) -> int:
        return len(self.prototypes)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return self.images[0].feature_map.shape

    def records(self, modality: Modality) -> list[SampleRecord]:
        return self.images if modality == "image" else self.sketches

    def arrays(self, modality: Modality) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(maps, labels)`` for one modality, cached."""
        if modality not in self._cache:
            records = self.records(modality)
            maps = np.stack([r.feature_map for r in records])
            labels = np.array([r.class_id for r in records], dtype=np.int64)
            maps.setflags(write=False)
            labels.setflags(write=False)
            self._cache[modality] = (maps, labels)
        return self._cache[modality]

    def indices(self, modality: Modality, classes: Iterable[int]) -> np.ndarray:
        _, labels = self.arrays(modality)
        return np.flatnonzero(np.isin(labels, list(classes)))

    def with_split(self, split: ClassSplit) -> "DatasetBundle":
        return DatasetBundle(self.images, self.sketches, self.prototypes, split)

    def require_split(self) -> ClassSplit:
        if self.split is None:
            raise ValueError("bundle has no seen/unseen split; call split_seen_unseen first")
        return self.split


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    positive_prototype: int


def _unseen_count(n_classes: int, fraction: float) -> int:
    return int(math.floor(n_classes * fraction + 0.5))


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Gaussian noise box-filtered over the two spatial axes, rescaled to unit variance."""
    raw = rng.standard_normal(shape)
    smooth = uniform_filter(raw, size=(3, 3, 1), mode="wrap")
    return smooth * 3.0


def generate_synthetic_dataset(spec: GeneratorSpec | None = None) -> DatasetBundle:
    spec = spec or GeneratorSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, g, c = spec.n_classes, spec.grid, spec.channels

    centres = rng.standard_normal((spec.n_superclusters, spec.sem_dim))
    membership = np.arange(k) % spec.n_superclusters
    sem = centres[membership] + spec.sem_spread * rng.standard_normal((k, spec.sem_dim))
    prototypes = SemanticPrototypes(tuple(f"class_{i:02d}" for i in range(k)), sem)

    # semantics -> visual template, shared by both modalities
    mixing = rng.standard_normal((spec.sem_dim, g * g * c)) / math.sqrt(spec.sem_dim)
    templates = np.tanh(sem @ mixing).reshape(k, g, g, c) * 1.5
    # dense clutter lives in a few fixed spatial patterns, random per image
    clutter_basis = rng.standard_normal((4, g, g, c))
    image_offset = 0.5 * rng.standard_normal(c)

    images, sketches = [], []
    for cls in range(k):
        for _ in range(spec.images_per_class):
            coeffs = rng.standard_normal(4)
            clutter = np.tensordot(coeffs, clutter_basis, axes=1)
            noise = _smooth_noise(rng, (g, g, c))
            fmap = templates[cls] + spec.clutter * (clutter + image_offset) + spec.image_noise * noise
            images.append(SampleRecord("image", cls, fmap))
        for _ in range(spec.sketches_per_class):
            noisy = templates[cls] + spec.sketch_noise * rng.standard_normal((g, g, c))
            fmap = np.sign(noisy) * (np.abs(noisy) > spec.sketch_threshold)
            sketches.append(SampleRecord("sketch", cls, fmap.astype(np.float64)))

    bundle = DatasetBundle(images, sketches, prototypes)
    return split_seen_unseen(bundle, spec.unseen_fraction, spec.seed)


def split_seen_unseen(bundle: DatasetBundle, unseen_fraction: float, seed: int) -> DatasetBundle:
    if not 0 < unseen_fraction < 1:
        raise ValueError(f"unseen_fraction must lie in (0, 1), got {unseen_fraction}")
    k = bundle.n_classes
    n_unseen = _unseen_count(k, unseen_fraction)
    if n_unseen < 1 or k - n_unseen < 2:
        raise ValueError(
            f"unseen_fraction={unseen_fraction} gives {n_unseen} unseen of {k} classes; "
            "need >= 1 unseen and >= 2 seen"
        )
    order = np.random.default_rng(seed).permutation(k)
    unseen = tuple(sorted(int(i) for i in order[:n_unseen]))
    seen = tuple(sorted(int(i) for i in order[n_unseen:]))
    return bundle.with_split(ClassSplit(seen, unseen))


def mine_triplets(bundle: DatasetBundle, count: int, seed: int) -> list[Triplet]:
    """Uniformly sample ``count`` (sketch anchor, image positive, image negative) triplets.

    Anchors come uniformly from seen-class sketches; the positive is uniform
    over same-class images, the negative uniform over images of the other
    seen classes.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    split = bundle.require_split()
    if len(split.seen_classes) < 2:
        raise ValueError("need at least 2 seen classes to mine triplets")
    _, image_labels = bundle.arrays("image")
    anchors_pool = bundle.indices("sketch", split.seen_classes)
    _, sketch_labels = bundle.arrays("sketch")
    same = {c: np.flatnonzero(image_labels == c) for c in split.seen_classes}
    seen_images = bundle.indices("image", split.seen_classes)
    other = {c: seen_images[image_labels[seen_images] != c] for c in split.seen_classes}

    rng = np.random.default_rng(seed)
    anchors = rng.choice(anchors_pool, size=count)
    u_pos = rng.random(count)
    u_neg = rng.random(count)
    triplets = []
    for a, up, un in zip(anchors, u_pos, u_neg):
        cls = int(sketch_labels[a])
        pos_pool, neg_pool = same[cls], other[cls]
        p = pos_pool[min(int(up * len(pos_pool)), len(pos_pool) - 1)]
        n = neg_pool[min(int(un * len(neg_pool)), len(neg_pool) - 1)]
        triplets.append(Triplet(int(a), int(p), int(n), cls))
    return triplets


def triplet_arrays(triplets: Sequence[Triplet]) -> dict[str, np.ndarray]:
    """Column view of a triplet list: anchor, positive, negative, prototype index arrays."""
    return {
        "anchor": np.array([t.anchor for t in triplets], dtype=np.int64),
        "positive": np.array([t.positive for t in triplets], dtype=np.int64),
        "negative": np.array([t.negative for t in triplets], dtype=np.int64),
        "prototype": np.array([t.positive_prototype for t in triplets], dtype=np.int64),
    }


def load_semantic_embeddings(path: str | Path) -> SemanticPrototypes:
    """Read a text embedding file.

    First line ``<class_count> <dim>``, then one ``<name> v1 ... vdim`` line
    per class.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmbeddingFormatError("empty embedding file", 1)
    header = lines[0].split()
    if len(header) != 2:
        raise EmbeddingFormatError("header must be '<class_count> <dim>'", 1)
    try:
        count, dim = int(header[0]), int(header[1])
    except ValueError:
        raise EmbeddingFormatError("non-integer header field", 1) from None
    names: list[str] = []
    rows: list[list[float]] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split(" ")
        name, values = tokens[0], [t for t in tokens[1:] if t]
        if len(values) != dim:
            raise EmbeddingFormatError(f"expected {dim} values, found {len(values)}", lineno)
        if name in seen:
            raise EmbeddingFormatError(
                f"duplicate class name {name!r} (first on line {seen[name]})", lineno
            )
        try:
            rows.append([float(v) for v in values])
        except ValueError as exc:
            raise EmbeddingFormatError(f"non-numeric token ({exc})", lineno) from None
        seen[name] = lineno
        names.append(name)
    if len(names) != count:
        raise EmbeddingFormatError(f"header declares {count} classes, file has {len(names)}")
    try:
        return SemanticPrototypes(tuple(names), np.array(rows, dtype=np.float64).reshape(count, dim))
    except ValueError as exc:
        raise EmbeddingFormatError(str(exc)) from None


def save_semantic_embeddings(prototypes: SemanticPrototypes, path: str | Path) -> None:
    out = [f"{len(prototypes)} {prototypes.dim}"]
    for name, vec in zip(prototypes.class_names, prototypes.vectors):
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"class name {name!r} cannot be written (empty or whitespace)")
        out.append(" ".join([name, *(repr(float(v)) for v in vec)]))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def concat_prototypes(a: SemanticPrototypes, b: SemanticPrototypes) -> SemanticPrototypes:
    if a.class_names != b.class_names:
        raise ValueError("prototype sets must list identical class names in identical order")
    return SemanticPrototypes(a.class_names, np.concatenate([a.vectors, b.vectors], axis=1))


def save_bundle(bundle: DatasetBundle, directory: str | Path,
                extra: Mapping[str, np.ndarray] | None = None) -> tuple[Path, Path]:
    """Write ``dataset.bdas`` (maps, labels, split, ``extra``) and ``prototypes.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split = bundle.require_split()
    image_maps, image_labels = bundle.arrays("image")
    sketch_maps, sketch_labels = bundle.arrays("sketch")
    tensors = {
        "image.maps": image_maps,
        "image.labels": image_labels,
        "sketch.maps": sketch_maps,
        "sketch.labels": sketch_labels,
        "split.seen": np.array(split.seen_classes),
        "split.unseen": np.array(split.unseen_classes),
        **(extra or {}),
    }
    data_path, proto_path = directory / "dataset.bdas", directory / "prototypes.txt"
    write_tensors(data_path, tensors)
    save_semantic_embeddings(bundle.prototypes, proto_path)
    return data_path, proto_path


def load_bundle(directory: str | Path) -> DatasetBundle:
    directory = Path(directory)
    t = read_tensors(directory / "dataset.bdas")
    prototypes = load_semantic_embeddings(directory / "prototypes.txt")

    def records(modality: Modality) -> list[SampleRecord]:
        maps, labels = t[f"{modality}.maps"], t[f"{modality}.labels"]
        return [SampleRecord(modality, int(y), m) for m, y in zip(maps, labels)]

    split = ClassSplit(
        tuple(int(c) for c in t["split.seen"]), tuple(int(c) for c in t["split.unseen"])
    )
    return DatasetBundle(records("image"), records("sketch"), prototypes, split)
