"""Seeded open-world classification problems.

A dataset is built from unit-sphere class prototypes with enforced pairwise
separation; examples are isotropic Gaussian perturbations of their prototype.
Base classes get a few-shot training set, the test set mixes base and new
classes at a configurable ratio.  Generation is pure: the same spec always
reproduces the same dataset bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .model import ClassSpace

__all__ = [
    "DatasetSpec",
    "LabeledExample",
    "OpenWorldDataset",
    "sample_prototypes",
    "generate",
    "split_simulated",
    "save_dataset",
    "load_dataset",
]

MAX_PROTOTYPE_ATTEMPTS = 10_000
FORMAT_MARKER = "# owpt-dataset v1"


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate an open-world dataset."""

    n_classes: int = 10
    feature_dim: int = 16
    noise_sigma: float = 0.12
    min_separation: float = 0.5
    shots_per_class: int = 16
    test_per_class: int = 50
    mixing_ratio: float = 0.5  # base fraction of the test set
    base_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 4:
            raise ValueError("need at least 4 classes")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0 <= self.min_separation <= 2:
            raise ValueError("min_separation is a cosine distance in [0, 2]")
        if self.shots_per_class < 1 or self.test_per_class < 1:
            raise ValueError("shots_per_class and test_per_class must be >= 1")
        if not 0 < self.mixing_ratio < 1:
            raise ValueError("mixing_ratio must lie strictly between 0 and 1")
        if not 0 < self.base_fraction < 1:
            raise ValueError("base_fraction must lie strictly between 0 and 1")
        n_base = math.ceil(self.n_classes * self.base_fraction)
        if not 1 <= n_base <= self.n_classes - 1:
            raise ValueError("base_fraction leaves no base or no new classes")

    @property
    def n_base(self) -> int:
        return math.ceil(self.n_classes * self.base_fraction)


@dataclass(frozen=True, eq=False)
class LabeledExample:
    feature: np.ndarray
    label: int
    space_tag: str  # "base" | "new"

    def __post_init__(self):
        feature = np.asarray(self.feature, dtype=np.float64)
        feature.setflags(write=False)
        object.__setattr__(self, "feature", feature)
        if self.space_tag not in ("base", "new"):
            raise ValueError(f"bad space_tag {self.space_tag!r}")


@dataclass(frozen=True, eq=False)
class OpenWorldDataset:
    spec: DatasetSpec
    class_space: ClassSpace
    train: tuple[LabeledExample, ...]
    test: tuple[LabeledExample, ...]

    def __post_init__(self):
        base = set(self.class_space.base)
        for ex in self.train:
            if ex.label not in base:
                raise ValueError("training examples must come from base classes")
        for ex in self.test:
            want = "base" if ex.label in base else "new"
            if ex.space_tag != want:
                raise ValueError("test space_tag inconsistent with class partition")


def _rng(seed: int, stream: int) -> np.random.Generator:
    # one independent substream per generation stage keeps draws decoupled
    return np.random.default_rng([seed, stream])


def sample_prototypes(spec: DatasetSpec) -> np.ndarray:
    """Unit-sphere prototypes with pairwise cosine distance >= min_separation.

    Rejection-resamples candidates; gives up after 10,000 draws total.
    """
    rng = _rng(spec.seed, 0)
    accepted: list[np.ndarray] = []
    attempts = 0
    while len(accepted) < spec.n_classes:
        if attempts >= MAX_PROTOTYPE_ATTEMPTS:
            raise ValueError("prototype separation failed")
        attempts += 1
        cand = rng.normal(size=spec.feature_dim)
        norm = np.linalg.norm(cand)
        if norm == 0.0:
            continue
        cand /= norm
        if all(1.0 - float(cand @ p) >= spec.min_separation for p in accepted):
            accepted.append(cand)
    return np.stack(accepted)


def _even_counts(total: int, n_bins: int) -> list[int]:
    base, extra = divmod(total, n_bins)
    return [base + (1 if i < extra else 0) for i in range(n_bins)]


def generate(spec: DatasetSpec) -> OpenWorldDataset:
    """Sample a full open-world dataset from the spec."""
    prototypes = sample_prototypes(spec)

    order = list(range(spec.n_classes))
    _rng(spec.seed, 1).shuffle(order)
    base = tuple(sorted(order[: spec.n_base]))
    new = tuple(sorted(order[spec.n_base :]))
    space = ClassSpace(tuple(range(spec.n_classes)), base, new)

    def draw(rng, class_id, tag, count):
        noise = rng.normal(0.0, spec.noise_sigma, size=(count, spec.feature_dim))
        return [
            LabeledExample(prototypes[class_id] + noise[i], class_id, tag)
            for i in range(count)
        ]

    train_rng = _rng(spec.seed, 2)
    train: list[LabeledExample] = []
    for c in base:
        train.extend(draw(train_rng, c, "base", spec.shots_per_class))

    total_test = spec.test_per_class * spec.n_classes
    n_base_test = round(spec.mixing_ratio * total_test)
    test_rng = _rng(spec.seed, 3)
    test: list[LabeledExample] = []
    for c, count in zip(base, _even_counts(n_base_test, len(base))):
        test.extend(draw(test_rng, c, "base", count))
    for c, count in zip(new, _even_counts(total_test - n_base_test, len(new))):
        test.extend(draw(test_rng, c, "new", count))

    return OpenWorldDataset(spec, space, tuple(train), tuple(test))


def split_simulated(dataset: OpenWorldDataset, partition):
    """Split the training set by a simulated base/new partition of the base classes.

    ``partition`` is either an object with ``sim_base``/``sim_new`` attributes
    or a plain ``(sim_base, sim_new)`` pair.  The two sets must disjointly
    cover the dataset's base classes.
    """
    if hasattr(partition, "sim_base"):
        sim_base, sim_new = partition.sim_base, partition.sim_new
    else:
        sim_base, sim_new = partition
    sim_base, sim_new = set(sim_base), set(sim_new)
    if sim_base & sim_new or sim_base | sim_new != set(dataset.class_space.base):
        raise ValueError("partition must disjointly cover the base classes")
    d_base = tuple(ex for ex in dataset.train if ex.label in sim_base)
    d_new = tuple(ex for ex in dataset.train if ex.label in sim_new)
    return d_base, d_new


def _spec_to_header(spec: DatasetSpec) -> str:
    parts = []
    for f in fields(DatasetSpec):
        v = getattr(spec, f.name)
        parts.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return ",".join(parts)


def _spec_from_header(line: str) -> DatasetSpec:
    kwargs = {}
    for part in line.strip().split(","):
        key, _, raw = part.partition("=")
        kwargs[key] = raw
    types = {f.name: f.type for f in fields(DatasetSpec)}
    if set(kwargs) != set(types):
        raise ValueError("dataset header does not match the expected spec fields")
    typed = {
        name: (float(raw) if types[name] == "float" else int(raw))
        for name, raw in kwargs.items()
    }
    return DatasetSpec(**typed)


def save_dataset(dataset: OpenWorldDataset, path) -> None:
    """Write the line-delimited text export; floats round-trip exactly."""
    lines = [FORMAT_MARKER, _spec_to_header(dataset.spec)]
    for split, examples in (("train", dataset.train), ("test", dataset.test)):
        for ex in examples:
            coords = ",".join(repr(float(v)) for v in ex.feature)
            lines.append(f"{split},{ex.label},{ex.space_tag},{coords}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> OpenWorldDataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != FORMAT_MARKER:
        raise ValueError("not a dataset export file")
    spec = _spec_from_header(lines[1])

    train: list[LabeledExample] = []
    test: list[LabeledExample] = []
    for line in lines[2:]:
        split, label, tag, *coords = line.split(",")
        ex = LabeledExample(np.array([float(c) for c in coords]), int(label), tag)
        (train if split == "train" else test).append(ex)

    base = tuple(sorted({ex.label for ex in train}))
    new = tuple(c for c in range(spec.n_classes) if c not in set(base))
    space = ClassSpace(tuple(range(spec.n_classes)), base, new)
    return OpenWorldDataset(spec, space, tuple(train), tuple(test))
