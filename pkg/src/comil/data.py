"""Synthetic bag datasets, stratified splitting and the MILDS text format.

MILDS layout (UTF-8, LF line endings)::

    MILDS 1 <d_in> <num_classes>
    <class name>\t<class name>\t...
    <bag_id>\t<label>\t<split>\t<N>
    <d_in space-separated floats>      # N lines
    ...

Floats are written with ``repr`` so that a read/write round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError, SpecError
from .model import Bag

UNSPLIT = "-"
SPLIT_TAGS = ("train", "test", UNSPLIT)
MAX_CENTER_TRIES = 10000


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    bags_per_class: int = 50
    instances_per_bag: int = 64
    d_in: int = 16
    hallmark_fraction: float = 0.1
    class_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0
    # optional per-class bag counts, e.g. to mimic an unbalanced cohort
    bag_counts: Optional[Sequence[int]] = None

    def __post_init__(self):
        for name in ("num_classes", "bags_per_class", "instances_per_bag", "d_in"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be >= 1")
        if not 0.0 < self.hallmark_fraction <= 1.0:
            raise SpecError("hallmark_fraction must lie in (0, 1]")
        if not self.class_separation > 0 or not self.noise_sigma > 0:
            raise SpecError("class_separation and noise_sigma must be positive")
        if self.bag_counts is not None:
            if len(self.bag_counts) != self.num_classes or min(self.bag_counts) < 1:
                raise SpecError("bag_counts needs one positive count per class")

    def bags_for(self, c: int) -> int:
        return self.bag_counts[c] if self.bag_counts is not None else self.bags_per_class


@dataclass
class Dataset:
    d_in: int
    class_names: List[str]
    bags: List[Bag]
    splits: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.splits:
            self.splits = [UNSPLIT] * len(self.bags)
        if len(self.splits) != len(self.bags):
            raise ContractError("one split tag per bag required")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str, classes: Optional[Sequence[int]] = None) -> List[Bag]:
        keep = None if classes is None else set(classes)
        return [
            b for b, s in zip(self.bags, self.splits) if s == split and (keep is None or b.label in keep)
        ]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.d_in == other.d_in
            and self.class_names == other.class_names
            and self.splits == other.splits
            and len(self.bags) == len(other.bags)
            and all(
                a.bag_id == b.bag_id
                and a.label == b.label
                and a.instances.shape == b.instances.shape
                and a.instances.tobytes() == b.instances.tobytes()
                for a, b in zip(self.bags, other.bags)
            )
        )


def _ceil_count(fraction: float, n: int) -> int:
    # round first so 0.7 * 10 does not ceil to 8
    return math.ceil(round(fraction * n, 9))


def class_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Hallmark centres on a sphere of radius ``class_separation``, pairwise >= that far apart."""
    centers: List[np.ndarray] = []
    tries = 0
    while len(centers) < spec.num_classes:
        tries += 1
        if tries > MAX_CENTER_TRIES:
            raise SpecError(
                f"could not place {spec.num_classes} centres {spec.class_separation} apart in {spec.d_in} dims"
            )
        v = rng.normal(size=spec.d_in)
        norm = np.linalg.norm(v)
        if norm == 0:
            continue
        cand = spec.class_separation * v / norm
        if all(np.linalg.norm(cand - c) >= spec.class_separation for c in centers):
            centers.append(cand)
    return np.array(centers)


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw a hallmark-plus-background bag dataset; deterministic under ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    centers = class_centers(spec, rng)
    n = spec.instances_per_bag
    n_hall = min(n, _ceil_count(spec.hallmark_fraction, n))
    bags = []
    for c in range(spec.num_classes):
        for j in range(spec.bags_for(c)):
            hall = rng.normal(centers[c], spec.noise_sigma, size=(n_hall, spec.d_in))
            background = rng.normal(0.0, spec.noise_sigma, size=(n - n_hall, spec.d_in))
            X = np.vstack([hall, background])[rng.permutation(n)]
            bags.append(Bag(f"c{c}_b{j:03d}", c, X))
    names = [f"class{c}" for c in range(spec.num_classes)]
    return Dataset(d_in=spec.d_in, class_names=names, bags=bags)


def train_count(n_bags: int, train_fraction: float) -> int:
    """Training bags for a class of ``n_bags``: ceil of the fraction, leaving >= 1 test bag."""
    return min(n_bags - 1, max(1, _ceil_count(train_fraction, n_bags)))


def split(dataset: Dataset, train_fraction: float = 0.75, seed: int = 0) -> Dataset:
    """Stratified per-class train/test tagging."""
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_class: Dict[int, List[int]] = {}
    for i, b in enumerate(dataset.bags):
        by_class.setdefault(b.label, []).append(i)
    tags = [UNSPLIT] * len(dataset.bags)
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 2:
            raise ContractError(f"class {label} has {len(idx)} bag(s); at least 2 needed to split")
        n_train = train_count(len(idx), train_fraction)
        perm = rng.permutation(len(idx))
        for rank, p in enumerate(perm):
            tags[idx[p]] = "train" if rank < n_train else "test"
    return Dataset(d_in=dataset.d_in, class_names=list(dataset.class_names), bags=list(dataset.bags), splits=tags)


def dumps_dataset(dataset: Dataset) -> str:
    lines = [f"MILDS 1 {dataset.d_in} {dataset.num_classes}", "\t".join(dataset.class_names)]
    for bag, tag in zip(dataset.bags, dataset.splits):
        lines.append(f"{bag.bag_id}\t{bag.label}\t{tag}\t{len(bag)}")
        lines.extend(" ".join(repr(float(x)) for x in row) for row in bag.instances)
    return "\n".join(lines) + "\n"


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8", newline="\n")


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("missing manifest")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "MILDS" or head[1] != "1":
        raise FormatError(f"line 1: bad manifest {lines[0]!r}")
    try:
        d_in, n_classes = int(head[2]), int(head[3])
    except ValueError:
        raise FormatError(f"line 1: bad manifest {lines[0]!r}") from None
    if len(lines) < 2:
        raise FormatError("line 2: missing class names")
    names = lines[1].split("\t")
    if len(names) != n_classes:
        raise FormatError(f"line 2: expected {n_classes} class names, found {len(names)}")

    bags, tags = [], []
    i = 2
    while i < len(lines):
        lineno = i + 1
        fields = lines[i].split("\t")
        if len(fields) != 4:
            raise FormatError(f"line {lineno}: bag header needs 4 tab-separated fields")
        bag_id, label_s, tag, n_s = fields
        try:
            label, n = int(label_s), int(n_s)
        except ValueError:
            raise FormatError(f"line {lineno}: bad label or instance count") from None
        if tag not in SPLIT_TAGS:
            raise FormatError(f"line {lineno}: unknown split tag {tag!r}")
        if not 0 <= label < n_classes:
            raise FormatError(f"line {lineno}: label {label} outside {n_classes} classes")
        if n < 1:
            raise FormatError(f"line {lineno}: bag {bag_id!r} has no instances")
        if i + n >= len(lines):
            raise FormatError(f"line {len(lines) + 1}: bag {bag_id!r} truncated")
        rows = []
        for k in range(n):
            row_no = i + 2 + k
            parts = lines[i + 1 + k].split(" ")
            try:
                row = [float(p) for p in parts]
            except ValueError:
                raise FormatError(f"line {row_no}: malformed float in bag {bag_id!r}") from None
            if len(row) != d_in:
                raise FormatError(f"line {row_no}: bag {bag_id!r} has dimension {len(row)}, expected {d_in}")
            rows.append(row)
        bags.append(Bag(bag_id, label, np.array(rows, dtype=np.float64)))
        tags.append(tag)
        i += 1 + n
    return Dataset(d_in=d_in, class_names=names, bags=bags, splits=tags)


def read_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="utf-8"))
