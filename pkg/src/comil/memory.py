"""Instance-level rehearsal memory.

Every stored instance carries a value: its attention weight plus its
Euclidean distances to the mean of its bag and to the mean of its class, all
measured in the model's instance feature space. Selection under the memory
budget is an exact 0/1 knapsack solved by dynamic programming; selected
instances are regrouped into (partial) copies of their source bags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .mathcore import as_vec
from .model import Bag, MilModel, forward, psi

MEMORY_MAGIC = b"CMX1"
MEMORY_VERSION = 1


@dataclass(frozen=True)
class ValueItem:
    bag_id: str
    instance_index: int
    value: float
    cost: int = 1

    def __post_init__(self):
        if self.cost < 1:
            raise ContractError(f"item cost must be >= 1, got {self.cost}")


@dataclass
class MemoryBag:
    """A stored partial bag.

    ``indices`` are positions in the source bag, kept in ascending order so
    the original instance order survives selection.
    """

    bag_id: str
    label: int
    instances: np.ndarray
    values: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return self.instances.shape[0]

    def as_bag(self) -> Bag:
        return Bag(self.bag_id, self.label, self.instances)

    def take(self, positions) -> "MemoryBag":
        positions = np.sort(np.asarray(positions, dtype=np.int64))
        return MemoryBag(
            self.bag_id,
            self.label,
            self.instances[positions],
            self.values[positions],
            self.indices[positions],
        )


@dataclass
class ExemplarMemory:
    capacity: int
    class_ids: List[int] = field(default_factory=list)
    bags: List[MemoryBag] = field(default_factory=list)

    def __len__(self):
        return sum(len(b) for b in self.bags)

    def bags_of(self, label: int) -> List[MemoryBag]:
        return [b for b in self.bags if b.label == label]

    def count(self, label: int) -> int:
        return sum(len(b) for b in self.bags if b.label == label)

    def training_bags(self) -> List[Bag]:
        return [b.as_bag() for b in self.bags]

    def instance_keys(self) -> set:
        return {(b.bag_id, int(i)) for b in self.bags for i in b.indices}

    def __eq__(self, other):
        if not isinstance(other, ExemplarMemory):
            return NotImplemented
        if self.capacity != other.capacity or self.class_ids != other.class_ids:
            return False
        if len(self.bags) != len(other.bags):
            return False
        for a, b in zip(self.bags, other.bags):
            if a.bag_id != b.bag_id or a.label != b.label:
                return False
            for x, y in ((a.instances, b.instances), (a.values, b.values), (a.indices, b.indices)):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        return True


@dataclass
class ClassStats:
    class_id: int
    bag_means: np.ndarray
    class_mean: np.ndarray


def per_class_budget(K: int, num_classes: int) -> int:
    if num_classes < 1:
        raise ContractError("per-class budget needs at least one class")
    return K // num_classes


def compute_class_stats(bags: Sequence, model: MilModel) -> ClassStats:
    """Bag means of psi features, and the class mean as the mean of bag means."""
    if not bags:
        raise ContractError("class statistics need at least one bag")
    labels = {b.label for b in bags}
    if len(labels) != 1:
        raise ContractError(f"bags span several classes: {sorted(labels)}")
    means = np.array([psi(model, b.instances).mean(axis=0) for b in bags])
    return ClassStats(class_id=labels.pop(), bag_means=means, class_mean=means.mean(axis=0))


def instance_value(h, alpha: float, bag_mean, class_mean) -> float:
    h, bm, cm = as_vec(h), as_vec(bag_mean), as_vec(class_mean)
    if not (h.shape == bm.shape == cm.shape) or h.ndim != 1:
        raise ShapeError(f"value vectors disagree: h{h.shape} bag_mean{bm.shape} class_mean{cm.shape}")
    return float(alpha + np.linalg.norm(h - bm) + np.linalg.norm(h - cm))


def knapsack_select(items: Sequence, capacity: int) -> List[int]:
    """Exact 0/1 knapsack by dynamic programming; returns sorted selected indices.

    Items are swept last-to-first so that the backtrace visits them in index
    order; an item is taken whenever taking it is at least as good as skipping
    it, which makes ties resolve towards lower indices.
    """
    if capacity < 0:
        raise ContractError(f"capacity must be >= 0, got {capacity}")
    n = len(items)
    if n == 0 or capacity == 0:
        return []
    values = np.array([float(it.value) for it in items])
    costs = np.array([int(it.cost) for it in items], dtype=np.int64)
    if costs.min() < 1:
        raise ContractError("item costs must be positive integers")

    best = np.zeros(capacity + 1)
    take = np.zeros((n, capacity + 1), dtype=bool)
    for i in range(n - 1, -1, -1):
        c = costs[i]
        if c > capacity:
            continue
        with_item = best[: capacity + 1 - c] + values[i]
        chosen = with_item >= best[c:]
        take[i, c:] = chosen
        best[c:] = np.where(chosen, with_item, best[c:])

    selected = []
    room = capacity
    for i in range(n):
        if take[i, room]:
            selected.append(i)
            room -= costs[i]
    return selected


def _normalize_distances(d_bag: np.ndarray, d_class: np.ndarray):
    # z-score each term, then shift so the smallest value is 0
    out = []
    for d in (d_bag, d_class):
        sd = d.std()
        z = (d - d.mean()) / sd if sd > 0 else np.zeros_like(d)
        out.append(z - z.min() if z.size else z)
    return out


def score_class(bags: Sequence, model: MilModel, value_normalize: bool = False) -> List[np.ndarray]:
    """Value of every instance in a class's bags, one array per bag."""
    outs = [forward(model, b.instances) for b in bags]
    bag_means = np.array([o.instance_features.mean(axis=0) for o in outs])
    class_mean = bag_means.mean(axis=0)
    alphas, d_bag, d_class = [], [], []
    for o, bm in zip(outs, bag_means):
        H = o.instance_features
        alphas.append(o.attentions)
        d_bag.append(np.linalg.norm(H - bm, axis=1))
        d_class.append(np.linalg.norm(H - class_mean, axis=1))
    if value_normalize:
        sizes = np.cumsum([len(a) for a in alphas])[:-1]
        nb, nc = _normalize_distances(np.concatenate(d_bag), np.concatenate(d_class))
        d_bag, d_class = np.split(nb, sizes), np.split(nc, sizes)
    return [a + db + dc for a, db, dc in zip(alphas, d_bag, d_class)]


def _select_class(sources: Sequence, values: List[np.ndarray], budget: int) -> List[MemoryBag]:
    """Knapsack over one class's instances; regroup winners into partial bags."""
    items = [
        ValueItem(src.bag_id, k, float(v))
        for src, vals in zip(sources, values)
        for k, v in enumerate(vals)
    ]
    chosen = knapsack_select(items, budget)
    picked: Dict[int, List[int]] = {}
    offsets = np.cumsum([0] + [len(v) for v in values])
    for flat in chosen:
        b = int(np.searchsorted(offsets, flat, side="right") - 1)
        picked.setdefault(b, []).append(flat - offsets[b])
    out = []
    for b, src in enumerate(sources):
        if b not in picked:
            continue
        mb = _as_memory_bag(src, values[b])
        out.append(mb.take(picked[b]))
    return out


def _as_memory_bag(src, values) -> MemoryBag:
    if isinstance(src, MemoryBag):
        return MemoryBag(src.bag_id, src.label, src.instances, np.asarray(values, dtype=np.float64), src.indices)
    return MemoryBag(
        src.bag_id,
        src.label,
        src.instances,
        np.asarray(values, dtype=np.float64),
        np.arange(len(src), dtype=np.int64),
    )


def build_exemplar_set(
    class_bags: Mapping[int, Sequence[Bag]],
    model: MilModel,
    K: int,
    num_classes: Optional[int] = None,
    value_normalize: bool = False,
) -> ExemplarMemory:
    """Select instances for each class in ``class_bags`` under a per-class budget.

    The budget is ``K // num_classes``; ``num_classes`` defaults to the number
    of classes given, and should be the count of all classes seen so far when
    adding new classes to an existing memory.
    """
    labels = sorted(class_bags)
    n = len(labels) if num_classes is None else num_classes
    memory = ExemplarMemory(capacity=K, class_ids=labels)
    if not labels:
        return memory
    budget = per_class_budget(K, n)
    for label in labels:
        bags = [b for b in class_bags[label] if len(b) > 0]
        if not bags or budget == 0:
            continue
        values = score_class(bags, model, value_normalize)
        memory.bags.extend(_select_class(bags, values, budget))
    return memory


def reduce_exemplar_set(
    memory: ExemplarMemory,
    model: MilModel,
    new_num_classes: int,
    value_normalize: bool = False,
) -> ExemplarMemory:
    """Shrink every class to the new budget, dropping lowest-value instances.

    Values are recomputed with ``model``; bags left empty disappear.
    """
    if new_num_classes <= len(memory.class_ids):
        raise ContractError(
            f"reduction needs more classes than the {len(memory.class_ids)} stored, got {new_num_classes}"
        )
    budget = per_class_budget(memory.capacity, new_num_classes)
    out = ExemplarMemory(capacity=memory.capacity, class_ids=list(memory.class_ids))
    for label in memory.class_ids:
        bags = memory.bags_of(label)
        if not bags:
            continue
        values = score_class(bags, model, value_normalize)
        if sum(len(b) for b in bags) <= budget:
            out.bags.extend(_as_memory_bag(b, v) for b, v in zip(bags, values))
        elif budget > 0:
            out.bags.extend(_select_class(bags, values, budget))
    return out


def merge(memory: ExemplarMemory, other: ExemplarMemory) -> ExemplarMemory:
    if set(memory.class_ids) & set(other.class_ids):
        raise ContractError("memories to merge share classes")
    return ExemplarMemory(
        capacity=memory.capacity,
        class_ids=list(memory.class_ids) + list(other.class_ids),
        bags=list(memory.bags) + list(other.bags),
    )


def check_memory(memory: ExemplarMemory, num_classes: Optional[int] = None) -> None:
    """Raise if the memory breaks its capacity, per-class budget or non-empty-bag rules."""
    total = len(memory)
    if total > memory.capacity:
        raise ContractError(f"memory holds {total} instances, capacity {memory.capacity}")
    if any(len(b) == 0 for b in memory.bags):
        raise ContractError("memory contains an empty bag")
    n = num_classes if num_classes is not None else len(memory.class_ids)
    if n:
        budget = per_class_budget(memory.capacity, n)
        for label in memory.class_ids:
            if memory.count(label) > budget:
                raise ContractError(f"class {label} holds {memory.count(label)} instances, budget {budget}")
    for b in memory.bags:
        if not np.all(np.isfinite(b.values)):
            raise ContractError(f"non-finite value stored for bag {b.bag_id!r}")


def save_memory(memory: ExemplarMemory) -> bytes:
    """Serialise to the CMX1 container (little-endian)."""
    parts = [
        struct.pack("<4sIQI", MEMORY_MAGIC, MEMORY_VERSION, memory.capacity, len(memory.class_ids)),
        struct.pack(f"<{len(memory.class_ids)}q", *memory.class_ids),
        struct.pack("<I", len(memory.bags)),
    ]
    for b in memory.bags:
        name = b.bag_id.encode("utf-8")
        n, d = b.instances.shape
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack("<qII", b.label, n, d))
        parts.append(np.ascontiguousarray(b.instances, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b.values, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b.indices, dtype="<i8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise FormatError(f"memory file truncated at offset {self.off}")
        out = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return out

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = 8 * count
        if self.off + size > len(self.data):
            raise FormatError(f"memory file truncated at offset {self.off}")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.off)
        self.off += size
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"memory file truncated at offset {self.off}")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out


def load_memory(data: bytes) -> ExemplarMemory:
    r = _Reader(data)
    magic, version, capacity, n_classes = r.unpack("<4sIQI")
    if magic != MEMORY_MAGIC:
        raise FormatError(f"bad memory magic {magic!r} at offset 0")
    if version != MEMORY_VERSION:
        raise FormatError(f"unsupported memory version {version} at offset 4")
    class_ids = list(r.unpack(f"<{n_classes}q"))
    (n_bags,) = r.unpack("<I")
    bags = []
    for _ in range(n_bags):
        (name_len,) = r.unpack("<I")
        start = r.off
        try:
            bag_id = r.raw(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"bag id is not UTF-8 at offset {start}") from None
        label, n, d = r.unpack("<qII")
        X = r.array("<f8", n * d).reshape(n, d)
        values = r.array("<f8", n)
        indices = r.array("<i8", n)
        bags.append(MemoryBag(bag_id, label, X, values, indices))
    if r.off != len(data):
        raise FormatError(f"trailing bytes at offset {r.off}")
    return ExemplarMemory(capacity=capacity, class_ids=class_ids, bags=bags)


def iter_values(memory: ExemplarMemory) -> Iterable[ValueItem]:
    for b in memory.bags:
        for idx, v in zip(b.indices, b.values):
            yield ValueItem(b.bag_id, int(idx), float(v))
