"""Class-incremental scenario runner, rehearsal baselines and CL metrics."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ContractError
from .memory import (
    ExemplarMemory,
    MemoryBag,
    build_exemplar_set,
    check_memory,
    merge,
    per_class_budget,
    reduce_exemplar_set,
)
from .model import Bag, MilModel, expand_head, forward, predict
from .training import TrainConfig, train_task

log = logging.getLogger(__name__)

# network sizes used by the benchmark; the 16/8/16 model defaults learn too
# slowly within 20 epochs of per-bag SGD on the synthetic cohort
BENCHMARK_DIMS = {"d": 32, "attn_dim": 16, "hidden": 32}
BENCHMARK_LR = 0.02


class Method(str, enum.Enum):
    COMIL = "comil"
    FINETUNE = "finetune"
    REHEARSE_FULL_BAGS = "rehearse_full_bags"
    ATTENTION_TOPK = "attention_topk"
    UPPER_BOUND = "upper_bound"

    @property
    def uses_memory(self) -> bool:
        return self in (Method.COMIL, Method.REHEARSE_FULL_BAGS, Method.ATTENTION_TOPK)

    @property
    def distills(self) -> bool:
        return self.uses_memory


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple

    def __init__(self, tasks):
        groups = tuple(tuple(int(c) for c in g) for g in tasks)
        object.__setattr__(self, "tasks", groups)
        seen = [c for g in groups for c in g]
        if not groups or any(len(g) == 0 for g in groups):
            raise ContractError("schedule needs nonempty class groups")
        if len(seen) != len(set(seen)):
            raise ContractError(f"schedule groups overlap: {groups}")

    @classmethod
    def consecutive(cls, num_classes: int, per_task: int = 2) -> "TaskSchedule":
        ids = list(range(num_classes))
        return cls([ids[i : i + per_task] for i in range(0, num_classes, per_task)])

    @classmethod
    def parse(cls, text: str) -> "TaskSchedule":
        """Parse ``"0,1;2,3"`` style group lists."""
        try:
            return cls([[int(c) for c in g.split(",") if c.strip()] for g in text.split(";") if g.strip()])
        except ValueError:
            raise ContractError(f"bad schedule {text!r}") from None

    def __str__(self):
        return ";".join(",".join(str(c) for c in g) for g in self.tasks)

    def __len__(self):
        return len(self.tasks)

    def classes_until(self, t: int) -> List[int]:
        """Classes of tasks 0..t (zero-based, inclusive)."""
        return [c for g in self.tasks[: t + 1] for c in g]


@dataclass
class RunRecord:
    method: str
    seed: int
    K: int
    schedule: str
    # accuracy[t][j]: accuracy on task j's test bags after training step t (j <= t)
    accuracy: List[List[float]] = field(default_factory=list)
    step_seconds: List[float] = field(default_factory=list, compare=False)
    memory_sizes: List[int] = field(default_factory=list)
    config: Dict[str, str] = field(default_factory=dict)
    final_model: Optional[MilModel] = field(default=None, repr=False, compare=False)
    final_memory: Optional[ExemplarMemory] = field(default=None, repr=False, compare=False)


def average_accuracy(record) -> float:
    """Mean accuracy over all tasks after the final step."""
    a = record.accuracy if isinstance(record, RunRecord) else record
    T = len(a)
    if T == 0 or any(len(a[t]) != t + 1 for t in range(T)):
        raise ContractError("accuracy matrix is not lower-triangular complete")
    return float(np.mean(a[T - 1]))


def average_forgetting(record) -> float:
    """Mean drop from each earlier task's best accuracy to its final accuracy."""
    a = record.accuracy if isinstance(record, RunRecord) else record
    T = len(a)
    if T < 2:
        raise ContractError("forgetting needs at least two tasks")
    if any(len(a[t]) != t + 1 for t in range(T)):
        raise ContractError("accuracy matrix is not lower-triangular complete")
    drops = [max(a[t][j] for t in range(j, T - 1)) - a[T - 1][j] for j in range(T - 1)]
    return float(sum(drops) / len(drops))


def accuracy(model: MilModel, bags: Sequence[Bag]) -> float:
    if not bags:
        raise ContractError("accuracy over an empty test set")
    return sum(predict(model, b) == b.label for b in bags) / len(bags)


def _full_bag_memory(class_bags, K, num_classes, rng) -> ExemplarMemory:
    """Whole bags drawn uniformly per class while they fit the class budget."""
    labels = sorted(class_bags)
    memory = ExemplarMemory(capacity=K, class_ids=labels)
    budget = per_class_budget(K, num_classes)
    for label in labels:
        bags = class_bags[label]
        used = 0
        for i in rng.permutation(len(bags)):
            b = bags[i]
            if used + len(b) <= budget:
                memory.bags.append(
                    MemoryBag(b.bag_id, b.label, b.instances, np.zeros(len(b)), np.arange(len(b), dtype=np.int64))
                )
                used += len(b)
    return memory


def _reduce_full_bags(memory: ExemplarMemory, num_classes: int) -> ExemplarMemory:
    budget = per_class_budget(memory.capacity, num_classes)
    out = ExemplarMemory(capacity=memory.capacity, class_ids=list(memory.class_ids))
    for label in memory.class_ids:
        used = 0
        for b in memory.bags_of(label):
            if used + len(b) <= budget:
                out.bags.append(b)
                used += len(b)
    return out


def _topk_fill(bags, model: MilModel, budget: int) -> List[MemoryBag]:
    """Keep the highest-attention instances of each bag, a uniform quota per bag, until the budget is spent."""
    if budget <= 0 or not bags:
        return []
    quota = math.ceil(budget / len(bags))
    out, left = [], budget
    for b in bags:
        if left <= 0:
            break
        att = forward(model, b.instances).attentions
        k = min(quota, left, len(att))
        # stable descending order: ties go to the earlier instance
        top = np.sort(np.argsort(-att, kind="stable")[:k])
        idx = b.indices[top] if isinstance(b, MemoryBag) else top.astype(np.int64)
        out.append(MemoryBag(b.bag_id, b.label, b.instances[top], att[top], idx))
        left -= k
    return out


def _topk_memory(class_bags, model, K, num_classes, rng) -> ExemplarMemory:
    labels = sorted(class_bags)
    memory = ExemplarMemory(capacity=K, class_ids=labels)
    budget = per_class_budget(K, num_classes)
    for label in labels:
        bags = class_bags[label]
        ordered = [bags[i] for i in rng.permutation(len(bags))]
        memory.bags.extend(_topk_fill(ordered, model, budget))
    return memory


def _reduce_topk(memory: ExemplarMemory, model: MilModel, num_classes: int) -> ExemplarMemory:
    budget = per_class_budget(memory.capacity, num_classes)
    out = ExemplarMemory(capacity=memory.capacity, class_ids=list(memory.class_ids))
    for label in memory.class_ids:
        out.bags.extend(_topk_fill(memory.bags_of(label), model, budget))
    return out


def update_memory(method, memory, model, new_class_bags, K, num_classes, rng) -> ExemplarMemory:
    """Shrink the stored classes to the new budget, then add the newest classes."""
    method = Method(method)
    if memory is None:
        memory = ExemplarMemory(capacity=K)
    if method is Method.COMIL:
        if memory.class_ids:
            memory = reduce_exemplar_set(memory, model, num_classes)
        fresh = build_exemplar_set(new_class_bags, model, K, num_classes=num_classes)
    elif method is Method.REHEARSE_FULL_BAGS:
        memory = _reduce_full_bags(memory, num_classes)
        fresh = _full_bag_memory(new_class_bags, K, num_classes, rng)
    elif method is Method.ATTENTION_TOPK:
        memory = _reduce_topk(memory, model, num_classes)
        fresh = _topk_memory(new_class_bags, model, K, num_classes, rng)
    else:
        raise ContractError(f"method {method.value} keeps no memory")
    return merge(memory, fresh)


def run_scenario(
    dataset: Dataset,
    schedule: TaskSchedule,
    method,
    cfg: TrainConfig = TrainConfig(),
    K: int = 2000,
    seed: int = 0,
    model_dims: Optional[dict] = None,
) -> RunRecord:
    """Train through every task of ``schedule`` and record the accuracy matrix."""
    method = Method(method)
    if K < 0:
        raise ContractError("K must be non-negative")
    scheduled = {c for g in schedule.tasks for c in g}
    present = {b.label for b in dataset.bags}
    if scheduled != present or not scheduled <= set(range(dataset.num_classes)):
        raise ContractError(f"schedule classes {sorted(scheduled)} do not match dataset classes {sorted(present)}")
    train_ids = {b.bag_id for b in dataset.subset("train")}
    test_ids = {b.bag_id for b in dataset.subset("test")}
    if train_ids & test_ids:
        raise ContractError("train and test bag ids overlap")
    for g in schedule.tasks:
        for c in g:
            if not dataset.subset("train", [c]) or not dataset.subset("test", [c]):
                raise ContractError(f"class {c} lacks train or test bags; split the dataset first")

    dims = dict(BENCHMARK_DIMS)
    dims.update(model_dims or {})
    rng = np.random.default_rng(seed)
    model = MilModel.init(d_in=dataset.d_in, seed=int(rng.integers(2**31)), **dims)
    memory: Optional[ExemplarMemory] = None
    record = RunRecord(
        method=method.value,
        seed=seed,
        K=K,
        schedule=str(schedule),
        config={"epochs": str(cfg.epochs), "lr": repr(cfg.lr)},
    )
    test_sets = [dataset.subset("test", g) for g in schedule.tasks]

    for t, group in enumerate(schedule.tasks):
        start = time.perf_counter()
        prev = model.copy() if t > 0 else None
        model = expand_head(model, group, seed=int(rng.integers(2**31)))

        if method is Method.UPPER_BOUND:
            train_bags = dataset.subset("train", schedule.classes_until(t))
        else:
            train_bags = dataset.subset("train", group)
        if memory is not None and method.uses_memory:
            train_bags = train_bags + memory.training_bags()

        step_cfg = TrainConfig(
            epochs=cfg.epochs,
            lr=cfg.lr,
            shuffle_seed=seed * 1000 + 100 * t + cfg.shuffle_seed,
            distill_enabled=cfg.distill_enabled and method.distills,
        )
        model = train_task(model, prev, train_bags, step_cfg)
        record.accuracy.append([accuracy(model, test_sets[j]) for j in range(t + 1)])

        if method.uses_memory:
            seen = len(schedule.classes_until(t))
            new_bags = {c: dataset.subset("train", [c]) for c in group}
            memory = update_memory(method, memory, model, new_bags, K, seen, rng)
            check_memory(memory, seen)
            record.memory_sizes.append(len(memory))
        record.step_seconds.append(time.perf_counter() - start)
        log.info("%s seed=%d step %d acc=%s", method.value, seed, t + 1, record.accuracy[-1])
    record.final_model = model
    record.final_memory = memory
    return record


def _fmt(x: float) -> str:
    return repr(float(x))


def format_record(record: RunRecord) -> str:
    """Plain-text report: ``key=value`` header, ``acc,t,j,value`` rows, final summary row.

    Step indices ``t`` and ``j`` are 1-based.
    """
    lines = [
        f"method={record.method}",
        f"seed={record.seed}",
        f"K={record.K}",
        f"schedule={record.schedule}",
    ]
    lines += [f"{k}={v}" for k, v in sorted(record.config.items())]
    for t, row in enumerate(record.accuracy):
        for j, v in enumerate(row):
            lines.append(f"acc,{t + 1},{j + 1},{_fmt(v)}")
    forget = average_forgetting(record) if len(record.accuracy) >= 2 else float("nan")
    lines.append(f"summary,{_fmt(average_accuracy(record))},{_fmt(forget)}")
    return "\n".join(lines) + "\n"


def parse_record(text: str) -> RunRecord:
    header: Dict[str, str] = {}
    cells: Dict[tuple, float] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if line.startswith("acc,"):
            _, t, j, v = line.split(",")
            cells[(int(t) - 1, int(j) - 1)] = float(v)
        elif line.startswith("summary,"):
            continue
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k] = v
        else:
            raise ContractError(f"report line {lineno} not understood: {line!r}")
    T = 1 + max((t for t, _ in cells), default=-1)
    matrix = [[cells[(t, j)] for j in range(t + 1)] for t in range(T)]
    known = {"method", "seed", "K", "schedule"}
    return RunRecord(
        method=header["method"],
        seed=int(header["seed"]),
        K=int(header["K"]),
        schedule=header["schedule"],
        accuracy=matrix,
        config={k: v for k, v in header.items() if k not in known},
    )
