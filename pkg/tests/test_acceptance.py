"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the acceptance log, which is printed
in the terminal summary (and immediately with ``-s``).
"""

import time

import numpy as np
import pytest

from comil import engine
from comil.cli import main
from comil.data import SyntheticSpec, generate, split
from comil.engine import BENCHMARK_DIMS, BENCHMARK_LR, TaskSchedule, average_accuracy, average_forgetting, run_scenario
from comil.mathcore import finite_diff_grad
from comil.memory import ValueItem, knapsack_select, per_class_budget
from comil.model import Bag, MilModel, expand_head
from comil.training import TrainConfig, combined_loss, combined_loss_and_grads, distillation_loss
from oracles import chaudhry_forgetting, enumerate_knapsack, top_m

METHODS = ("finetune", "attention_topk", "comil", "upper_bound")
SEEDS = range(5)
K = 2000
RUNTIME_LIMIT_S = 600.0


def record(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)


class _MemoryAudit:
    """Wraps the in-run memory check with an independent recount."""

    def __init__(self, inner):
        self.inner = inner
        self.steps = 0
        self.violations = []

    def __call__(self, memory, num_classes=None):
        self.steps += 1
        n = num_classes if num_classes is not None else len(memory.class_ids)
        budget = per_class_budget(memory.capacity, n)
        total = sum(b.instances.shape[0] for b in memory.bags)
        if total > memory.capacity:
            self.violations.append(f"{total} > K={memory.capacity}")
        for label in memory.class_ids:
            c = sum(b.instances.shape[0] for b in memory.bags if b.label == label)
            if c > budget:
                self.violations.append(f"class {label}: {c} > {budget}")
        if any(b.instances.shape[0] == 0 for b in memory.bags):
            self.violations.append("empty bag")
        return self.inner(memory, num_classes)


@pytest.fixture(scope="module")
def benchmark():
    dataset = split(generate(SyntheticSpec()), 0.75, 0)
    schedule = TaskSchedule.consecutive(8, 2)
    cfg = TrainConfig(epochs=20, lr=BENCHMARK_LR)
    audit = _MemoryAudit(engine.check_memory)
    runs = {}
    start = time.perf_counter()
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(engine, "check_memory", audit)
        for method in METHODS:
            runs[method] = [
                run_scenario(dataset, schedule, method, cfg, K=K, seed=s, model_dims=BENCHMARK_DIMS) for s in SEEDS
            ]
    elapsed = time.perf_counter() - start
    acc = {m: float(np.mean([average_accuracy(r) for r in rs])) for m, rs in runs.items()}
    forget = {m: float(np.mean([average_forgetting(r) for r in rs])) for m, rs in runs.items()}
    return {"runs": runs, "acc": acc, "forget": forget, "elapsed": elapsed, "audit": audit}


def test_criterion_1_directional_benchmark(benchmark, acceptance_log):
    acc, forget = benchmark["acc"], benchmark["forget"]
    checks = {
        "acc gap >= 10 pts": acc["comil"] - acc["finetune"] >= 0.10,
        "comil > attention_topk": acc["comil"] > acc["attention_topk"],
        "forgetting below finetune": forget["comil"] < forget["finetune"],
        "runtime <= 600 s": benchmark["elapsed"] <= RUNTIME_LIMIT_S,
    }
    detail = (
        f"acc comil={acc['comil']:.4f} finetune={acc['finetune']:.4f} topk={acc['attention_topk']:.4f}; "
        f"forget comil={forget['comil']:.4f} finetune={forget['finetune']:.4f}; "
        f"runtime={benchmark['elapsed']:.1f}s"
    )
    failed = [k for k, ok in checks.items() if not ok]
    record(acceptance_log, 1, not failed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, detail


def test_criterion_2_upper_bound(benchmark, acceptance_log):
    acc = benchmark["acc"]
    ok = acc["upper_bound"] >= acc["comil"] - 0.02
    record(acceptance_log, 2, ok, f"upper_bound={acc['upper_bound']:.4f} comil={acc['comil']:.4f}")
    assert ok


def test_criterion_3_knapsack_oracle(acceptance_log):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(0, 21))
        values = rng.integers(0, 50, size=n).tolist()
        costs = rng.integers(1, 4, size=n).tolist()
        cap = int(rng.integers(0, 2 * n + 2))
        chosen = knapsack_select([ValueItem("b", i, v, c) for i, (v, c) in enumerate(zip(values, costs))], cap)
        feasible = sum(costs[i] for i in chosen) <= cap
        if not feasible or sum(values[i] for i in chosen) != enumerate_knapsack(values, costs, cap):
            mismatches += 1
        # unit costs, small value range so ties are common
        unit_vals = rng.integers(0, 5, size=n).tolist()
        m = int(rng.integers(0, n + 2))
        if knapsack_select([ValueItem("b", i, v) for i, v in enumerate(unit_vals)], m) != top_m(unit_vals, m):
            mismatches += 1
    record(acceptance_log, 3, mismatches == 0, f"200 instances, mismatches={mismatches}")
    assert mismatches == 0


def _gradient_fixture(seed):
    rng = np.random.default_rng(10_000 + seed)
    d_in, d, D, hid = (int(v) for v in rng.integers(1, 7, size=4))
    old = expand_head(MilModel.init(d_in=d_in, d=d, attn_dim=D, hidden=hid, seed=seed), [0, 1], seed=seed)
    model = expand_head(old, [2, 3], seed=seed + 1)
    model = model.with_params({k: v + 0.3 * rng.normal(size=v.shape) for k, v in model.params().items()})
    bag = Bag("g", int(rng.integers(0, 4)), rng.normal(size=(int(rng.integers(1, 8)), d_in)))
    return model, old, bag


def test_criterion_4_gradient_oracle(acceptance_log):
    start = time.perf_counter()
    worst = 0.0
    n_fixtures = 60
    for seed in range(n_fixtures):
        model, old, bag = _gradient_fixture(seed)
        parts, grads = combined_loss_and_grads(model, old, bag)
        assert parts.dist > 0
        numeric = finite_diff_grad(lambda p: combined_loss(model.with_params(p), old, bag).total, model.params())
        for name, g in grads.items():
            scale = max(np.linalg.norm(g), np.linalg.norm(numeric[name]), 1e-10)
            worst = max(worst, float(np.linalg.norm(g - numeric[name]) / scale))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30.0
    record(acceptance_log, 4, ok, f"{n_fixtures} fixtures, max rel err={worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_5_memory_invariant(benchmark, acceptance_log):
    audit = benchmark["audit"]
    sizes_ok = all(n <= K for rs in benchmark["runs"].values() for r in rs for n in r.memory_sizes)
    ok = audit.steps > 0 and not audit.violations and sizes_ok
    record(acceptance_log, 5, ok, f"{audit.steps} memory states audited, violations={len(audit.violations)}")
    assert ok, audit.violations[:5]


def test_criterion_6_distillation_minimum(acceptance_log):
    rng = np.random.default_rng(77)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        k = int(rng.integers(0, n + 1))
        old = rng.normal(scale=3.0, size=n)
        new = old + rng.normal(scale=float(rng.choice([1e-6, 1e-2, 1.0, 5.0])), size=n)
        if not distillation_loss(old, new, k) >= distillation_loss(old, old, k):
            violations += 1
    record(acceptance_log, 6, violations == 0, f"1000 pairs, violations={violations}")
    assert violations == 0


def test_criterion_7_determinism(tmp_path, acceptance_log):
    data = tmp_path / "default.milds"
    assert main(["generate", "-o", str(data)]) == 0
    outputs = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(f"dataset={data}\noutput={tmp_path / name}\nmethod=comil\nseeds=0,1\n")
        assert main(["run", str(cfg)]) == 0
        outputs.append((tmp_path / name / "summary.csv").read_bytes())
    ok = outputs[0] == outputs[1]
    record(acceptance_log, 7, ok, f"summary.csv {len(outputs[0])} bytes, identical={ok}")
    assert ok


def test_criterion_8_metric_formulas(acceptance_log):
    a = [[0.9], [0.8, 0.7], [0.6, 0.5, 0.9]]
    forget = average_forgetting(a)
    rng = np.random.default_rng(8)
    rows_ok = True
    for _ in range(100):
        T = int(rng.integers(1, 8))
        m = [rng.random(t + 1).tolist() for t in range(T)]
        rows_ok &= average_accuracy(m) == pytest.approx(sum(m[-1]) / T, abs=1e-15)
        if T >= 2:
            rows_ok &= average_forgetting(m) == pytest.approx(chaudhry_forgetting(m), abs=1e-15)
    ok = abs(forget - 0.25) <= 1e-12 and rows_ok
    record(acceptance_log, 8, ok, f"forgetting={forget!r}, row means ok={rows_ok}")
    assert ok
