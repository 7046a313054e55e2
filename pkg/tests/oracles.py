"""Independent reference computations used by the test-suite.

These deliberately avoid the package's vectorised code paths: plain Python
loops over floats, brute-force enumeration, sorting.
"""

import itertools
import math

import numpy as np


def _mv(W, x):
    return [sum(w * v for w, v in zip(row, x)) for row in W]


def straight_line_forward(params, X):
    """Logits, attentions and pooled vector of one bag, scalar loops only."""
    p = {k: v.tolist() for k, v in params.items()}
    H = []
    for x in X.tolist():
        g = [math.tanh(a + b) for a, b in zip(_mv(p["psi_w1"], x), p["psi_b1"])]
        H.append([math.tanh(a + b) for a, b in zip(_mv(p["psi_w2"], g), p["psi_b2"])])
    scores = [sum(w * math.tanh(a) for w, a in zip(p["att_w"], _mv(p["att_v"], h))) for h in H]
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    alpha = [v / sum(e) for v in e]
    z = [sum(alpha[i] * H[i][k] for i in range(len(H))) for k in range(len(H[0]))]
    u = [math.tanh(a + b) for a, b in zip(_mv(p["head_w1"], z), p["head_b1"])]
    logits = [a + b for a, b in zip(_mv(p["head_w2"], u), p["head_b2"])]
    return logits, alpha, z, H


def nll(logits, target):
    top = max(logits)
    return -(logits[target] - top - math.log(sum(math.exp(v - top) for v in logits)))


def bce_soft(old, new, k):
    total = 0.0
    for j in range(k):
        s = 1.0 / (1.0 + math.exp(-old[j]))
        q = 1.0 / (1.0 + math.exp(-new[j]))
        total -= s * math.log(q) + (1.0 - s) * math.log(1.0 - q)
    return total


def brute_force_knapsack(values, costs, capacity):
    """Best total value over all subsets."""
    best = 0.0
    n = len(values)
    for mask in range(1 << n):
        c = v = 0
        for i in range(n):
            if mask >> i & 1:
                c += costs[i]
                v += values[i]
        if c <= capacity and v > best:
            best = v
    return best


def enumerate_knapsack(values, costs, capacity):
    """Best total value over all 2**n subsets, enumerated as a bit matrix."""
    n = len(values)
    if n == 0:
        return 0
    masks = np.arange(1 << n, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n)) & 1
    cost = bits @ np.asarray(costs, dtype=np.int64)
    value = bits @ np.asarray(values, dtype=np.int64)
    return int(value[cost <= capacity].max())


def top_m(values, m):
    """Indices of the m largest values, ties resolved towards lower index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(order[:m])


def subsets_best(values, m):
    """Brute force: best subset of size <= m for unit costs (value only)."""
    best = 0.0
    for r in range(min(m, len(values)) + 1):
        for combo in itertools.combinations(range(len(values)), r):
            best = max(best, sum(values[i] for i in combo))
    return best


def chaudhry_forgetting(a):
    T = len(a)
    drops = []
    for j in range(T - 1):
        drops.append(max(a[t][j] for t in range(j, T - 1)) - a[T - 1][j])
    return sum(drops) / len(drops)
