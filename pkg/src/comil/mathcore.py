"""Dense float64 kernels: affine maps, activations, SGD and a gradient oracle.

Everything here is pure; arrays passed in are never mutated.
"""

from __future__ import annotations

from typing import Callable, Mapping, Union

import numpy as np

from .errors import ContractError, OracleError, ShapeError

Params = Mapping[str, np.ndarray]
ParamLike = Union[Params, np.ndarray, float]


def as_vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def affine(x, W, b) -> np.ndarray:
    """Return ``W @ x + b``.

    ``x`` may be a single vector or a stack of row vectors (N x cols), in
    which case the map is applied row-wise.
    """
    x, W, b = as_vec(x), as_vec(W), as_vec(b)
    if W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine expects a matrix and a bias vector, got W{W.shape} b{b.shape}")
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def softmax(s) -> np.ndarray:
    s = as_vec(s)
    if s.size == 0:
        raise ContractError("softmax of an empty vector")
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax(s) -> np.ndarray:
    s = as_vec(s)
    if s.size == 0:
        raise ContractError("log_softmax of an empty vector")
    shifted = s - s.max()
    return shifted - np.log(np.exp(shifted).sum())


def sigmoid(x) -> np.ndarray:
    x = as_vec(x)
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x) -> np.ndarray:
    """``log(1 + exp(x))`` without overflow."""
    return np.logaddexp(0.0, as_vec(x))


def tanh_grad_from_output(t: np.ndarray) -> np.ndarray:
    return 1.0 - t * t


def _check_congruent(params: Params, grads: Params) -> None:
    if set(params) != set(grads):
        raise ContractError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        if np.shape(p) != np.shape(grads[name]):
            raise ContractError(
                f"gradient for {name!r} has shape {np.shape(grads[name])}, parameter has {np.shape(p)}"
            )


def sgd_step(params: ParamLike, grads: ParamLike, lr: float):
    """One plain SGD update ``p - lr * g``; returns new parameters."""
    if not lr >= 0.0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    if isinstance(params, Mapping):
        _check_congruent(params, grads)
        return {k: p - lr * grads[k] for k, p in params.items()}
    p, g = as_vec(params), as_vec(grads)
    if p.shape != g.shape:
        raise ContractError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    out = p - lr * g
    return float(out) if out.ndim == 0 else out


def finite_diff_grad(f: Callable, params: ParamLike, eps: float = 1e-5):
    """Central-difference gradient of a scalar function.

    ``params`` is either a mapping of named arrays (``f`` receives a mapping
    of the same structure) or a single array/float.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")

    if not isinstance(params, Mapping):
        scalar = np.ndim(params) == 0
        wrapped = {"p": np.array(params, dtype=np.float64)}

        def call(d):
            return f(float(d["p"]) if scalar else d["p"])

        g = finite_diff_grad(call, wrapped, eps)["p"]
        return float(g) if scalar else g

    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(base))
            flat[i] = orig - eps
            lo = float(f(base))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleError(f"non-finite evaluation perturbing {name}[{i}]")
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads
