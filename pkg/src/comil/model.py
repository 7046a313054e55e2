"""Attention-based MIL network over pre-extracted instance feature vectors.

Instances of a bag pass through a two-layer tanh transform (``psi``), are
scored by an ungated tanh attention ``w . tanh(V h)``, softmax-normalised
over the bag, pooled into one bag vector and classified by a two-layer head
whose output rows grow as new classes arrive.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .mathcore import as_vec, softmax, tanh_grad_from_output

PARAM_NAMES = (
    "psi_w1",
    "psi_b1",
    "psi_w2",
    "psi_b2",
    "att_v",
    "att_w",
    "head_w1",
    "head_b1",
    "head_w2",
    "head_b2",
)

CHECKPOINT_MAGIC = b"CML1"
CHECKPOINT_VERSION = 1


@dataclass
class Bag:
    """A labelled set of instances; ``instances`` is an (N, d_in) array."""

    bag_id: str
    label: int
    instances: np.ndarray

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] == 0:
            raise ContractError(f"bag {self.bag_id!r} must hold a nonempty (N, d) array")

    def __len__(self):
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]


@dataclass
class BagOutput:
    logits: np.ndarray
    attentions: np.ndarray
    bag_feature: np.ndarray
    instance_features: np.ndarray


@dataclass
class MilModel:
    psi_w1: np.ndarray
    psi_b1: np.ndarray
    psi_w2: np.ndarray
    psi_b2: np.ndarray
    att_v: np.ndarray
    att_w: np.ndarray
    head_w1: np.ndarray
    head_b1: np.ndarray
    head_w2: np.ndarray
    head_b2: np.ndarray
    class_ids: List[int] = field(default_factory=list)

    @classmethod
    def init(cls, d_in=16, d=16, attn_dim=8, hidden=16, class_ids=(), seed=0) -> "MilModel":
        """Seeded Gaussian init scaled by ``1/sqrt(fan_in)``; biases zero."""
        rng = np.random.default_rng(seed)

        def dense(rows, cols):
            return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

        n = len(class_ids)
        return cls(
            psi_w1=dense(d, d_in),
            psi_b1=np.zeros(d),
            psi_w2=dense(d, d),
            psi_b2=np.zeros(d),
            att_v=dense(attn_dim, d),
            att_w=rng.normal(0.0, 1.0 / np.sqrt(attn_dim), size=attn_dim),
            head_w1=dense(hidden, d),
            head_b1=np.zeros(hidden),
            head_w2=dense(n, hidden) if n else np.zeros((0, hidden)),
            head_b2=np.zeros(n),
            class_ids=list(class_ids),
        )

    @property
    def d_in(self) -> int:
        return self.psi_w1.shape[1]

    @property
    def d(self) -> int:
        return self.psi_w1.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.att_v.shape[0]

    @property
    def hidden(self) -> int:
        return self.head_w1.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def params(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params) -> "MilModel":
        return replace(self, class_ids=list(self.class_ids), **{k: params[k] for k in PARAM_NAMES})

    def copy(self) -> "MilModel":
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def class_index(self, label: int) -> int:
        try:
            return self.class_ids.index(label)
        except ValueError:
            raise ContractError(f"label {label} unknown to model (classes {self.class_ids})") from None


def psi(model: MilModel, X) -> np.ndarray:
    """Instance feature transform, row-wise over an (N, d_in) array."""
    X = as_vec(X)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ShapeError(f"instances of shape {X.shape} do not match model d_in={model.d_in}")
    g = np.tanh(X @ model.psi_w1.T + model.psi_b1)
    return np.tanh(g @ model.psi_w2.T + model.psi_b2)


def attention_scores(features, V, w) -> np.ndarray:
    """Softmax over instances of ``w . tanh(V h_i)``."""
    H, V, w = as_vec(features), as_vec(V), as_vec(w)
    if H.ndim == 1:
        H = H.reshape(1, -1) if H.size else H.reshape(0, 0)
    if H.shape[0] == 0:
        raise ContractError("attention over an empty bag")
    if V.ndim != 2 or H.shape[1] != V.shape[1] or w.shape != (V.shape[0],):
        raise ShapeError(f"attention shapes disagree: h{H.shape} V{V.shape} w{w.shape}")
    return softmax(np.tanh(H @ V.T) @ w)


def pool(features, attentions) -> np.ndarray:
    """Attention-weighted sum of instance features."""
    H, a = as_vec(features), as_vec(attentions)
    if H.ndim != 2 or a.ndim != 1 or H.shape[0] != a.shape[0]:
        raise ContractError(f"pool needs one weight per instance: h{H.shape} a{a.shape}")
    if abs(a.sum() - 1.0) > 1e-6:
        raise ContractError(f"attentions sum to {a.sum()}, expected 1")
    return a @ H


def _instances(model: MilModel, bag) -> np.ndarray:
    X = bag.instances if isinstance(bag, Bag) else as_vec(bag)
    if X.ndim != 2 or X.shape[1] != model.d_in:
        raise ShapeError(f"bag instances {X.shape} do not match model d_in={model.d_in}")
    return X


def forward_cache(model: MilModel, bag) -> dict:
    """Forward pass keeping every intermediate needed by :func:`backward`."""
    X = _instances(model, bag)
    g = np.tanh(X @ model.psi_w1.T + model.psi_b1)
    H = np.tanh(g @ model.psi_w2.T + model.psi_b2)
    t = np.tanh(H @ model.att_v.T)
    alpha = softmax(t @ model.att_w)
    z = alpha @ H
    u = np.tanh(model.head_w1 @ z + model.head_b1)
    logits = model.head_w2 @ u + model.head_b2
    return {"X": X, "g": g, "H": H, "t": t, "alpha": alpha, "z": z, "u": u, "logits": logits}


def forward(model: MilModel, bag) -> BagOutput:
    c = forward_cache(model, bag)
    return BagOutput(logits=c["logits"], attentions=c["alpha"], bag_feature=c["z"], instance_features=c["H"])


def logits(model: MilModel, bag) -> np.ndarray:
    return forward_cache(model, bag)["logits"]


def backward(model: MilModel, cache: dict, d_logits: np.ndarray) -> Dict[str, np.ndarray]:
    """Parameter gradients given the upstream gradient on the logits."""
    X, g, H, t, alpha, z, u = (cache[k] for k in ("X", "g", "H", "t", "alpha", "z", "u"))
    grads = {}
    grads["head_b2"] = d_logits.copy()
    grads["head_w2"] = np.outer(d_logits, u)
    d_pre_u = (model.head_w2.T @ d_logits) * tanh_grad_from_output(u)
    grads["head_b1"] = d_pre_u
    grads["head_w1"] = np.outer(d_pre_u, z)
    dz = model.head_w1.T @ d_pre_u

    dH = np.outer(alpha, dz)
    d_alpha = H @ dz
    d_score = alpha * (d_alpha - alpha @ d_alpha)
    grads["att_w"] = d_score @ t
    d_pre_t = np.outer(d_score, model.att_w) * tanh_grad_from_output(t)
    grads["att_v"] = d_pre_t.T @ H
    dH += d_pre_t @ model.att_v

    d_pre_h = dH * tanh_grad_from_output(H)
    grads["psi_w2"] = d_pre_h.T @ g
    grads["psi_b2"] = d_pre_h.sum(axis=0)
    d_pre_g = (d_pre_h @ model.psi_w2) * tanh_grad_from_output(g)
    grads["psi_w1"] = d_pre_g.T @ X
    grads["psi_b1"] = d_pre_g.sum(axis=0)
    return grads


def expand_head(model: MilModel, new_classes: Sequence[int], seed=0) -> MilModel:
    """Append one output row per new class; existing parameters are copied untouched."""
    new_classes = list(new_classes)
    dup = set(new_classes) & set(model.class_ids)
    if dup or len(set(new_classes)) != len(new_classes):
        raise ContractError(f"duplicate classes in head expansion: {sorted(dup) or new_classes}")
    out = model.copy()
    if not new_classes:
        return out
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 0.01, size=(len(new_classes), model.hidden))
    out.head_w2 = np.vstack([model.head_w2, rows])
    out.head_b2 = np.concatenate([model.head_b2, np.zeros(len(new_classes))])
    out.class_ids = model.class_ids + new_classes
    return out


def save_model(model: MilModel) -> bytes:
    """Serialise to the CML1 container (little-endian)."""
    header = struct.pack(
        "<4sIIIIII",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        model.d_in,
        model.d,
        model.attn_dim,
        model.hidden,
        model.num_classes,
    )
    ids = struct.pack(f"<{model.num_classes}q", *model.class_ids)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params().values())
    return header + ids + body


def load_model(data: bytes) -> MilModel:
    hsize = struct.calcsize("<4sIIIIII")
    if len(data) < hsize:
        raise FormatError(f"checkpoint truncated in header at offset {len(data)}")
    magic, version, d_in, d, D, hidden, n = struct.unpack_from("<4sIIIIII", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    off = hsize
    if len(data) < off + 8 * n:
        raise FormatError(f"checkpoint truncated in class ids at offset {len(data)}")
    class_ids = list(struct.unpack_from(f"<{n}q", data, off))
    off += 8 * n
    shapes = {
        "psi_w1": (d, d_in),
        "psi_b1": (d,),
        "psi_w2": (d, d),
        "psi_b2": (d,),
        "att_v": (D, d),
        "att_w": (D,),
        "head_w1": (hidden, d),
        "head_b1": (hidden,),
        "head_w2": (n, hidden),
        "head_b2": (n,),
    }
    params = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        end = off + 8 * count
        if len(data) < end:
            raise FormatError(f"checkpoint truncated in {name} at offset {len(data)}")
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off = end
    if off != len(data):
        raise FormatError(f"trailing bytes after checkpoint at offset {off}")
    return MilModel(**params, class_ids=class_ids)


def predict(model: MilModel, bag) -> int:
    """Class id with the largest logit."""
    return model.class_ids[int(np.argmax(logits(model, bag)))]
