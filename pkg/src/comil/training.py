"""Losses and the per-task SGD loop.

The distillation term is binary cross-entropy between the sigmoid of the
frozen previous model's logits (soft targets) and the sigmoid of the current
logits, summed over the classes the previous model knew.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DivergenceError
from .mathcore import as_vec, log_softmax, sgd_step, sigmoid, softmax, softplus
from .model import Bag, MilModel, backward, forward_cache, logits

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    dist: float
    total: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    shuffle_seed: int = 0
    distill_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr >= 0:
            raise ContractError(f"lr must be non-negative, got {self.lr}")


def classification_loss(logits_, target: int) -> float:
    """Negative log-likelihood of ``target`` under softmax(logits)."""
    z = as_vec(logits_)
    if not 0 <= target < z.shape[0]:
        raise ContractError(f"target {target} out of range for {z.shape[0]} logits")
    return float(-log_softmax(z)[target])


def _check_old_count(old, new, old_class_count):
    if old_class_count < 0 or old_class_count > old.shape[0] or old_class_count > new.shape[0]:
        raise ContractError(
            f"old_class_count={old_class_count} exceeds logits (old {old.shape[0]}, new {new.shape[0]})"
        )


def distillation_loss(old_logits, new_logits, old_class_count: int) -> float:
    old, new = as_vec(old_logits), as_vec(new_logits)
    _check_old_count(old, new, old_class_count)
    k = old_class_count
    if k == 0:
        return 0.0
    s_pos = sigmoid(old[:k])
    s_neg = sigmoid(-old[:k])
    # BCE(s, sigmoid(x)) = s * softplus(-x) + (1 - s) * softplus(x)
    return float(np.sum(s_pos * softplus(-new[:k]) + s_neg * softplus(new[:k])))


def distillation_grad(old_logits, new_logits, old_class_count: int) -> np.ndarray:
    old, new = as_vec(old_logits), as_vec(new_logits)
    _check_old_count(old, new, old_class_count)
    g = np.zeros_like(new)
    k = old_class_count
    g[:k] = sigmoid(new[:k]) - sigmoid(old[:k])
    return g


def _loss_parts(model, prev_model, bag) -> Tuple[dict, float, float, np.ndarray]:
    target = model.class_index(bag.label)
    cache = forward_cache(model, bag)
    z = cache["logits"]
    cls = classification_loss(z, target)
    d_logits = softmax(z)
    d_logits[target] -= 1.0
    dist = 0.0
    if prev_model is not None:
        old = logits(prev_model, bag)
        k = prev_model.num_classes
        dist = distillation_loss(old, z, k)
        d_logits += distillation_grad(old, z, k)
    return cache, cls, dist, d_logits


def combined_loss(model: MilModel, prev_model: Optional[MilModel], bag: Bag) -> LossBreakdown:
    """Classification plus distillation loss on one bag."""
    _, cls, dist, _ = _loss_parts(model, prev_model, bag)
    return LossBreakdown(cls=cls, dist=dist, total=cls + dist)


def combined_loss_and_grads(model: MilModel, prev_model: Optional[MilModel], bag: Bag):
    cache, cls, dist, d_logits = _loss_parts(model, prev_model, bag)
    return LossBreakdown(cls=cls, dist=dist, total=cls + dist), backward(model, cache, d_logits)


def train_task(
    model: MilModel,
    prev_model: Optional[MilModel],
    train_bags: Sequence[Bag],
    cfg: TrainConfig,
) -> MilModel:
    """Run ``cfg.epochs`` passes of per-bag SGD and return the updated model.

    Bag order is reshuffled every epoch with seed ``shuffle_seed + epoch``.
    ``prev_model`` is only consulted when ``cfg.distill_enabled`` is set.
    """
    teacher = prev_model if cfg.distill_enabled else None
    if teacher is not None and teacher.class_ids != model.class_ids[: teacher.num_classes]:
        raise ContractError("previous model classes must prefix the current model classes")
    for bag in train_bags:
        model.class_index(bag.label)

    params = {k: v.copy() for k, v in model.params().items()}
    current = model.with_params(params)
    bags = list(train_bags)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(cfg.shuffle_seed + epoch).permutation(len(bags))
        epoch_loss = 0.0
        for i in order:
            bag = bags[i]
            parts, grads = combined_loss_and_grads(current, teacher, bag)
            if not np.isfinite(parts.total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} on bag {bag.bag_id!r}", epoch=epoch, bag_id=bag.bag_id
                )
            epoch_loss += parts.total
            if cfg.lr > 0:
                current = current.with_params(sgd_step(current.params(), grads, cfg.lr))
        log.debug("epoch %d mean loss %.5f", epoch, epoch_loss / max(len(bags), 1))
    return current
