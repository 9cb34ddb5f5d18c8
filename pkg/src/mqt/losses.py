"""Per-task training losses and their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    constant,
    log_softmax,
    mul,
    scale,
    softplus,
    sub,
    tabs,
    take_last,
    tsum,
)


@dataclass(frozen=True)
class LossWeights:
    seg: float = 1.0
    depth: float = 1.0
    normals: float = 10.0
    edge: float = 50.0
    partseg: float = 2.0
    sal: float = 5.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ContractError(f"loss weight {k} must be nonnegative, got {v}")

    def __getitem__(self, kind: str) -> float:
        return getattr(self, kind)

    @classmethod
    def from_dict(cls, d: Mapping[str, float], configured_kinds=None) -> "LossWeights":
        if configured_kinds is not None:
            defaults = asdict(cls())
            for k, v in d.items():
                # a serialized config carries every weight; only overrides are worth a warning
                if k not in configured_kinds and v != defaults.get(k):
                    warnings.warn(f"loss weight for unconfigured task kind {k!r} is ignored")
        unknown = set(d) - set(asdict(cls()))
        if unknown:
            raise ContractError(f"unknown loss weight keys {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


def _valid(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise DimensionError(f"mask shape {mask.shape} vs map {tuple(shape)}")
    return mask


def _weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(mul(x, constant(weights, dtype=x.dtype)))


def loss_cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Mean over valid pixels of -log softmax(logits)[target]."""
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"cross entropy: target {target.shape} vs logits {logits.shape}")
    valid = _valid(target.shape, mask)
    if np.any((target[valid] < 0) | (target[valid] >= k)):
        raise ContractError(f"class index outside 0..{k - 1}")
    n = int(valid.sum())
    if n == 0:
        raise ContractError("cross entropy: no valid pixels")
    idx = np.where(valid, target, 0)
    picked = take_last(log_softmax(logits), idx)
    return scale(_weighted_sum(picked, valid / n), -1.0)


def loss_l1(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error over valid pixels (and all channels)."""
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise DimensionError(f"l1: target {target.shape} vs prediction {pred.shape}")
    valid = _valid(target.shape[:2], mask)
    w = np.broadcast_to(valid.reshape(valid.shape + (1,) * (target.ndim - 2)), target.shape)
    n = int(w.sum())
    if n == 0:
        raise ContractError("l1: no valid pixels")
    diff = tabs(sub(pred, constant(target, dtype=pred.dtype)))
    return _weighted_sum(diff, w / n)


def _binary_terms(logits: Tensor, target, mask=None):
    target = np.asarray(target)
    if target.shape != logits.shape[:2]:
        raise DimensionError(f"binary loss: target {target.shape} vs logits {logits.shape}")
    if logits.data.ndim == 3 and logits.shape[2] != 1:
        raise DimensionError(f"binary loss expects one channel, got {logits.shape}")
    y = target.reshape(logits.shape).astype(np.float64)
    if np.any((y != 0) & (y != 1)):
        raise ContractError("binary loss: targets must be 0 or 1")
    valid = _valid(target.shape, mask).reshape(logits.shape)
    return y, valid


def _bce(logits: Tensor, y: np.ndarray, w_pos: np.ndarray, w_neg: np.ndarray) -> Tensor:
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    pos = _weighted_sum(softplus(scale(logits, -1.0)), w_pos * y)
    neg = _weighted_sum(softplus(logits), w_neg * (1.0 - y))
    return add(pos, neg)


def loss_balanced_bce(logits: Tensor, target, mask=None) -> Tensor:
    """Class-balanced BCE: positives weighted by #neg/#total, negatives by #pos/#total.

    A target without positives (or without negatives) puts weight 1 on the
    class that is present, so the loss stays informative and finite.
    """
    y, valid = _binary_terms(logits, target, mask)
    n = int(valid.sum())
    if n == 0:
        raise ContractError("balanced bce: no valid pixels")
    n_pos = float((y * valid).sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        beta_pos, beta_neg = 1.0, 1.0
    else:
        beta_pos, beta_neg = n_neg / n, n_pos / n
    return _bce(logits, y, valid * beta_pos / n, valid * beta_neg / n)


def loss_bce(logits: Tensor, target, mask=None) -> Tensor:
    """Plain binary cross entropy (two-class cross entropy on one logit)."""
    y, valid = _binary_terms(logits, target, mask)
    n = int(valid.sum())
    if n == 0:
        raise ContractError("bce: no valid pixels")
    w = valid / n
    return _bce(logits, y, w, w)


def total_loss(losses: Mapping[str, Tensor | float], weights: LossWeights = LossWeights()):
    """Sum of weight[kind] * loss over the kinds present in ``losses``."""
    total = None
    for kind, value in losses.items():
        try:
            lam = weights[kind]
        except AttributeError:
            raise ContractError(f"no loss weight for task kind {kind!r}") from None
        term = scale(value, lam) if isinstance(value, Tensor) else lam * float(value)
        if total is None:
            total = term
        elif isinstance(total, Tensor) or isinstance(term, Tensor):
            total = add(_scalar(total, term), _scalar(term, total))
        else:
            total = total + term
    return 0.0 if total is None else total


def _scalar(x, like) -> Tensor:
    if isinstance(x, Tensor):
        return x
    ref = like if isinstance(like, Tensor) else None
    return constant(np.asarray(x), dtype=ref.dtype if ref is not None else None)


def task_loss(kind: str, pred: Tensor, target, mask=None) -> Tensor:
    if kind in ("seg", "partseg"):
        return loss_cross_entropy(pred, target, mask)
    if kind in ("depth", "normals"):
        target = np.asarray(target)
        if target.ndim == pred.data.ndim - 1:
            target = target[..., None]
        return loss_l1(pred, target, mask)
    if kind == "edge":
        return loss_balanced_bce(pred, target, mask)
    if kind == "sal":
        return loss_bce(pred, target, mask)
    raise ContractError(f"unknown task kind {kind!r}")
