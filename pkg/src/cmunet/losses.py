"""Training objective: cross-entropy plus Dice, with weighted aux heads."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionError
from . import functional as F
from . import tensor as T
from .tensor import Tensor, _make

DICE_EPS = 1e-6


def _check_target(logits, target):
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        target = target.astype(np.int64)
    k = logits.data.shape[1]
    if target.shape != (logits.data.shape[0],) + logits.data.shape[2:]:
        raise DimensionError(f"target shape {target.shape} does not match logits")
    if target.min() < 0 or target.max() >= k:
        raise DataError(f"target classes must lie in [0, {k})")
    return target


def cross_entropy(logits, target):
    """Mean over pixels of -log softmax probability of the true class."""
    target = _check_target(logits, target)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    picked = np.take_along_axis(log_probs, target[:, None], axis=1)[:, 0]
    n = picked.size
    out = -picked.sum() / n

    def backward(g):
        soft = np.exp(log_probs)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
        return ((soft - onehot) * (g / n),)

    return _make(np.asarray(out, dtype=x.dtype), (logits,), backward)


def dice_loss(logits, target):
    """1 - mean class overlap, computed per class over the whole batch."""
    target = _check_target(logits, target)
    k = logits.data.shape[1]
    onehot = np.zeros(logits.data.shape, dtype=logits.data.dtype)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    probs = F.softmax_channel(logits, axis=1)
    axes = (0,) + tuple(range(2, logits.data.ndim))
    inter = (probs * Tensor(onehot)).sum(axis=axes)              # [K]
    sums = probs.sum(axis=axes) + Tensor(onehot.sum(axis=axes))  # [K]
    dice = (2.0 * inter + DICE_EPS) / (sums + DICE_EPS)
    return 1.0 - dice.mean()


def downsample_target(target, size):
    """Nearest-neighbor label downsampling (same index rule as resize)."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    h, w = target.shape[-2:]
    h2, w2 = size
    ri = np.minimum((np.arange(h2) * h) // h2, h - 1)
    ci = np.minimum((np.arange(w2) * w) // w2, w - 1)
    return target[..., ri[:, None], ci[None, :]]


def total_loss(outputs, target, aux_weight=0.4):
    """(ce + dice) on the final head plus weighted mean over aux heads.

    Aux targets come from nearest-neighbor downsampling of the label map.
    """
    loss = cross_entropy(outputs.final_logits, target) + dice_loss(outputs.final_logits, target)
    if not outputs.aux_logits:
        return loss
    aux_terms = None
    for aux in outputs.aux_logits:
        t = downsample_target(target, aux.data.shape[2:])
        term = cross_entropy(aux, t) + dice_loss(aux, t)
        aux_terms = term if aux_terms is None else aux_terms + term
    return loss + aux_weight * aux_terms * (1.0 / len(outputs.aux_logits))
