"""Scalar loss functions with fused, numerically stable adjoints."""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError, ValidationError
from .tensor import Tensor, _make, _sigmoid_np


def cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x S logits, got {logits.shape}")
    target = np.asarray(target_index)
    b, s = logits.shape
    if target.shape != (b,):
        raise DimensionError(f"cross_entropy: targets of shape {target.shape} for {b} rows")
    if not np.issubdtype(target.dtype, np.integer):
        if not np.all(np.mod(target, 1) == 0):
            raise IndexError("cross_entropy: target ids must be integers")
        target = target.astype(np.int64)
    if np.any(target < 0) or np.any(target >= s):
        raise IndexError(f"cross_entropy: target ids must lie in [0, {s})")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(b)
    loss = -logp[rows, target].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, target] -= 1.0
        return (g * p / b,)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean over all entries of the sigmoid binary cross-entropy.

    Uses ``max(x, 0) - x*y + log1p(exp(-|x|))`` so large logits never overflow.
    """
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce: targets must be binary (0 or 1)")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * (_sigmoid_np(x) - y) / n,)

    return _make(np.asarray(per.mean()), (logits,), backward, "bce_with_logits")


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the rows selected by ``mask``.

    ``pred`` and ``target`` are ``(B, N, P)``; ``mask`` is ``(B, N)`` with 1 for
    rows that count. Each selected row contributes its per-element mean.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape or mask.shape != pred.shape[:2]:
        raise DimensionError(f"masked_mse: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    diff = pred.data - target
    per_row = (diff * diff).mean(axis=-1)
    denom = mask.sum()
    if denom == 0:
        raise ValidationError("masked_mse: mask selects no rows")
    loss = (per_row * mask).sum() / denom
    p = pred.shape[-1]

    def backward(g):
        return (g * 2.0 * diff * mask[..., None] / (denom * p),)

    return _make(np.asarray(loss), (pred,), backward, "masked_mse")
