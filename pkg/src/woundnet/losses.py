"""Training objectives: softmax cross-entropy, BCE-with-logits, and their sum.

Both losses take raw logits (the activation is folded in for numerical
stability) and return the scalar loss together with the analytic gradient
with respect to the logits, mean-reduced.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of [B,C] logits, stabilized by max subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cross_entropy(class_logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of the true class under the softmax.

    class_logits [B,C], labels [B] ints in [0,C) -> (loss, grad_logits [B,C])
    with grad = (softmax - onehot) / B.
    """
    if class_logits.ndim != 2:
        raise ShapeError(f"class logits must be [B,C], got {class_logits.shape}")
    b, c = class_logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0,{c}), got {labels.tolist()}")

    z = class_logits - class_logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())

    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad.astype(class_logits.dtype, copy=False)


def bce_with_logits(mask_logits: np.ndarray, target_mask: np.ndarray):
    """Sigmoid + binary cross-entropy on raw scores, mean over all elements.

    Uses the log-sum-exp-stable form max(x,0) - x*y + log(1 + exp(-|x|)),
    so no overflow for |x| up to at least 1e4. grad = (sigmoid(x) - y) / N.
    """
    if mask_logits.shape != target_mask.shape:
        raise ShapeError(f"logits {mask_logits.shape} != target {target_mask.shape}")
    if not np.all((target_mask == 0) | (target_mask == 1)):
        raise ValueError("target mask must be binary (0/1)")
    x, y = mask_logits, target_mask
    per_elem = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = float(per_elem.mean())
    grad = (sigmoid(x) - y) / x.size
    return loss, grad.astype(mask_logits.dtype, copy=False)


def total_loss(cls: float, seg: float) -> float:
    """Joint objective: exact sum of the two loss terms."""
    return cls + seg
