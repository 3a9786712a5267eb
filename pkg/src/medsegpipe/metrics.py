"""Segmentation metrics and losses.

Hard metrics take label maps (ClassMap or integer arrays).  Soft metrics
take channel-first score arrays ``(n_classes, ...)`` paired with one-hot
ground truth of the same shape; ``axis`` selects another channel axis
(e.g. ``axis=1`` for a ``(batch, classes, ...)`` array).  All reductions run
in float64.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .volume import ClassMap

DEFAULT_EPS = 1e-5
CE_CLAMP = 1e-7


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _labels(x):
    return x.data if isinstance(x, ClassMap) else np.asarray(x)


def _pair(pred, truth):
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} vs ground truth {t.shape}")
    return p, t


def confusion_counts(pred, truth, c):
    """One-vs-rest counts for class ``c``."""
    p, t = _pair(pred, truth)
    pc, tc = p == c, t == c
    tp = int(np.count_nonzero(pc & tc))
    fp = int(np.count_nonzero(pc & ~tc))
    fn = int(np.count_nonzero(~pc & tc))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _dice_from_counts(cc):
    denom = 2 * cc.tp + cc.fp + cc.fn
    return 1.0 if denom == 0 else 2.0 * cc.tp / denom


def _jaccard_from_counts(cc):
    denom = cc.tp + cc.fp + cc.fn
    return 1.0 if denom == 0 else cc.tp / denom


def dice_hard(pred, truth, c):
    """Dice of class ``c``; a class absent from both maps scores 1.0."""
    return _dice_from_counts(confusion_counts(pred, truth, c))


def dice_classwise(pred, truth, n_classes=None):
    """Hard Dice per class id ``0 .. n_classes-1``."""
    if n_classes is None:
        n_classes = next(
            (x.n_classes for x in (pred, truth) if isinstance(x, ClassMap)),
            int(max(_labels(pred).max(), _labels(truth).max())) + 1,
        )
    return np.array([dice_hard(pred, truth, c) for c in range(n_classes)])


def jaccard(pred, truth, c):
    """Jaccard index of class ``c``; both-empty scores 1.0."""
    return _jaccard_from_counts(confusion_counts(pred, truth, c))


def jaccard_classwise(pred, truth, n_classes):
    return np.array([jaccard(pred, truth, c) for c in range(n_classes)])


def _flat_scores(pred_scores, truth_onehot, axis):
    p = np.asarray(pred_scores, dtype=np.float64)
    g = np.asarray(truth_onehot, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"score shape {p.shape} vs one-hot truth {g.shape}")
    p = np.moveaxis(p, axis, 0).reshape(p.shape[axis], -1)
    g = np.moveaxis(g, axis, 0).reshape(g.shape[axis], -1)
    return p, g


def dice_soft_classwise(pred_scores, truth_onehot, eps=DEFAULT_EPS, axis=0):
    p, g = _flat_scores(pred_scores, truth_onehot, axis)
    inter = (p * g).sum(axis=1)
    return (2.0 * inter + eps) / (p.sum(axis=1) + g.sum(axis=1) + eps)


def dice_soft(pred_scores, truth_onehot, eps=DEFAULT_EPS, axis=0):
    """Unweighted class mean of ``(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)``."""
    return float(dice_soft_classwise(pred_scores, truth_onehot, eps, axis).mean())


def tversky_index(pred_scores, truth_onehot, alpha=0.5, beta=0.5, eps=DEFAULT_EPS, axis=0):
    """Per-class soft Tversky index; ``alpha`` weights false positives, ``beta`` false negatives.

    Smoothing ``eps`` sits in numerator and denominator, so a class absent
    from both prediction and truth scores 1.  With ``alpha = beta = 0.5``
    this equals the soft Dice computed with ``2 * eps``.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("tversky alpha and beta must be >= 0")
    p, g = _flat_scores(pred_scores, truth_onehot, axis)
    tp = (p * g).sum(axis=1)
    fp = (p * (1.0 - g)).sum(axis=1)
    fn = ((1.0 - p) * g).sum(axis=1)
    return (tp + eps) / (tp + alpha * fp + beta * fn + eps)


def tversky_loss(pred_scores, truth_onehot, alpha=0.5, beta=0.5, eps=DEFAULT_EPS, axis=0):
    return float(1.0 - tversky_index(pred_scores, truth_onehot, alpha, beta, eps, axis).mean())


def categorical_crossentropy(pred_scores, truth_onehot, axis=0):
    """Voxel mean of ``-sum_c g_c log p_c`` with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    p, g = _flat_scores(pred_scores, truth_onehot, axis)
    p = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return float(-(g * np.log(p)).sum(axis=0).mean())


def combined_loss(pred_scores, truth_onehot, eps=DEFAULT_EPS, axis=0):
    """Cross-entropy minus soft Dice (lower is better, may be negative)."""
    return categorical_crossentropy(pred_scores, truth_onehot, axis) - dice_soft(
        pred_scores, truth_onehot, eps, axis
    )


def accuracy(pred_scores, truth_onehot, axis=0):
    p, g = _flat_scores(pred_scores, truth_onehot, axis)
    return float(np.mean(np.argmax(p, axis=0) == np.argmax(g, axis=0)))


# Losses with their gradient w.r.t. the flattened scores ``p`` of shape
# (n_classes, n_voxels).  Used by training; each returns (loss, dL/dp).


def _tversky_grad(p, g, alpha, beta, eps):
    tp = (p * g).sum(axis=1, keepdims=True)
    fp = (p * (1.0 - g)).sum(axis=1, keepdims=True)
    fn = ((1.0 - p) * g).sum(axis=1, keepdims=True)
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    index = num / den
    d_den = g + alpha * (1.0 - g) - beta * g
    d_index = (g * den - num * d_den) / den**2
    n_classes = p.shape[0]
    return float(1.0 - index.mean()), -d_index / n_classes


def _crossentropy_grad(p, g):
    n_voxels = p.shape[1]
    inside = (p > CE_CLAMP) & (p < 1.0 - CE_CLAMP)
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    loss = float(-(g * np.log(pc)).sum(axis=0).mean())
    grad = np.where(inside, -g / pc, 0.0) / n_voxels
    return loss, grad


def _dice_soft_grad(p, g, eps):
    inter = (p * g).sum(axis=1, keepdims=True)
    s = p.sum(axis=1, keepdims=True) + g.sum(axis=1, keepdims=True) + eps
    d = (2.0 * inter + eps) / s
    grad = (2.0 * g * s - (2.0 * inter + eps)) / s**2
    n_classes = p.shape[0]
    return float(d.mean()), grad / n_classes


def loss_and_grad(selector, p, g, alpha=0.5, beta=0.5, eps=DEFAULT_EPS):
    """Loss value and its gradient for flattened ``(n_classes, n_voxels)`` arrays."""
    if selector == "tversky":
        return _tversky_grad(p, g, alpha, beta, eps)
    if selector == "crossentropy":
        return _crossentropy_grad(p, g)
    if selector == "combined":
        ce, d_ce = _crossentropy_grad(p, g)
        dice, d_dice = _dice_soft_grad(p, g, eps)
        return ce - dice, d_ce - d_dice
    raise ValueError(f"unknown loss '{selector}'")


LOSS_SELECTORS = ("tversky", "crossentropy", "combined")

# soft metrics that can be logged while fitting: name -> f(scores, onehot, axis)
SOFT_METRICS = {
    "dice_soft": lambda p, g, axis=0: dice_soft(p, g, axis=axis),
    "tversky_loss": lambda p, g, axis=0: tversky_loss(p, g, axis=axis),
    "crossentropy": lambda p, g, axis=0: categorical_crossentropy(p, g, axis=axis),
    "combined_loss": lambda p, g, axis=0: combined_loss(p, g, axis=axis),
    "accuracy": lambda p, g, axis=0: accuracy(p, g, axis=axis),
}
