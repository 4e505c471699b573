"""Score composition, logit recovery and the focal loss."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

LOG_EPS = 1e-8


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def compose_scores(s_i, s_j, logits, lam: float) -> np.ndarray:
    """Final pair scores ``(s_i * s_j) ** lam * sigmoid(logits)``.

    ``s_i`` and ``s_j`` broadcast against the leading axis of ``logits``.
    """
    s_i = np.asarray(s_i, dtype=np.float64)
    s_j = np.asarray(s_j, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    prior = np.power(s_i, lam) * np.power(s_j, lam)
    if logits.ndim > prior.ndim:
        prior = prior.reshape(prior.shape + (1,) * (logits.ndim - prior.ndim))
    return prior * _sigmoid(logits)


def recover_logit(y1, y2, eps: float = LOG_EPS):
    """Logit whose sigmoid is ``y1 * sigmoid(y2)``.

    ``y1`` is the normalized confidence product in (0, 1] and ``y2`` the raw
    action logit. Works on arrays, or on a ``Tensor`` ``y2`` to keep the
    result differentiable.
    """
    if isinstance(y2, Tensor):
        y1 = np.asarray(y1, dtype=np.float64)
        denom = (ag.exp(-y2) + 1.0) - y1
        return ag.log(y1 / denom, eps)
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    return np.log(y1 / (1.0 + np.exp(-y2) - y1) + eps)


def focal_loss(
    logits: Tensor,
    targets,
    alpha: float = 0.5,
    gamma: float = 2.0,
    valid_mask=None,
    reduction: str = "normalized",
) -> Tensor:
    """Binary focal loss computed from logits.

    Cross-entropy is ``softplus(x) - t x`` and the modulating factor uses
    ``1 - p_t = t sigmoid(-x) + (1 - t) sigmoid(x)``, so nothing overflows
    for large ``|x|``. Slots where ``valid_mask`` is 0 contribute nothing.

    ``reduction="normalized"`` divides the masked sum by the number of valid
    positives (at least 1); ``"sum"`` returns the masked sum.
    """
    logits = ag.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"focal_loss: logits {logits.shape} vs targets {t.shape}")
    mask = np.ones_like(t) if valid_mask is None else np.asarray(valid_mask, dtype=np.float64)
    if mask.shape != t.shape:
        raise ShapeError(f"focal_loss: mask {mask.shape} vs targets {t.shape}")

    ce = ag.softplus(logits) - logits * t
    one_minus_pt = ag.sigmoid(-logits) * t + ag.sigmoid(logits) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    loss = ce * (alpha_t * mask)
    if gamma != 0:
        loss = loss * ag.pow(one_minus_pt, gamma)
    total = loss.sum()
    if reduction == "sum":
        return total
    if reduction != "normalized":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total * (1.0 / max(float((t * mask).sum()), 1.0))


def focal_loss_reference(logits, targets, alpha: float, gamma: float, valid_mask=None) -> float:
    """Probability-space focal loss, normalized like ``focal_loss``. Only
    accurate for moderate logits."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    mask = np.ones_like(t) if valid_mask is None else np.asarray(valid_mask, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    pt = np.where(t == 1, p, 1.0 - p)
    at = np.where(t == 1, alpha, 1.0 - alpha)
    per = -at * (1.0 - pt) ** gamma * np.log(pt)
    return float((per * mask).sum() / max((t * mask).sum(), 1.0))


def bce_with_logits(logits, targets) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
