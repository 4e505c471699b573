"""Box arithmetic and the spatial features behind pairwise positional encodings.

Boxes are normalized ``[cx, cy, w, h]`` rows in [0, 1]. All functions accept a
single box of shape (4,) or a stack of shape (..., 4) and broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import MLP, Module

MIN_SIDE = 1e-6
LOG_EPS = 1e-8
UNARY_DIM = 12
PAIRWISE_DIM = 6
ENCODING_INPUT_DIM = 2 * (UNARY_DIM + PAIRWISE_DIM)


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"box components must lie in [0, 1], got {vals}")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls(*corners_to_center(np.array([x1, y1, x2, y2])).tolist())


def _arr(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def center_to_corners(b) -> np.ndarray:
    b = _arr(b)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def corners_to_center(b) -> np.ndarray:
    b = _arr(b)
    x1, y1, x2, y2 = np.moveaxis(b, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _clamped_sides(b: np.ndarray):
    return np.maximum(b[..., 2], MIN_SIDE), np.maximum(b[..., 3], MIN_SIDE)


def iou(a, b) -> np.ndarray:
    """Intersection over union of center-size boxes; 0 when they do not overlap."""
    a, b = _arr(a), _arr(b)
    ca, cb = center_to_corners(a), center_to_corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    area_a = np.maximum(ca[..., 2] - ca[..., 0], MIN_SIDE) * np.maximum(ca[..., 3] - ca[..., 1], MIN_SIDE)
    area_b = np.maximum(cb[..., 2] - cb[..., 0], MIN_SIDE) * np.maximum(cb[..., 3] - cb[..., 1], MIN_SIDE)
    out = np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)
    return out if out.ndim else float(out)


def pairwise_iou(boxes: np.ndarray, others: Optional[np.ndarray] = None) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    others = boxes if others is None else np.asarray(others, dtype=np.float64)
    return np.asarray(iou(boxes[:, None, :], others[None, :, :]))


def unary_terms(b1, b2) -> np.ndarray:
    """``b1 ++ b2 ++ [w1 h1, w2 h2, w1 / h1, w2 / h2]`` (12 values)."""
    b1, b2 = np.broadcast_arrays(_arr(b1), _arr(b2))
    w1, h1 = _clamped_sides(b1)
    w2, h2 = _clamped_sides(b2)
    extra = np.stack([w1 * h1, w2 * h2, w1 / h1, w2 / h2], axis=-1)
    return np.concatenate([b1, b2, extra], axis=-1)


def pairwise_terms(b1, b2) -> np.ndarray:
    """Area ratio, IoU and the rectified center offsets (6 values).

    Offsets are measured from the second box to the first and divided by the
    first box's width and height, so the ordering of the pair matters.
    """
    b1, b2 = np.broadcast_arrays(_arr(b1), _arr(b2))
    w1, h1 = _clamped_sides(b1)
    w2, h2 = _clamped_sides(b2)
    dx = (b1[..., 0] - b2[..., 0]) / w1
    dy = (b1[..., 1] - b2[..., 1]) / h1
    return np.stack(
        [
            (w1 * h1) / (w2 * h2),
            np.asarray(iou(b1, b2)),
            np.maximum(dx, 0.0),
            np.maximum(-dx, 0.0),
            np.maximum(dy, 0.0),
            np.maximum(-dy, 0.0),
        ],
        axis=-1,
    )


def spatial_features(b1, b2, eps: float = LOG_EPS, pairwise: bool = True) -> np.ndarray:
    """``v ++ log(v + eps)`` for ``v = unary ++ pairwise`` terms: 36 values per
    pair, or 24 when the pairwise terms are left out."""
    v = unary_terms(b1, b2)
    if pairwise:
        v = np.concatenate([v, pairwise_terms(b1, b2)], axis=-1)
    return np.concatenate([v, np.log(v + eps)], axis=-1)


def all_pair_features(boxes: np.ndarray, eps: float = LOG_EPS, pairwise: bool = True) -> np.ndarray:
    """Spatial features for every ordered pair of an (n, 4) box stack: (n, n, 36)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return spatial_features(boxes[:, None, :], boxes[None, :, :], eps, pairwise)


def single_box_features(boxes: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """Per-box terms ``[cx, cy, w, h, w h, w / h]`` with their guarded log (12 values)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w, h = _clamped_sides(boxes)
    v = np.concatenate([boxes, np.stack([w * h, w / h], axis=-1)], axis=-1)
    return np.concatenate([v, np.log(v + eps)], axis=-1)


class PositionalEncoder(Module):
    """MLP mapping spatial pair features to m-dimensional encodings.

    Args:
        m: Output width.
        rng: Initialization generator.
        hidden: Widths of the hidden layers; defaults to a single layer of width m.
        pairwise: Include the pairwise terms (36 inputs) or use unary terms only (24).
        eps: Guard inside the log.
    """

    def __init__(
        self,
        m: int,
        rng: np.random.Generator,
        hidden: Optional[Sequence[int]] = None,
        pairwise: bool = True,
        eps: float = LOG_EPS,
    ):
        self.pairwise = pairwise
        self.eps = eps
        in_dim = ENCODING_INPUT_DIM if pairwise else 2 * UNARY_DIM
        hidden = [m] if hidden is None else list(hidden)
        self.mlp = MLP([in_dim, *hidden, m], rng)

    def __call__(self, features) -> Tensor:
        return self.mlp(ag.as_tensor(features))

    def encode_boxes(self, boxes: np.ndarray) -> Tensor:
        """Encodings for all ordered pairs of an (n, 4) box stack: (n, n, m)."""
        return self(all_pair_features(boxes, self.eps, self.pairwise))


def positional_encoding(b1, b2, encoder: PositionalEncoder) -> np.ndarray:
    """m-dimensional encoding of one ordered box pair."""
    feats = spatial_features(b1, b2, encoder.eps, encoder.pairwise)
    return encoder(feats).data
