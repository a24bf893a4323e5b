"""Bounding-box types, overlap measures and denoising box noise.

Boxes live in normalized image coordinates. Two parameterizations are
used: corners (x1, y1, x2, y2) for overlap and masking, and center-size
(cx, cy, w, h) for the L1 term and for noising. The dataclasses validate
single boxes at API boundaries; the ``*_array`` helpers operate on
``(..., 4)`` float arrays without validation and are what the training
loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

# slack for float round-off at the [0, 1] borders
_BOUND_TOL = 1e-9
MIN_SIDE = 1e-6


class BoxError(ValueError):
    """Raised for boxes that violate their coordinate invariants."""


class DegenerateBoxError(BoxError):
    """Raised when a box has (near) zero width or height."""


@dataclass(frozen=True)
class BoxXYXY:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise DegenerateBoxError(f"degenerate box {vals}")
        if min(vals) < -_BOUND_TOL or max(vals) > 1 + _BOUND_TOL:
            raise BoxError(f"box {vals} outside the unit square")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=float)

    @classmethod
    def from_array(cls, a: Iterable[float]) -> "BoxXYXY":
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxCXCYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError(f"degenerate box {vals}")
        for c, s in ((self.cx, self.w), (self.cy, self.h)):
            if c - s / 2 < -_BOUND_TOL or c + s / 2 > 1 + _BOUND_TOL:
                raise BoxError(f"box {vals} outside the unit square")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    @classmethod
    def from_array(cls, a: Iterable[float]) -> "BoxCXCYWH":
        cx, cy, w, h = (float(v) for v in a)
        return cls(cx, cy, w, h)


# ---------------------------------------------------------------------------
# array helpers


def xyxy_to_cxcywh_array(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    lo, hi = b[..., :2], b[..., 2:]
    return np.concatenate([(lo + hi) / 2, hi - lo], axis=-1)


def cxcywh_to_xyxy_array(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    c, half = b[..., :2], b[..., 2:] / 2
    return np.concatenate([c - half, c + half], axis=-1)


def clip_xyxy_array(b: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(b, dtype=float), 0.0, 1.0)


def _area(b: np.ndarray) -> np.ndarray:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every box of ``a`` (N, 4) and ``b`` (M, 4), xyxy."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    hull_wh = np.maximum(a[:, None, 2:], b[None, :, 2:]) - np.minimum(a[:, None, :2], b[None, :, :2])
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Summed absolute coordinate difference, (N, 4) x (M, 4) -> (N, M)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(-1)


# ---------------------------------------------------------------------------
# single-box API


def to_cxcywh(b: BoxXYXY) -> BoxCXCYWH:
    return BoxCXCYWH.from_array(xyxy_to_cxcywh_array(b.as_array()))


def to_xyxy(b: BoxCXCYWH) -> BoxXYXY:
    return BoxXYXY.from_array(cxcywh_to_xyxy_array(b.as_array()))


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    return float(pairwise_iou(a.as_array(), b.as_array())[0, 0])


def giou(a: BoxXYXY, b: BoxXYXY) -> float:
    return float(pairwise_giou(a.as_array(), b.as_array())[0, 0])


def l1_box_distance(a: BoxCXCYWH, b: BoxCXCYWH) -> float:
    return float(np.abs(a.as_array() - b.as_array()).sum())


# ---------------------------------------------------------------------------
# denoising noise


def jitter_boxes(
    boxes: np.ndarray,
    lambda1: float,
    lambda2: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noise an (N, 4) array of cxcywh boxes.

    Each center moves by up to ``lambda1 * (w/2, h/2)`` and each side is
    scaled by a factor drawn from ``[1 - lambda2, 1 + lambda2]``. Results
    are clipped to the unit square.
    """
    if not 0.0 <= lambda1 <= 1.0:
        raise ValueError(f"lambda1 must lie in [0, 1], got {lambda1}")
    if not 0.0 <= lambda2 < 1.0:
        raise ValueError(f"lambda2 must lie in [0, 1), got {lambda2}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = boxes.shape[0]
    shift = rng.uniform(-1.0, 1.0, size=(n, 2))
    scale = rng.uniform(1.0 - lambda2, 1.0 + lambda2, size=(n, 2))
    wh = boxes[:, 2:]
    center = boxes[:, :2] + shift * lambda1 * wh / 2
    noised = np.concatenate([center, wh * scale], axis=1)
    xyxy = clip_xyxy_array(cxcywh_to_xyxy_array(noised))
    out = xyxy_to_cxcywh_array(xyxy)
    if np.any(out[:, 2:] < MIN_SIDE):
        raise DegenerateBoxError("box collapsed while clamping to the image")
    return out


def jitter_box(
    b: BoxCXCYWH,
    lambda1: float = 1.0,
    lambda2: float = 0.4,
    rng: np.random.Generator | None = None,
) -> BoxCXCYWH:
    if rng is None:
        raise ValueError("jitter_box needs an explicit seeded generator")
    if lambda1 == 0.0 and lambda2 == 0.0:
        # keep the identity exact; clipping round-trips can move the last ulp
        rng.uniform(size=4)
        return b
    return BoxCXCYWH.from_array(jitter_boxes(b.as_array()[None], lambda1, lambda2, rng)[0])
