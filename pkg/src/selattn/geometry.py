"""Axis-aligned box arithmetic: overlap measures and anchor regression transforms.

Boxes live in continuous pixel coordinates as (x, y, w, h) with (x, y) the
top-left corner. Scalar operations work on :class:`Box`; the ``*_boxes``
helpers operate on ``(N, 4)`` float arrays for the hot paths and share the
same conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, top-left corner plus size.

    Sizes must be strictly positive except for the explicit degenerate
    marker produced by :meth:`degenerate`, which is only meaningful as an
    overlap operand (any overlap with it is zero).
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError("box coordinates must be finite")
        if (self.w <= 0 or self.h <= 0) and not (self.w == 0 and self.h == 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def degenerate(cls, x: float = 0.0, y: float = 0.0) -> "Box":
        """Zero-size marker box, e.g. the result of clipping a box fully outside."""
        return cls(x, y, 0.0, 0.0)

    @property
    def is_degenerate(self) -> bool:
        return self.w == 0 or self.h == 0

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def cx(self) -> float:
        return self.x + 0.5 * self.w

    @property
    def cy(self) -> float:
        return self.y + 0.5 * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class RegressionTarget:
    """Dimensionless box offsets: center shifts in anchor units, log size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 if either is degenerate."""
    if a.is_degenerate or b.is_degenerate:
        return 0.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def dice(a: Box, b: Box) -> float:
    """Dice coefficient 2|a∩b| / (|a| + |b|) of two valid boxes."""
    if a.is_degenerate or b.is_degenerate:
        raise ValueError("dice requires non-degenerate boxes")
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(ix, 0.0) * max(iy, 0.0)
    return 2.0 * inter / (a.area + b.area)


def encode(anchor: Box, gt: Box) -> RegressionTarget:
    """Offsets that map ``anchor`` onto ``gt``.

    Center shifts are measured in anchor widths/heights, sizes as log ratios,
    so the encoding is invariant to translation and scale of the pair.
    """
    if anchor.is_degenerate:
        raise ValueError("cannot encode against a degenerate anchor")
    if gt.is_degenerate:
        raise ValueError("cannot encode a degenerate target box")
    return RegressionTarget(
        tx=(gt.cx - anchor.cx) / anchor.w,
        ty=(gt.cy - anchor.cy) / anchor.h,
        tw=float(np.log(gt.w / anchor.w)),
        th=float(np.log(gt.h / anchor.h)),
    )


def decode(anchor: Box, t: RegressionTarget) -> Box:
    """Inverse of :func:`encode`: apply offsets ``t`` to ``anchor``."""
    if anchor.is_degenerate:
        raise ValueError("cannot decode against a degenerate anchor")
    w = anchor.w * float(np.exp(t.tw))
    h = anchor.h * float(np.exp(t.th))
    cx = anchor.cx + t.tx * anchor.w
    cy = anchor.cy + t.ty * anchor.h
    return Box(cx - 0.5 * w, cy - 0.5 * h, w, h)


def clip(b: Box, width: float, height: float) -> Box:
    """Intersect a box with the image rectangle [0, width] x [0, height].

    Returns a degenerate marker when the box lies fully outside.
    """
    if width <= 0 or height <= 0:
        raise ValueError("image bounds must be positive")
    x0 = max(b.x, 0.0)
    y0 = max(b.y, 0.0)
    x1 = min(b.x + b.w, float(width))
    y1 = min(b.y + b.h, float(height))
    if x1 <= x0 or y1 <= y0:
        return Box.degenerate(min(max(b.x, 0.0), float(width)), min(max(b.y, 0.0), float(height)))
    return Box(x0, y0, x1 - x0, y1 - y0)


# ---------------------------------------------------------------------------
# Array forms. Rows are (x, y, w, h); all take/return float64.
# ---------------------------------------------------------------------------


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box arrays, shape (len(a), len(b)).

    Rows with non-positive sizes behave like degenerate boxes (IoU 0).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(
        a[:, None, 0], b[None, :, 0]
    )
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(
        a[:, None, 1], b[None, :, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = np.clip(a[:, 2], 0.0, None) * np.clip(a[:, 3], 0.0, None)
    area_b = np.clip(b[:, 2], 0.0, None) * np.clip(b[:, 3], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    degenerate = (a[:, 2] <= 0) | (a[:, 3] <= 0)
    out[degenerate, :] = 0.0
    degenerate_b = (b[:, 2] <= 0) | (b[:, 3] <= 0)
    out[:, degenerate_b] = 0.0
    return out


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Row-wise :func:`encode` for aligned (N, 4) anchor and target arrays."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    acx = anchors[:, 0] + 0.5 * anchors[:, 2]
    acy = anchors[:, 1] + 0.5 * anchors[:, 3]
    gcx = gts[:, 0] + 0.5 * gts[:, 2]
    gcy = gts[:, 1] + 0.5 * gts[:, 3]
    t = np.empty_like(anchors)
    t[:, 0] = (gcx - acx) / anchors[:, 2]
    t[:, 1] = (gcy - acy) / anchors[:, 3]
    t[:, 2] = np.log(gts[:, 2] / anchors[:, 2])
    t[:, 3] = np.log(gts[:, 3] / anchors[:, 3])
    return t


# Bound on predicted log size ratios in the batched decode: keeps decoded
# sizes finite whatever an untrained regression head emits (e^10 is already
# four orders of magnitude beyond any meaningful box).
LOG_SIZE_CLAMP = 10.0


def decode_boxes(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Row-wise :func:`decode` for aligned (N, 4) anchor and offset arrays.

    Log size ratios are clamped to +/-LOG_SIZE_CLAMP before exponentiation.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    w = anchors[:, 2] * np.exp(np.clip(t[:, 2], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
    h = anchors[:, 3] * np.exp(np.clip(t[:, 3], -LOG_SIZE_CLAMP, LOG_SIZE_CLAMP))
    cx = anchors[:, 0] + 0.5 * anchors[:, 2] + t[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + 0.5 * anchors[:, 3] + t[:, 1] * anchors[:, 3]
    out = np.empty_like(anchors)
    out[:, 0] = cx - 0.5 * w
    out[:, 1] = cy - 0.5 * h
    out[:, 2] = w
    out[:, 3] = h
    return out


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip (N, 4) boxes to the image; returns (clipped, valid mask).

    Boxes fully outside come back with zero size and ``valid=False``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = np.clip(boxes[:, 0], 0.0, float(width))
    y0 = np.clip(boxes[:, 1], 0.0, float(height))
    x1 = np.clip(boxes[:, 0] + boxes[:, 2], 0.0, float(width))
    y1 = np.clip(boxes[:, 1] + boxes[:, 3], 0.0, float(height))
    out = np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)
    valid = (out[:, 2] > 0) & (out[:, 3] > 0)
    out[~valid, 2:] = 0.0
    return out, valid
