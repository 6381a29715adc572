"""Attention-restricted anchor grids.

The detector never scans the whole feature map: a fractional attention
region, derived from acquisition-protocol statistics, bounds the sliding
window positions, and a small pyramid of reference shapes bounds the
hypotheses per position. This module generates those grids and accounts
for the resulting search-space reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box


@dataclass(frozen=True)
class AnchorSpec:
    """Reference-box pyramid: one anchor per (area, ratio) pair at each position."""

    areas: tuple[float, ...] = (66.0**2, 150.0**2)
    ratios: tuple[float, ...] = (0.5, 0.75)  # width : height
    stride: int = 16

    def __post_init__(self):
        if not self.areas or any(a <= 0 for a in self.areas):
            raise ValueError("anchor areas must be positive and non-empty")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise ValueError("anchor ratios must be positive and non-empty")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        object.__setattr__(self, "areas", tuple(float(a) for a in self.areas))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))

    @property
    def k(self) -> int:
        return len(self.areas) * len(self.ratios)


@dataclass(frozen=True)
class AttentionRegion:
    """Fractional bounds of the restricted search space on the feature grid.

    ``x_lo``/``x_hi`` bound the horizontal extent and ``y_lo``/``y_hi`` the
    vertical one, all as fractions of the grid. ``identity()`` covers the
    full grid; the default shrinks 15% from each side.
    """

    x_lo: float = 0.15
    x_hi: float = 0.85
    y_lo: float = 0.15
    y_hi: float = 0.85

    def __post_init__(self):
        for name in ("x_lo", "x_hi", "y_lo", "y_hi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError("region bounds must satisfy lo < hi on both axes")

    @classmethod
    def identity(cls) -> "AttentionRegion":
        return cls(0.0, 1.0, 0.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self.x_lo == 0.0 and self.x_hi == 1.0 and self.y_lo == 0.0 and self.y_hi == 1.0


@dataclass(frozen=True)
class GridGeometry:
    """Feature-map extent in sliding-window positions."""

    W: int
    H: int

    def __post_init__(self):
        if self.W < 1 or self.H < 1:
            raise ValueError("grid must have at least one position per axis")


@dataclass(frozen=True)
class RegionBounds:
    """Inclusive integer position bounds of a region on a grid."""

    x_lo: int
    x_hi: int
    y_lo: int
    y_hi: int
    empty: bool

    @property
    def count(self) -> int:
        if self.empty:
            return 0
        return (self.x_hi - self.x_lo + 1) * (self.y_hi - self.y_lo + 1)


def anchor_shapes(spec: AnchorSpec) -> list[tuple[float, float]]:
    """(width, height) of each reference box: w*h = area, w/h = ratio."""
    shapes = []
    for area in spec.areas:
        for ratio in spec.ratios:
            w = math.sqrt(area * ratio)
            h = math.sqrt(area / ratio)
            shapes.append((w, h))
    return shapes


def region_bounds(geom: GridGeometry, region: AttentionRegion) -> RegionBounds:
    """Integer position bounds of the region: ceil on lower, floor on upper.

    The rounding is chosen so the identity region reproduces the full grid
    exactly. Bounds that cross after rounding mark the region as empty.
    """
    x_lo = math.ceil(region.x_lo * (geom.W - 1))
    x_hi = math.floor(region.x_hi * (geom.W - 1))
    y_lo = math.ceil(region.y_lo * (geom.H - 1))
    y_hi = math.floor(region.y_hi * (geom.H - 1))
    empty = x_lo > x_hi or y_lo > y_hi
    return RegionBounds(x_lo, x_hi, y_lo, y_hi, empty)


def grid_positions(geom: GridGeometry, region: AttentionRegion) -> np.ndarray:
    """All integer (gx, gy) positions inside the region, row-major.

    Returns an (N, 2) int array; empty regions yield shape (0, 2) (use
    :func:`region_bounds` to distinguish an empty region from a 1-cell grid).
    """
    b = region_bounds(geom, region)
    if b.empty:
        return np.empty((0, 2), dtype=np.int64)
    gx = np.arange(b.x_lo, b.x_hi + 1, dtype=np.int64)
    gy = np.arange(b.y_lo, b.y_hi + 1, dtype=np.int64)
    xx, yy = np.meshgrid(gx, gy)  # row-major: y outer, x inner
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def indicator(pos: tuple[int, int], geom: GridGeometry, region: AttentionRegion) -> bool:
    """Whether a grid position lies inside the attention region."""
    gx, gy = pos
    if not (0 <= gx < geom.W and 0 <= gy < geom.H):
        raise ValueError(f"position {pos} outside {geom.W}x{geom.H} grid")
    b = region_bounds(geom, region)
    if b.empty:
        return False
    return b.x_lo <= gx <= b.x_hi and b.y_lo <= gy <= b.y_hi


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors of a (geometry, region, spec) triple, position-major.

    ``boxes`` is (N, 4) with N = positions * k; row ``i`` belongs to
    ``positions[i]`` and shape ``shape_index[i]``. Anchors may extend past
    the image (``cross_boundary``); they are kept so the count law
    |anchors| = |positions| * k holds unconditionally.
    """

    boxes: np.ndarray
    positions: np.ndarray
    shape_index: np.ndarray
    cross_boundary: np.ndarray
    geom: GridGeometry
    region: AttentionRegion
    spec: AnchorSpec
    image_w: float
    image_h: float

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, i: int) -> Box:
        x, y, w, h = self.boxes[i]
        return Box(float(x), float(y), float(w), float(h))


def generate_anchors(
    geom: GridGeometry,
    region: AttentionRegion,
    spec: AnchorSpec,
    image_w: float,
    image_h: float,
) -> AnchorGrid:
    """Place every anchor shape at the center of every in-region cell."""
    pos = grid_positions(geom, region)
    shapes = np.array(anchor_shapes(spec), dtype=np.float64)
    k = spec.k
    n = pos.shape[0] * k

    centers = (pos.astype(np.float64) + 0.5) * spec.stride  # (P, 2)
    boxes = np.empty((n, 4), dtype=np.float64)
    wh = np.tile(shapes, (pos.shape[0], 1))  # (P*k, 2), shape-minor
    cxy = np.repeat(centers, k, axis=0)
    boxes[:, 0] = cxy[:, 0] - 0.5 * wh[:, 0]
    boxes[:, 1] = cxy[:, 1] - 0.5 * wh[:, 1]
    boxes[:, 2] = wh[:, 0]
    boxes[:, 3] = wh[:, 1]

    cross = (
        (boxes[:, 0] < 0)
        | (boxes[:, 1] < 0)
        | (boxes[:, 0] + boxes[:, 2] > image_w)
        | (boxes[:, 1] + boxes[:, 3] > image_h)
    )
    return AnchorGrid(
        boxes=boxes,
        positions=np.repeat(pos, k, axis=0),
        shape_index=np.tile(np.arange(k, dtype=np.int64), pos.shape[0]),
        cross_boundary=cross,
        geom=geom,
        region=region,
        spec=spec,
        image_w=float(image_w),
        image_h=float(image_h),
    )


@dataclass(frozen=True)
class ReductionStats:
    """Search-space accounting of a restricted configuration vs a full one."""

    positions_full: int
    positions_restricted: int
    anchors_full: int
    anchors_restricted: int
    position_reduction: float  # percent
    anchor_reduction: float  # percent

    def to_dict(self) -> dict:
        return {
            "positions_full": self.positions_full,
            "positions_restricted": self.positions_restricted,
            "anchors_full": self.anchors_full,
            "anchors_restricted": self.anchors_restricted,
            "position_reduction": self.position_reduction,
            "anchor_reduction": self.anchor_reduction,
        }


def reduction_stats(
    geom: GridGeometry,
    region: AttentionRegion,
    spec_restricted: AnchorSpec,
    spec_full: AnchorSpec,
) -> ReductionStats:
    """Exact position/anchor counts of region+spec vs the full-grid baseline."""
    restricted = region_bounds(geom, region).count
    full = geom.W * geom.H
    anchors_restricted = restricted * spec_restricted.k
    anchors_full = full * spec_full.k
    return ReductionStats(
        positions_full=full,
        positions_restricted=restricted,
        anchors_full=anchors_full,
        anchors_restricted=anchors_restricted,
        position_reduction=((full - restricted) * 100.0) / full,
        anchor_reduction=((anchors_full - anchors_restricted) * 100.0) / anchors_full,
    )


def region_from_ground_truth(
    boxes: list[Box] | np.ndarray,
    image_w: float,
    image_h: float,
    margin: float = 0.05,
) -> AttentionRegion:
    """Fit a region to observed object extents plus a fractional margin.

    Helper for deriving the region from training-set statistics when no
    protocol-derived bounds are available: takes the min/max fractional
    extents of the ground-truth boxes and widens them by ``margin`` per side.
    """
    arr = np.asarray([b.as_array() if isinstance(b, Box) else b for b in boxes], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one box to fit a region")
    x_lo = float(arr[:, 0].min() / image_w)
    y_lo = float(arr[:, 1].min() / image_h)
    x_hi = float((arr[:, 0] + arr[:, 2]).max() / image_w)
    y_hi = float((arr[:, 1] + arr[:, 3]).max() / image_h)
    return AttentionRegion(
        x_lo=max(0.0, x_lo - margin),
        x_hi=min(1.0, x_hi + margin),
        y_lo=max(0.0, y_lo - margin),
        y_hi=min(1.0, y_hi + margin),
    )
