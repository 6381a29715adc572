"""Selective-attention region proposal head.

Slides a 3x3 window over the feature map, but only at positions inside the
attention region: each window is projected to a D-dimensional code, from
which a classification head emits 2k logits (per-anchor object/background
pairs, softmaxed to an objectness score) and a regression head emits 4k box
offsets. Offsets are decoded against the position's anchors and clipped to
the image. Greedy NMS and top-N selection whittle the scored boxes down to
the proposal set handed to the detection stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .anchors import (
    AnchorGrid,
    AnchorSpec,
    AttentionRegion,
    GridGeometry,
    RegionBounds,
    generate_anchors,
    region_bounds,
)
from .backbone import BackboneParams, FeatureMap, backbone_forward
from .geometry import clip_boxes, decode_boxes
from .layers import dense, dense_backward, head_gain, hidden_gain, relu, relu_backward

_WINDOW_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


@dataclass
class RpnParams:
    """Window projection plus classification and regression heads.

    ``w_window`` maps the flattened 3x3xC window to D dims; ``w_cls`` emits
    2k logits (object/background per anchor shape) and ``w_reg`` 4k offsets.
    """

    w_window: np.ndarray  # (9*C, D)
    b_window: np.ndarray  # (D,)
    w_cls: np.ndarray  # (D, 2k)
    b_cls: np.ndarray  # (2k,)
    w_reg: np.ndarray  # (D, 4k)
    b_reg: np.ndarray  # (4k,)

    @property
    def k(self) -> int:
        return self.w_cls.shape[1] // 2

    @property
    def dim(self) -> int:
        return self.w_window.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "rpn.w_window": self.w_window,
            "rpn.b_window": self.b_window,
            "rpn.w_cls": self.w_cls,
            "rpn.b_cls": self.b_cls,
            "rpn.w_reg": self.w_reg,
            "rpn.b_reg": self.b_reg,
        }


@dataclass
class ProposalSet:
    """Scored, decoded proposals with their anchor/position provenance.

    Arrays are aligned row-for-row: ``boxes`` are decoded and clipped,
    ``scores`` are objectness probabilities, ``offsets`` the raw regression
    outputs, and ``anchor_row`` indexes into ``anchor_grid``. ``valid`` marks
    proposals whose clipped box kept positive size (the rest are carried for
    the count law but dropped by the selection stages).
    """

    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,)
    offsets: np.ndarray  # (N, 4)
    anchor_row: np.ndarray  # (N,) index into anchor_grid
    valid: np.ndarray  # (N,) bool
    anchor_grid: AnchorGrid

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.anchor_grid.positions[self.anchor_row]

    @property
    def shape_index(self) -> np.ndarray:
        return self.anchor_grid.shape_index[self.anchor_row]

    def take(self, rows: np.ndarray) -> "ProposalSet":
        rows = np.asarray(rows, dtype=np.int64)
        return ProposalSet(
            boxes=self.boxes[rows],
            scores=self.scores[rows],
            offsets=self.offsets[rows],
            anchor_row=self.anchor_row[rows],
            valid=self.valid[rows],
            anchor_grid=self.anchor_grid,
        )


@dataclass
class RpnCache:
    windows: np.ndarray  # (P, 9*C)
    pre_hidden: np.ndarray  # (P, D)
    hidden: np.ndarray  # (P, D)
    scores: np.ndarray  # (P*k,) objectness probabilities
    bounds: RegionBounds
    fm_shape: tuple[int, int, int]
    k: int


def _gather_windows(fm: FeatureMap, b: RegionBounds) -> np.ndarray:
    """Zero-padded 3x3xC windows at every in-region position, row-major, flattened.

    The region is a dense rectangle, so each of the nine window offsets is a
    contiguous slice of the padded map.
    """
    if b.empty:
        return np.empty((0, 9 * fm.C), dtype=np.float64)
    padded = np.zeros((fm.H + 2, fm.W + 2, fm.C), dtype=np.float64)
    padded[1:-1, 1:-1, :] = fm.data
    ny = b.y_hi - b.y_lo + 1
    nx = b.x_hi - b.x_lo + 1
    parts = [
        padded[b.y_lo + 1 + dy : b.y_lo + 1 + dy + ny, b.x_lo + 1 + dx : b.x_lo + 1 + dx + nx]
        .reshape(ny * nx, fm.C)
        for dy, dx in _WINDOW_OFFSETS
    ]
    return np.concatenate(parts, axis=1)


def rpn_forward(
    fm: FeatureMap,
    p: RpnParams,
    region: AttentionRegion,
    spec: AnchorSpec,
    image_w: float,
    image_h: float,
) -> tuple[ProposalSet, RpnCache]:
    """Score and decode every anchor at every in-region position.

    The returned set has exactly |positions| * k rows, position-major with
    anchor shape minor, matching the anchor grid's ordering.
    """
    if p.k != spec.k:
        raise ValueError(f"params built for k={p.k} but spec has k={spec.k}")
    geom = GridGeometry(W=fm.W, H=fm.H)
    grid = generate_anchors(geom, region, spec, image_w, image_h)
    bounds = region_bounds(geom, region)

    windows = _gather_windows(fm, bounds)
    pre_hidden = dense(windows, p.w_window, p.b_window, hidden_gain(p.w_window.shape[0]))
    hidden = relu(pre_hidden)
    cls_logits = dense(hidden, p.w_cls, p.b_cls, head_gain(p.dim))  # (P, 2k)
    offsets = dense(hidden, p.w_reg, p.b_reg, head_gain(p.dim)).reshape(-1, 4)  # (P*k, 4)

    pair = cls_logits.reshape(-1, spec.k, 2)
    scores = 1.0 / (1.0 + np.exp(pair[..., 1] - pair[..., 0]))  # softmax object prob
    scores = scores.reshape(-1)

    decoded = decode_boxes(grid.boxes, offsets)
    boxes, valid = clip_boxes(decoded, image_w, image_h)

    ps = ProposalSet(
        boxes=boxes,
        scores=scores,
        offsets=offsets,
        anchor_row=np.arange(len(grid), dtype=np.int64),
        valid=valid,
        anchor_grid=grid,
    )
    cache = RpnCache(windows, pre_hidden, hidden, scores, bounds, (fm.H, fm.W, fm.C), spec.k)
    return ps, cache


def rpn_backward(
    dscore: np.ndarray,
    doffsets: np.ndarray,
    p: RpnParams,
    cache: RpnCache,
) -> tuple[RpnParams, np.ndarray]:
    """Backpropagate gradients on scores/offsets to the head and the feature map.

    ``dscore`` is the gradient w.r.t. each proposal's objectness probability
    and ``doffsets`` w.r.t. its raw offsets. Positions outside the attention
    region were never evaluated, so their feature cells receive gradient only
    through overlapping in-region windows (zero if never covered).
    """
    n_pos = cache.windows.shape[0]
    k = cache.k
    dscore = np.asarray(dscore, dtype=np.float64).reshape(n_pos * k)
    doffsets = np.asarray(doffsets, dtype=np.float64).reshape(n_pos * k, 4)

    # Through the per-anchor two-way softmax: p = sigmoid(l_obj - l_bg).
    s = cache.scores
    dpair_diff = dscore * s * (1.0 - s)
    dcls = np.empty((n_pos, 2 * k), dtype=np.float64)
    dcls.reshape(n_pos, k, 2)[..., 0] = dpair_diff.reshape(n_pos, k)
    dcls.reshape(n_pos, k, 2)[..., 1] = -dpair_diff.reshape(n_pos, k)
    dreg = doffsets.reshape(n_pos, 4 * k)

    g_head = head_gain(p.dim)
    dh_cls, dw_cls, db_cls = dense_backward(cache.hidden, p.w_cls, g_head, dcls)
    dh_reg, dw_reg, db_reg = dense_backward(cache.hidden, p.w_reg, g_head, dreg)
    dpre = relu_backward(cache.pre_hidden, dh_cls + dh_reg)
    dwin, dw_window, db_window = dense_backward(
        cache.windows, p.w_window, hidden_gain(p.w_window.shape[0]), dpre
    )

    h, w, c = cache.fm_shape
    dfm_padded = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    b = cache.bounds
    if not b.empty:
        ny = b.y_hi - b.y_lo + 1
        nx = b.x_hi - b.x_lo + 1
        for j, (dy, dx) in enumerate(_WINDOW_OFFSETS):
            dfm_padded[
                b.y_lo + 1 + dy : b.y_lo + 1 + dy + ny, b.x_lo + 1 + dx : b.x_lo + 1 + dx + nx
            ] += dwin[:, j * c : (j + 1) * c].reshape(ny, nx, c)
    dfm = dfm_padded[1:-1, 1:-1, :]

    grads = RpnParams(
        w_window=dw_window,
        b_window=db_window,
        w_cls=dw_cls,
        b_cls=db_cls,
        w_reg=dw_reg,
        b_reg=db_reg,
    )
    return grads, dfm


def nms(ps: ProposalSet, iou_threshold: float) -> ProposalSet:
    """Greedy non-maximum suppression by descending score.

    A proposal is suppressed iff its IoU with an already-kept proposal
    strictly exceeds the threshold. Ties in score keep the original
    (position, anchor) order. Invalid (degenerate) proposals are dropped.
    """
    if not np.all(np.isfinite(ps.scores)):
        raise ValueError("proposal scores must be finite")
    rows = np.flatnonzero(ps.valid)
    order = rows[np.argsort(-ps.scores[rows], kind="stable")]
    boxes = ps.boxes
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]

    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        iy = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return ps.take(np.asarray(keep, dtype=np.int64))


def select_top(ps: ProposalSet, n: int) -> ProposalSet:
    """The n highest-scoring valid proposals, score-descending, stable."""
    rows = np.flatnonzero(ps.valid)
    order = rows[np.argsort(-ps.scores[rows], kind="stable")]
    return ps.take(order[: max(n, 0)])


@dataclass
class ProposeResult:
    proposals: ProposalSet
    fm: FeatureMap
    backbone_cache: object
    rpn_cache: RpnCache
    pre_nms_count: int


def propose(
    img,
    backbone_params: BackboneParams,
    rpn_params: RpnParams,
    region: AttentionRegion,
    spec: AnchorSpec,
    top_n: int,
    nms_threshold: float,
    timings: dict | None = None,
) -> ProposeResult:
    """Full proposal pipeline: backbone, restricted RPN, NMS, top-N.

    Deterministic for fixed inputs. When ``timings`` is given, per-stage
    wall-clock seconds are accumulated into it under ``backbone``/``rpn``/``nms``.
    """
    t0 = time.perf_counter()
    fm, bb_cache = backbone_forward(img, backbone_params)
    t1 = time.perf_counter()
    ps, rpn_cache = rpn_forward(fm, rpn_params, region, spec, img.width, img.height)
    t2 = time.perf_counter()
    kept = select_top(nms(ps, nms_threshold), top_n)
    t3 = time.perf_counter()
    if timings is not None:
        timings["backbone"] = timings.get("backbone", 0.0) + (t1 - t0)
        timings["rpn"] = timings.get("rpn", 0.0) + (t2 - t1)
        timings["nms"] = timings.get("nms", 0.0) + (t3 - t2)
    return ProposeResult(kept, fm, bb_cache, rpn_cache, pre_nms_count=len(ps))
