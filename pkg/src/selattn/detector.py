"""Contextual detection head: ROI pooling plus coordinate-aware classification.

Each proposal's appearance is summarized by max-pooling its feature-map
region onto a fixed G x G grid; the proposal's (x, y, w, h), normalized by
the image size, is appended so the classifier can exploit where the box sits,
not just what it contains. Two rectified hidden layers and a 3-way softmax
score {background, left lung, right lung}; the proposal box itself is the
detection (no second regression stage).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np

from .anchors import AnchorSpec, AttentionRegion
from .backbone import FeatureMap, Image
from .geometry import Box, iou_matrix
from .layers import dense, dense_backward, head_gain, hidden_gain, relu, relu_backward
from .rpn import propose

if TYPE_CHECKING:
    from .training import ModelParams

LEFT_LUNG = "left-lung"
RIGHT_LUNG = "right-lung"
CLASS_NAMES = ("background", LEFT_LUNG, RIGHT_LUNG)


@dataclass
class DetectorParams:
    """Two hidden layers and a 3-class output layer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @property
    def input_len(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "detector.w1": self.w1,
            "detector.b1": self.b1,
            "detector.w2": self.w2,
            "detector.b2": self.b2,
            "detector.w3": self.w3,
            "detector.b3": self.b3,
        }


@dataclass(frozen=True)
class Detection:
    """One detected organ: class name, proposal box, softmax confidence."""

    class_name: str
    box: Box
    confidence: float


def feature_rect(box: Box, stride: int, fm_w: int, fm_h: int) -> tuple[int, int, int, int] | None:
    """Map a pixel box to an integer feature-cell rectangle (x0, x1, y0, y1).

    Floor on the start, ceil on the end, at least one cell per axis. Returns
    None when the box misses the feature grid entirely (degenerate region).
    """
    if box.is_degenerate:
        return None
    x0 = int(np.floor(box.x / stride))
    y0 = int(np.floor(box.y / stride))
    x1 = int(np.ceil((box.x + box.w) / stride))
    y1 = int(np.ceil((box.y + box.h) / stride))
    if x0 >= fm_w or y0 >= fm_h or x1 <= 0 or y1 <= 0:
        return None
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(max(x1, x0 + 1), fm_w)
    y1 = min(max(y1, y0 + 1), fm_h)
    return x0, x1, y0, y1


@lru_cache(maxsize=1024)
def _bin_slices(n: int, g: int) -> tuple[np.ndarray, np.ndarray]:
    """Start/end offsets of g contiguous bins over n cells (floor split).

    Ends are widened to one cell where the split collapses, so every bin is
    non-empty and a span of exactly g cells maps one cell per bin.
    """
    starts = (np.arange(g, dtype=np.int64) * n) // g
    ends = np.empty(g, dtype=np.int64)
    ends[:-1] = starts[1:]
    ends[-1] = n
    return starts, np.maximum(ends, starts + 1)


@lru_cache(maxsize=1024)
def _bin_gather(ny: int, nx: int, g: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded per-bin flat cell indices (g, g, m) and their validity mask."""
    sy, ey = _bin_slices(ny, g)
    sx, ex = _bin_slices(nx, g)
    max_ry = int((ey - sy).max())
    max_rx = int((ex - sx).max())
    ry = sy[:, None] + np.arange(max_ry)[None, :]
    rx = sx[:, None] + np.arange(max_rx)[None, :]
    ry_ok = ry < ey[:, None]
    rx_ok = rx < ex[:, None]
    flat = (ry[:, None, :, None] * nx + rx[None, :, None, :]).reshape(g, g, -1)
    ok = (ry_ok[:, None, :, None] & rx_ok[None, :, None, :]).reshape(g, g, -1)
    return np.clip(flat, 0, ny * nx - 1), ok


@dataclass
class RoiCache:
    rect: tuple[int, int, int, int]
    argmax_y: np.ndarray  # (G, G, C) absolute cell rows
    argmax_x: np.ndarray  # (G, G, C) absolute cell cols


def roi_pool(fm: FeatureMap, box: Box, g: int, stride: int) -> tuple[np.ndarray, RoiCache]:
    """Max-pool the box's feature region onto a (g, g, C) grid.

    Bin b along an axis of n cells spans [floor(b*n/g), floor((b+1)*n/g)),
    widened to a single cell when the split collapses, so a box covering
    exactly g x g cells pools each cell identically. The per-bin argmax is
    cached for the backward scatter.
    """
    rect = feature_rect(box, stride, fm.W, fm.H)
    if rect is None:
        raise ValueError("box maps to an empty feature region")
    x0, x1, y0, y1 = rect
    nx, ny = x1 - x0, y1 - y0
    flat, ok = _bin_gather(ny, nx, g)  # (g, g, m)

    region = fm.data[y0:y1, x0:x1, :].reshape(ny * nx, fm.C)
    vals = region[flat]  # (g, g, m, C)
    np.copyto(vals, -np.inf, where=~ok[..., None])
    arg = vals.argmax(axis=2)  # (g, g, C)
    m = flat.shape[2]
    chosen = flat.reshape(g * g, m)[np.arange(g * g)[:, None], arg.reshape(g * g, fm.C)]
    chosen = chosen.reshape(g, g, fm.C)
    pooled = region[chosen, np.arange(fm.C)]
    return pooled, RoiCache(rect, y0 + chosen // nx, x0 + chosen % nx)


def roi_pool_backward(dpooled: np.ndarray, cache: RoiCache, dfm: np.ndarray) -> None:
    """Scatter pooled-feature gradients back to the argmax cells, in place."""
    g = dpooled.shape[0]
    c = dpooled.shape[2]
    ch = np.broadcast_to(np.arange(c), (g, g, c))
    np.add.at(dfm, (cache.argmax_y.ravel(), cache.argmax_x.ravel(), ch.ravel()), dpooled.ravel())


def append_context(
    pooled: np.ndarray, box: Box, image_w: float, image_h: float, enabled: bool = True
) -> np.ndarray:
    """Flatten pooled features and append the image-normalized coordinates."""
    flat = pooled.reshape(-1)
    if not enabled:
        return flat
    out = np.empty(flat.size + 4, dtype=np.float64)
    out[:-4] = flat
    out[-4] = min(max(box.x / image_w, 0.0), 1.0)
    out[-3] = min(max(box.y / image_h, 0.0), 1.0)
    out[-2] = min(max(box.w / image_w, 0.0), 1.0)
    out[-1] = min(max(box.h / image_h, 0.0), 1.0)
    return out


@dataclass
class DetectorCache:
    x: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    probs: np.ndarray


def detector_forward(vecs: np.ndarray, p: DetectorParams) -> tuple[np.ndarray, DetectorCache]:
    """Class probabilities for a batch of (N, input_len) feature vectors."""
    x = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
    if x.shape[1] != p.input_len:
        raise ValueError(f"expected vectors of length {p.input_len}, got {x.shape[1]}")
    pre1 = dense(x, p.w1, p.b1, hidden_gain(p.w1.shape[0]))
    h1 = relu(pre1)
    pre2 = dense(h1, p.w2, p.b2, hidden_gain(p.w2.shape[0]))
    h2 = relu(pre2)
    logits = dense(h2, p.w3, p.b3, head_gain(p.w3.shape[0]))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, DetectorCache(x, pre1, h1, pre2, h2, probs)


def detector_loss_and_backward(
    true_class: np.ndarray,
    p: DetectorParams,
    cache: DetectorCache,
    scale: float | np.ndarray = 1.0,
) -> tuple[float, DetectorParams, np.ndarray]:
    """Scaled cross-entropy and exact gradients.

    ``scale`` weighs each row's contribution (a scalar applies uniformly);
    the loss is the weighted sum of per-row -log p_true. Returns (loss,
    parameter gradients, gradient w.r.t. the input vectors); the input
    gradient feeds the ROI argmax scatter for backbone flow.
    """
    true_class = np.asarray(true_class, dtype=np.int64)
    n = cache.probs.shape[0]
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
    p_true = np.clip(cache.probs[np.arange(n), true_class], 1e-12, None)
    loss = float(-(np.log(p_true) * scale).sum())

    dlogits = cache.probs.copy()
    dlogits[np.arange(n), true_class] -= 1.0
    dlogits *= scale[:, None]
    dh2, dw3, db3 = dense_backward(cache.h2, p.w3, head_gain(p.w3.shape[0]), dlogits)
    dpre2 = relu_backward(cache.pre2, dh2)
    dh1, dw2, db2 = dense_backward(cache.h1, p.w2, hidden_gain(p.w2.shape[0]), dpre2)
    dpre1 = relu_backward(cache.pre1, dh1)
    dx, dw1, db1 = dense_backward(cache.x, p.w1, hidden_gain(p.w1.shape[0]), dpre1)
    grads = DetectorParams(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3)
    return loss, grads, dx


def assign_detector_labels(boxes: np.ndarray, gts, iou_threshold: float = 0.5) -> np.ndarray:
    """Class index per proposal box: argmax-IoU ground truth if IoU clears
    the threshold, else background (0)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.zeros(boxes.shape[0], dtype=np.int64)
    gt_boxes = gts.box_array()
    if gt_boxes.shape[0] == 0 or boxes.shape[0] == 0:
        return out
    overlaps = iou_matrix(boxes, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(boxes.shape[0]), best]
    class_idx = np.array([CLASS_NAMES.index(lab) for lab in gts.labels], dtype=np.int64)
    hit = best_iou >= iou_threshold
    out[hit] = class_idx[best[hit]]
    return out


def pooled_vectors(
    fm: FeatureMap,
    boxes: np.ndarray,
    image_w: float,
    image_h: float,
    pool_size: int,
    stride: int,
    context_enabled: bool = True,
) -> tuple[np.ndarray, list[RoiCache], np.ndarray]:
    """ROI-pool and contextualize a batch of boxes.

    Returns the (M, input_len) matrix, per-row pooling caches, and the rows
    of ``boxes`` that survived (boxes mapping to an empty feature region are
    dropped here).
    """
    vecs = []
    caches = []
    kept = []
    for i in range(boxes.shape[0]):
        b = Box(*boxes[i])
        if feature_rect(b, stride, fm.W, fm.H) is None:
            continue
        pooled, cache = roi_pool(fm, b, pool_size, stride)
        vecs.append(append_context(pooled, b, image_w, image_h, enabled=context_enabled))
        caches.append(cache)
        kept.append(i)
    if not vecs:
        return np.empty((0, 0)), [], np.empty(0, dtype=np.int64)
    return np.stack(vecs), caches, np.asarray(kept, dtype=np.int64)


def detect(
    img: Image,
    params: "ModelParams",
    region: AttentionRegion,
    spec: AnchorSpec,
    *,
    top_n: int = 154,
    nms_threshold: float = 0.7,
    pool_size: int = 7,
    context_enabled: bool = True,
    timings: dict | None = None,
) -> list[Detection]:
    """End-to-end detection: propose, score each proposal, keep the best per class.

    Returns at most one detection per organ class; an empty list means the
    proposal stage produced nothing usable.
    """
    result = propose(
        img,
        params.backbone,
        params.rpn,
        region,
        spec,
        top_n=top_n,
        nms_threshold=nms_threshold,
        timings=timings,
    )
    ps = result.proposals
    t0 = time.perf_counter()
    vecs, _, kept = pooled_vectors(
        result.fm, ps.boxes, img.width, img.height, pool_size, spec.stride, context_enabled
    )
    if kept.size == 0:
        return []
    probs, _ = detector_forward(vecs, params.detector)
    detections = []
    for class_idx in (1, 2):
        row = int(np.argmax(probs[:, class_idx]))
        box = Box(*ps.boxes[kept[row]])
        detections.append(
            Detection(CLASS_NAMES[class_idx], box, float(probs[row, class_idx]))
        )
    if timings is not None:
        timings["detector"] = timings.get("detector", 0.0) + (time.perf_counter() - t0)
    return detections
