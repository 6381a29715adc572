"""Label assignment, balanced sampling, the masked joint loss, and SGD training.

The loss couples a two-class log loss on objectness with a smooth-L1 box
regression term (weight ``reg_weight``), gated so regression is only active
for positive proposals, and masked so proposals outside the attention region
contribute exactly zero loss and zero gradient. Training runs the proposal
and detection stages jointly: proposal coordinates are handed to the
detector as constants, losses are combined, and one momentum-SGD step
updates every parameter group through the shared backbone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorGrid, AnchorSpec, AttentionRegion
from .backbone import PATCH, BackboneParams, backbone_backward, backbone_forward
from .detector import (
    CLASS_NAMES,
    LEFT_LUNG,
    RIGHT_LUNG,
    DetectorParams,
    assign_detector_labels,
    detector_forward,
    detector_loss_and_backward,
    pooled_vectors,
    roi_pool_backward,
)
from .geometry import Box, encode_boxes, iou_matrix
from .rpn import RpnParams, nms, rpn_backward, rpn_forward, select_top

POSITIVE, NEGATIVE, NEUTRAL = 1, 0, -1


@dataclass(frozen=True)
class GroundTruth:
    """Reference boxes with one organ class name per box."""

    boxes: tuple[Box, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must align")
        for lab in self.labels:
            if lab not in CLASS_NAMES[1:]:
                raise ValueError(f"unknown class {lab!r}")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "labels", tuple(self.labels))

    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.empty((0, 4), dtype=np.float64)
        return np.stack([b.as_array() for b in self.boxes])


@dataclass
class AnchorLabels:
    """Per-anchor assignment: status, binary target, regression target, matched GT.

    ``status`` is POSITIVE/NEGATIVE/NEUTRAL per row; ``target_offsets`` and
    ``matched_gt`` are meaningful for positives only. ``fallback_rows`` lists
    anchors promoted because their ground-truth box had no positive.
    """

    status: np.ndarray  # (N,) int
    target_offsets: np.ndarray  # (N, 4), zeros where not positive
    matched_gt: np.ndarray  # (N,) int, -1 where not positive
    fallback_rows: np.ndarray  # rows promoted by the best-anchor rule

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.status == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.status == NEGATIVE)


@dataclass(frozen=True)
class LossConfig:
    """Loss thresholds and weights. ``normalization`` is "mean" or "none"."""

    reg_weight: float = 10.0
    iou_pos: float = 0.8
    iou_neg: float = 0.3
    normalization: str = "mean"

    def __post_init__(self):
        if not 0.0 <= self.iou_neg < self.iou_pos <= 1.0:
            raise ValueError("thresholds must satisfy 0 <= iou_neg < iou_pos <= 1")
        if self.reg_weight <= 0:
            raise ValueError("reg_weight must be positive")
        if self.normalization not in ("mean", "none"):
            raise ValueError("normalization must be 'mean' or 'none'")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.85
    init_std: float = 0.01

    def __post_init__(self):
        for name in ("learning_rate", "init_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("weight_decay", "momentum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def assign_labels(grid: AnchorGrid, gts: GroundTruth, cfg: LossConfig) -> AnchorLabels:
    """Label in-region anchors against the ground truth by IoU overlap.

    Positive above ``iou_pos`` (matched to the argmax box), negative below
    ``iou_neg``, neutral between. Any ground-truth box left without a
    positive promotes its single highest-IoU anchor, so every object
    contributes at least one regression example.
    """
    n = len(grid)
    gt_boxes = gts.box_array()
    status = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if gt_boxes.shape[0] == 0:
        return AnchorLabels(status, targets, matched, np.empty(0, dtype=np.int64))

    overlaps = iou_matrix(grid.boxes, gt_boxes)  # (N, G)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]

    status[best_iou >= cfg.iou_neg] = NEUTRAL
    pos = best_iou > cfg.iou_pos
    status[pos] = POSITIVE
    matched[pos] = best_gt[pos]

    fallback = []
    for j in range(gt_boxes.shape[0]):
        if not np.any(matched == j):
            i = int(overlaps[:, j].argmax())
            status[i] = POSITIVE
            matched[i] = j
            fallback.append(i)
    pos_rows = np.flatnonzero(status == POSITIVE)
    targets[pos_rows] = encode_boxes(grid.boxes[pos_rows], gt_boxes[matched[pos_rows]])
    return AnchorLabels(status, targets, matched, np.asarray(fallback, dtype=np.int64))


@dataclass
class SampleBatch:
    """Balanced training subset: equal positive and negative anchor rows."""

    pos_rows: np.ndarray
    neg_rows: np.ndarray
    empty: bool

    @property
    def rows(self) -> np.ndarray:
        return np.concatenate([self.pos_rows, self.neg_rows])

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.rows] = True
        return m


def balanced_sample(labels: AnchorLabels, batch_size: int, rng: np.random.Generator) -> SampleBatch:
    """Draw up to batch_size/2 positives and exactly as many negatives.

    Sampling is uniform without replacement and never touches neutrals; the
    1:1 ratio is strict, so scarcity on either side shrinks the batch. An
    empty batch (no positives or no negatives) is flagged, not an error.
    """
    if batch_size % 2:
        raise ValueError("batch_size must be even")
    pos_pool = labels.positives
    neg_pool = labels.negatives
    take = min(batch_size // 2, pos_pool.size, neg_pool.size)
    if take == 0:
        empty = np.empty(0, dtype=np.int64)
        return SampleBatch(empty, empty, empty=True)
    pos = rng.choice(pos_pool, size=take, replace=False)
    neg = rng.choice(neg_pool, size=take, replace=False)
    return SampleBatch(np.sort(pos), np.sort(neg), empty=False)


def smooth_l1(x: float) -> float:
    """Huber-style penalty: quadratic inside |x| < 1, linear outside."""
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_array(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


LOG_EPS = 1e-12


def log_loss(p: float, target: int) -> float:
    """Two-class logarithmic loss with probability clamped away from {0, 1}."""
    p = min(max(p, LOG_EPS), 1.0 - LOG_EPS)
    return -(target * math.log(p) + (1 - target) * math.log(1.0 - p))


@dataclass
class RpnLossResult:
    """Loss value, per-term breakdown, and gradients w.r.t. scores/offsets."""

    total: float
    cls_loss: float
    reg_loss: float
    dscore: np.ndarray  # (N,)
    doffsets: np.ndarray  # (N, 4)
    cls_terms: np.ndarray  # (N,) per-proposal log-loss contributions
    reg_terms: np.ndarray  # (N,) per-proposal smooth-L1 sums (unweighted)
    n_cls: int
    n_reg: int


def rpn_loss(
    scores: np.ndarray,
    offsets: np.ndarray,
    labels: AnchorLabels,
    in_region: np.ndarray,
    sampled: np.ndarray,
    cfg: LossConfig,
) -> RpnLossResult:
    """Masked objectness + gated regression loss over the sampled proposals.

    ``in_region`` holds the attention indicator per proposal: rows where it
    is false contribute exactly zero loss and zero gradient, whatever their
    label. Regression is active only for positive rows. With "mean"
    normalization each sum is divided by its count of contributing terms;
    "none" leaves the raw sums.
    """
    scores = np.asarray(scores, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    in_region = np.asarray(in_region, dtype=bool)
    sampled = np.asarray(sampled, dtype=bool)
    n = scores.shape[0]

    cls_rows = sampled & in_region & (labels.status != NEUTRAL)
    reg_rows = sampled & in_region & (labels.status == POSITIVE)

    p = np.clip(scores, LOG_EPS, 1.0 - LOG_EPS)
    target = (labels.status == POSITIVE).astype(np.float64)
    cls_terms = np.zeros(n, dtype=np.float64)
    cls_terms[cls_rows] = -(
        target[cls_rows] * np.log(p[cls_rows])
        + (1.0 - target[cls_rows]) * np.log(1.0 - p[cls_rows])
    )

    diff = np.zeros((n, 4), dtype=np.float64)
    diff[reg_rows] = offsets[reg_rows] - labels.target_offsets[reg_rows]
    reg_terms = np.zeros(n, dtype=np.float64)
    reg_terms[reg_rows] = smooth_l1_array(diff[reg_rows]).sum(axis=1)

    n_cls = int(cls_rows.sum())
    n_reg = int(reg_rows.sum())
    cls_scale = 1.0 / n_cls if (cfg.normalization == "mean" and n_cls) else 1.0
    reg_scale = 1.0 / n_reg if (cfg.normalization == "mean" and n_reg) else 1.0

    cls_loss = cls_terms.sum() * cls_scale
    reg_loss = cfg.reg_weight * reg_terms.sum() * reg_scale

    dscore = np.zeros(n, dtype=np.float64)
    dscore[cls_rows] = cls_scale * (
        -(target[cls_rows] / p[cls_rows]) + (1.0 - target[cls_rows]) / (1.0 - p[cls_rows])
    )
    doffsets = np.zeros((n, 4), dtype=np.float64)
    doffsets[reg_rows] = cfg.reg_weight * reg_scale * smooth_l1_grad(diff[reg_rows])

    return RpnLossResult(
        total=float(cls_loss + reg_loss),
        cls_loss=float(cls_loss),
        reg_loss=float(reg_loss),
        dscore=dscore,
        doffsets=doffsets,
        cls_terms=cls_terms,
        reg_terms=reg_terms,
        n_cls=n_cls,
        n_reg=n_reg,
    )


@dataclass
class ModelParams:
    """Every learnable tensor of the pipeline, grouped by stage."""

    backbone: BackboneParams
    rpn: RpnParams
    detector: DetectorParams

    def tensors(self) -> dict[str, np.ndarray]:
        d: dict[str, np.ndarray] = {}
        d.update(self.backbone.tensors())
        d.update(self.rpn.tensors())
        d.update(self.detector.tensors())
        return d


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes: feature channels, RPN code width, detector head."""

    channels: int = 32
    rpn_dim: int = 64
    detector_hidden: int = 128
    pool_size: int = 7
    context_enabled: bool = True

    def __post_init__(self):
        for name in ("channels", "rpn_dim", "detector_hidden", "pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def init_params(
    dims: ModelDims, k: int, rng: np.random.Generator, cfg: OptimizerConfig
) -> ModelParams:
    """Gaussian-initialized weights (zero mean, ``init_std``), zero biases."""
    std = cfg.init_std

    def w(*shape):
        return rng.normal(0.0, std, size=shape)

    def b(n):
        return np.zeros(n, dtype=np.float64)

    feat_len = dims.pool_size * dims.pool_size * dims.channels
    if dims.context_enabled:
        feat_len += 4
    return ModelParams(
        backbone=BackboneParams(w_patch=w(PATCH * PATCH, dims.channels), b_patch=b(dims.channels)),
        rpn=RpnParams(
            w_window=w(9 * dims.channels, dims.rpn_dim),
            b_window=b(dims.rpn_dim),
            w_cls=w(dims.rpn_dim, 2 * k),
            b_cls=b(2 * k),
            w_reg=w(dims.rpn_dim, 4 * k),
            b_reg=b(4 * k),
        ),
        detector=DetectorParams(
            w1=w(feat_len, dims.detector_hidden),
            b1=b(dims.detector_hidden),
            w2=w(dims.detector_hidden, dims.detector_hidden),
            b2=b(dims.detector_hidden),
            w3=w(dims.detector_hidden, 3),
            b3=b(3),
        ),
    )


def zero_like_params(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors().items()}


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    cfg: OptimizerConfig,
) -> bool:
    """One momentum step with decoupled-in-gradient weight decay, in place.

    v <- momentum*v - lr*(grad + wd*param); param <- param + v. Returns False
    (and leaves everything untouched) when any gradient is non-finite.
    """
    tensors = params.tensors()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            return False
    for name, t in tensors.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = velocity[name]
        v *= cfg.momentum
        v -= cfg.learning_rate * (g + cfg.weight_decay * t)
        t += v
    return True


# ---------------------------------------------------------------------------
# Joint training: RPN loss + detector loss through the shared backbone.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training step needs besides the data and the state."""

    region: AttentionRegion
    spec: AnchorSpec
    loss: LossConfig
    optimizer: OptimizerConfig
    dims: ModelDims
    top_n: int = 154
    nms_threshold: float = 0.7
    batch_size: int = 64
    images_per_step: int = 2

    def __post_init__(self):
        if self.batch_size % 2 or self.batch_size < 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.images_per_step < 1:
            raise ValueError("images_per_step must be >= 1")
        if self.top_n < 0 or not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError("top_n must be >= 0 and nms_threshold within [0, 1]")


@dataclass
class TrainState:
    params: ModelParams
    velocity: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0


def init_state(cfg: TrainConfig, seed: int) -> TrainState:
    rng = np.random.default_rng(seed)
    params = init_params(cfg.dims, cfg.spec.k, rng, cfg.optimizer)
    return TrainState(params=params, velocity=zero_like_params(params), rng=rng)


def _accumulate(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for name, g in part.items():
        total[name] += g


def joint_forward_backward(
    samples: list,
    params: ModelParams,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[dict, dict[str, np.ndarray]]:
    """One forward/backward over a multi-image mini-batch.

    Proposals are pooled across images for loss normalization; proposal box
    coordinates enter the detector as constants, so no gradient flows from
    the detection loss into the regression head (the joint training is
    approximate by construction). Returns (report, gradients).
    """
    grads = zero_like_params(params)
    flags: list[str] = []
    per_image = []
    anchors_evaluated = 0

    # Forward pass and per-image sampling; losses need pooled counts.
    for sample in samples:
        img = sample.image
        fm, bb_cache = backbone_forward(img, params.backbone)
        ps, rpn_cache = rpn_forward(fm, params.rpn, cfg.region, cfg.spec, img.width, img.height)
        anchors_evaluated += len(ps)
        labels = assign_labels(ps.anchor_grid, sample.gts, cfg.loss)
        per_image_budget = max(2, (cfg.batch_size // len(samples)) // 2 * 2)
        batch = balanced_sample(labels, per_image_budget, rng)
        if batch.empty:
            flags.append(f"empty-rpn-batch:{sample.id}")
        kept = select_top(nms(ps, cfg.nms_threshold), cfg.top_n)
        per_image.append((sample, fm, bb_cache, ps, rpn_cache, labels, batch, kept))

    # Pooled RPN loss over every sampled proposal of every image.
    scores = np.concatenate([ps.scores for _, _, _, ps, _, _, _, _ in per_image])
    offsets = np.concatenate([ps.offsets for _, _, _, ps, _, _, _, _ in per_image])
    pooled_status = np.concatenate([lab.status for *_, lab, _, _ in per_image])
    pooled_targets = np.concatenate([lab.target_offsets for *_, lab, _, _ in per_image])
    pooled_labels = AnchorLabels(
        status=pooled_status,
        target_offsets=pooled_targets,
        matched_gt=np.full(pooled_status.shape[0], -1, dtype=np.int64),
        fallback_rows=np.empty(0, dtype=np.int64),
    )
    sampled = np.zeros(pooled_status.shape[0], dtype=bool)
    offset_base = 0
    n_pos = n_neg = 0
    fallback_used = 0
    for _, _, _, ps, _, lab, batch, _ in per_image:
        if not batch.empty:
            sampled[offset_base + batch.rows] = True
            n_pos += batch.pos_rows.size
            n_neg += batch.neg_rows.size
        fallback_used += lab.fallback_rows.size
        offset_base += len(ps)

    in_region = np.ones(pooled_status.shape[0], dtype=bool)  # forward is restricted already
    rpn_res = rpn_loss(scores, offsets, pooled_labels, in_region, sampled, cfg.loss)

    # Detector loss over the pooled top-N proposals of every image. Classes
    # are weighted inversely to their pooled frequency so the scarce organ
    # labels are not drowned out by background proposals.
    det_batches = []
    total_fed = 0
    class_counts = np.zeros(3, dtype=np.int64)
    for sample, fm, _, _, _, _, _, kept in per_image:
        if len(kept) == 0:
            det_batches.append(None)
            continue
        vecs, caches, rows = pooled_vectors(
            fm,
            kept.boxes,
            sample.image.width,
            sample.image.height,
            cfg.dims.pool_size,
            cfg.spec.stride,
            cfg.dims.context_enabled,
        )
        if rows.size == 0:
            det_batches.append(None)
            continue
        classes = assign_detector_labels(kept.boxes[rows], sample.gts)
        class_counts += np.bincount(classes, minlength=3)
        det_batches.append((vecs, caches, rows, classes))
        total_fed += rows.size
    if total_fed == 0:
        flags.append("detector-skipped")

    det_loss = 0.0
    n_present = int((class_counts > 0).sum())
    class_scale = np.zeros(3, dtype=np.float64)
    present = class_counts > 0
    class_scale[present] = 1.0 / (n_present * class_counts[present])

    # Backward, image by image.
    offset_base = 0
    for (sample, fm, bb_cache, ps, rpn_cache, _, _, kept), det_batch in zip(per_image, det_batches):
        n = len(ps)
        dscore = rpn_res.dscore[offset_base : offset_base + n]
        doffsets = rpn_res.doffsets[offset_base : offset_base + n]
        offset_base += n
        rpn_grads, dfm = rpn_backward(dscore, doffsets, params.rpn, rpn_cache)
        _accumulate(grads, rpn_grads.tensors())

        if det_batch is not None:
            vecs, caches, rows, classes = det_batch
            probs, det_cache = detector_forward(vecs, params.detector)
            loss_i, det_grads, dx = detector_loss_and_backward(
                classes, params.detector, det_cache, scale=class_scale[classes]
            )
            det_loss += loss_i
            _accumulate(grads, det_grads.tensors())
            g = cfg.dims.pool_size
            c = fm.C
            pooled_len = g * g * c
            for row_idx, cache in enumerate(caches):
                dpooled = dx[row_idx, :pooled_len].reshape(g, g, c)
                roi_pool_backward(dpooled, cache, dfm)
            # Context coordinates are constants under approximate joint
            # training: their slice of dx is dropped.

        bb_grads = backbone_backward(dfm, params.backbone, bb_cache)
        _accumulate(grads, bb_grads.tensors())

    report = {
        "rpn_cls": rpn_res.cls_loss,
        "rpn_reg": rpn_res.reg_loss,
        "detector": det_loss,
        "total": rpn_res.total + det_loss,
        "positives": int(n_pos),
        "negatives": int(n_neg),
        "anchors_evaluated": int(anchors_evaluated),
        "proposals_fed": int(total_fed),
        "fallback_positives": int(fallback_used),
        "flags": flags,
    }
    return report, grads


def joint_train_step(samples: list, state: TrainState, cfg: TrainConfig) -> dict:
    """One optimization step over a multi-image mini-batch; returns the report."""
    report, grads = joint_forward_backward(samples, state.params, cfg, state.rng)
    ok = sgd_step(state.params, grads, state.velocity, cfg.optimizer)
    if not ok:
        report["flags"] = report["flags"] + ["step-rejected"]
    state.step += 1
    report["step"] = state.step
    return report


def train_loop(
    dataset: list,
    steps: int,
    cfg: TrainConfig,
    seed: int,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Run ``steps`` optimization steps over a dataset, deterministically.

    Each step draws ``images_per_step`` samples without replacement (with
    replacement only if the dataset is smaller than that). ``on_step`` is
    called with (state, report) after every step.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    state = init_state(cfg, seed)
    records = []
    replace = len(dataset) < cfg.images_per_step
    for _ in range(steps):
        idx = state.rng.choice(len(dataset), size=cfg.images_per_step, replace=replace)
        batch = [dataset[int(i)] for i in idx]
        report = joint_train_step(batch, state, cfg)
        records.append(report)
        if on_step is not None:
            on_step(state, report)
    return state, records
