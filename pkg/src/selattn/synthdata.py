"""Procedural radiograph-like scenes with two lung-field targets, plus dataset I/O.

Scenes follow protocol-like pose statistics: two bright ellipses at stable
fractional positions on a noisy background, optionally with distractor
blobs. The tight bounding box of each ellipse is its ground truth. Datasets
persist as one binary PGM per sample plus a JSON-lines annotation file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Image
from .detector import LEFT_LUNG, RIGHT_LUNG
from .geometry import Box, iou
from .training import GroundTruth


@dataclass(frozen=True)
class SceneConfig:
    """Pose and appearance statistics of the generated scenes.

    Centers and sizes are fractions of the image; generated boxes are always
    fully inside the image (resampled otherwise) and the left target's
    center stays left of the right one's.
    """

    width: int = 320
    height: int = 320
    left_center: tuple[float, float] = (0.33, 0.45)
    right_center: tuple[float, float] = (0.67, 0.45)
    center_std: float = 0.03
    height_frac_mean: float = 0.45
    height_frac_std: float = 0.05
    aspect_mean: float = 0.5  # width / height
    aspect_std: float = 0.05
    fg_mean: float = 0.65
    bg_mean: float = 0.25
    noise_std: float = 0.05
    distractors: int = 2

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("scene must be at least 16x16 pixels")
        for name in ("center_std", "height_frac_std", "aspect_std", "noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name, v in (
            ("left_center", self.left_center),
            ("right_center", self.right_center),
        ):
            if not (0 < v[0] < 1 and 0 < v[1] < 1):
                raise ValueError(f"{name} must lie inside (0, 1)")
        for name in ("height_frac_mean", "aspect_mean", "fg_mean", "bg_mean"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie inside (0, 1)")
        if self.distractors < 0:
            raise ValueError("distractors must be non-negative")


@dataclass(frozen=True)
class Sample:
    """One scene: image, its two ground-truth boxes, and a stable id."""

    image: Image
    gts: GroundTruth
    id: str


_MAX_ATTEMPTS = 100


def _sample_ellipse(
    cfg: SceneConfig, center: tuple[float, float], rng: np.random.Generator
) -> tuple[float, float, float, float]:
    """Ellipse center and semi-axes (pixels) with the box fully inside the image."""
    for _ in range(_MAX_ATTEMPTS):
        cx = (center[0] + rng.normal(0.0, cfg.center_std)) * cfg.width
        cy = (center[1] + rng.normal(0.0, cfg.center_std)) * cfg.height
        h = (cfg.height_frac_mean + rng.normal(0.0, cfg.height_frac_std)) * cfg.height
        aspect = cfg.aspect_mean + rng.normal(0.0, cfg.aspect_std)
        w = aspect * h
        if w < 4 or h < 4:
            continue
        if cx - w / 2 >= 0 and cx + w / 2 <= cfg.width and cy - h / 2 >= 0 and cy + h / 2 <= cfg.height:
            return cx, cy, w / 2, h / 2
    raise RuntimeError("could not place a target inside the image; check scene config")


def _ellipse_mask(width: int, height: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
    return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0


def generate_sample(cfg: SceneConfig, rng: np.random.Generator, sample_id: str = "sample") -> Sample:
    """One deterministic scene from the generator state.

    Distractor blobs are rejected until they overlap neither target box by
    IoU > 0.1; pathological configs that cannot place geometry raise after
    a bounded number of attempts.
    """
    for _ in range(_MAX_ATTEMPTS):
        left = _sample_ellipse(cfg, cfg.left_center, rng)
        right = _sample_ellipse(cfg, cfg.right_center, rng)
        if left[0] < right[0]:
            break
    else:
        raise RuntimeError("could not order targets left-to-right; check scene config")

    img = np.full((cfg.height, cfg.width), cfg.bg_mean, dtype=np.float64)

    boxes = []
    for cx, cy, ax, ay in (left, right):
        img[_ellipse_mask(cfg.width, cfg.height, cx, cy, ax, ay)] = cfg.fg_mean
        boxes.append(Box(cx - ax, cy - ay, 2 * ax, 2 * ay))

    mid = 0.5 * (cfg.fg_mean + cfg.bg_mean)
    placed = 0
    attempts = 0
    while placed < cfg.distractors:
        attempts += 1
        if attempts > _MAX_ATTEMPTS:
            raise RuntimeError("could not place distractors away from targets")
        r = rng.uniform(6.0, 0.08 * min(cfg.width, cfg.height))
        cx = rng.uniform(r, cfg.width - r)
        cy = rng.uniform(r, cfg.height - r)
        blob = Box(cx - r, cy - r, 2 * r, 2 * r)
        if any(iou(blob, b) > 0.1 for b in boxes):
            continue
        img[_ellipse_mask(cfg.width, cfg.height, cx, cy, r, r)] = mid
        placed += 1

    if cfg.noise_std > 0:
        img += rng.normal(0.0, cfg.noise_std, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    gts = GroundTruth(boxes=tuple(boxes), labels=(LEFT_LUNG, RIGHT_LUNG))
    return Sample(image=Image(img), gts=gts, id=sample_id)


def generate_dataset(cfg: SceneConfig, count: int, seed: int) -> list[Sample]:
    """``count`` samples with per-sample derived seeds (base XOR index)."""
    return [
        generate_sample(cfg, np.random.default_rng(seed ^ i), sample_id=f"sample-{i:05d}")
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# Dataset files: one 8-bit binary PGM per sample + annotations.jsonl.
# ---------------------------------------------------------------------------

ANNOTATIONS_NAME = "annotations.jsonl"
_CLASSES = (LEFT_LUNG, RIGHT_LUNG)


class DatasetError(ValueError):
    """Malformed dataset file (PGM header, annotation schema, or id mismatch)."""


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from [0, 1] float intensities."""
    data = np.round(np.asarray(pixels) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    """Parse a binary PGM back to [0, 1] floats; rejects anything but P5/255."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        if i >= len(raw):
            raise DatasetError(f"{path}: truncated PGM header")
        ch = raw[i : i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            fields.append(raw[i:j])
            i = j
    i += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise DatasetError(f"{path}: bad PGM header fields") from e
    if maxval != 255:
        raise DatasetError(f"{path}: expected maxval 255, got {maxval}")
    pixels = raw[i : i + width * height]
    if len(pixels) != width * height:
        raise DatasetError(f"{path}: payload has {len(pixels)} bytes, expected {width * height}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0


def write_dataset(samples: list[Sample], out_dir: Path) -> None:
    """One PGM per sample plus the JSON-lines annotation file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ANNOTATIONS_NAME, "w", encoding="ascii") as f:
        for s in samples:
            write_pgm(out / f"{s.id}.pgm", s.image.pixels)
            record = {
                "id": s.id,
                "width": s.image.width,
                "height": s.image.height,
                "boxes": [
                    {"class": lab, "x": b.x, "y": b.y, "w": b.w, "h": b.h}
                    for b, lab in zip(s.gts.boxes, s.gts.labels)
                ],
            }
            f.write(json.dumps(record) + "\n")


def read_dataset(data_dir: Path) -> list[Sample]:
    """Load every annotated sample; an absent annotation file is an empty dataset."""
    root = Path(data_dir)
    ann = root / ANNOTATIONS_NAME
    if not ann.exists():
        return []
    samples = []
    with open(ann, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{ann}:{lineno}: invalid JSON") from e
            for key in ("id", "width", "height", "boxes"):
                if key not in record:
                    raise DatasetError(f"{ann}:{lineno}: missing key {key!r}")
            boxes, labels = [], []
            for entry in record["boxes"]:
                cls = entry.get("class")
                if cls not in _CLASSES:
                    raise DatasetError(f"{ann}:{lineno}: unknown class {cls!r}")
                boxes.append(Box(entry["x"], entry["y"], entry["w"], entry["h"]))
                labels.append(cls)
            pgm = root / f"{record['id']}.pgm"
            if not pgm.exists():
                raise DatasetError(f"{ann}:{lineno}: no image for id {record['id']!r}")
            pixels = read_pgm(pgm)
            if pixels.shape != (record["height"], record["width"]):
                raise DatasetError(
                    f"{ann}:{lineno}: image size {pixels.shape[::-1]} does not match annotation"
                )
            samples.append(
                Sample(
                    image=Image(pixels),
                    gts=GroundTruth(boxes=tuple(boxes), labels=tuple(labels)),
                    id=record["id"],
                )
            )
    return samples


def rescale_image(img: Image, short_side: int) -> tuple[Image, float]:
    """Bilinear downscale so the shorter side equals min(short_side, original).

    Returns the image and the applied scale factor; boxes belonging to the
    image scale by the same factor (see :func:`rescale_sample`).
    """
    shorter = min(img.width, img.height)
    if shorter <= short_side:
        return img, 1.0
    factor = short_side / shorter
    new_w = int(round(img.width * factor))
    new_h = int(round(img.height * factor))
    src = img.pixels
    # Map output pixel centers back to source coordinates.
    xs = (np.arange(new_w) + 0.5) / factor - 0.5
    ys = (np.arange(new_h) + 0.5) / factor - 0.5
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, img.width - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    y1 = np.minimum(y0 + 1, img.height - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return Image(np.clip(out, 0.0, 1.0)), factor


def scale_box(b: Box, factor: float) -> Box:
    return Box(b.x * factor, b.y * factor, b.w * factor, b.h * factor)


def rescale_sample(sample: Sample, short_side: int) -> Sample:
    """Rescale a sample's image and boxes together."""
    img, factor = rescale_image(sample.image, short_side)
    if factor == 1.0:
        return sample
    gts = GroundTruth(
        boxes=tuple(scale_box(b, factor) for b in sample.gts.boxes),
        labels=sample.gts.labels,
    )
    return Sample(image=img, gts=gts, id=sample.id)
