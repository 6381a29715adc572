"""Reference feature extractor: stride-16 patch projection.

Stands in for a deep convolutional backbone while realizing the exact grid
geometry the rest of the pipeline relies on: each non-overlapping 16x16
patch of the grayscale image is linearly projected to C channels, shifted by
a bias and rectified, giving a floor(width/16) x floor(height/16) x C
feature map. The contract (``Image`` in, ``FeatureMap`` out, exact manual
gradients) is all downstream stages depend on, so a deeper extractor can be
substituted behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import dense, dense_backward, hidden_gain, relu, relu_backward

PATCH = 16  # pixels per feature cell along each axis


@dataclass(frozen=True)
class Image:
    """Grayscale image; ``pixels`` is (height, width) float64 in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("image must be a 2-D array")
        if px.shape[0] < PATCH or px.shape[1] < PATCH:
            raise ValueError(f"image must be at least {PATCH}x{PATCH} pixels")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("intensities must be finite and within [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class FeatureMap:
    """Activations on the sliding-window grid; ``data`` is (H, W, C)."""

    data: np.ndarray

    @property
    def W(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[2]


@dataclass
class BackboneParams:
    """Patch projection weights (PATCH*PATCH, C) and bias (C,)."""

    w_patch: np.ndarray
    b_patch: np.ndarray

    @property
    def channels(self) -> int:
        return self.w_patch.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"backbone.w_patch": self.w_patch, "backbone.b_patch": self.b_patch}


@dataclass
class BackboneCache:
    patches: np.ndarray  # (H*W, PATCH*PATCH)
    pre_act: np.ndarray  # (H*W, C)
    grid_hw: tuple[int, int]


def image_patches(img: Image) -> np.ndarray:
    """Flattened non-overlapping PATCH x PATCH patches, row-major, (H*W, PATCH²).

    Residual pixels beyond the last full patch are ignored (floor semantics).
    """
    h_cells = img.height // PATCH
    w_cells = img.width // PATCH
    cropped = img.pixels[: h_cells * PATCH, : w_cells * PATCH]
    patches = cropped.reshape(h_cells, PATCH, w_cells, PATCH).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(patches).reshape(h_cells * w_cells, PATCH * PATCH)


def backbone_forward(img: Image, p: BackboneParams) -> tuple[FeatureMap, BackboneCache]:
    """Project patches to channels, rectify; returns the map and backward cache."""
    h_cells = img.height // PATCH
    w_cells = img.width // PATCH
    patches = image_patches(img)
    pre = dense(patches, p.w_patch, p.b_patch, hidden_gain(PATCH * PATCH))
    fm = relu(pre).reshape(h_cells, w_cells, p.channels)
    return FeatureMap(fm), BackboneCache(patches, pre, (h_cells, w_cells))


def backbone_backward(grad: np.ndarray, p: BackboneParams, cache: BackboneCache) -> BackboneParams:
    """Exact parameter gradients for an upstream (H, W, C) feature-map gradient."""
    h_cells, w_cells = cache.grid_hw
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (h_cells, w_cells, p.channels):
        raise ValueError(f"gradient shape {grad.shape} does not match forward cache")
    dpre = relu_backward(cache.pre_act, grad.reshape(h_cells * w_cells, p.channels))
    _, dw, db = dense_backward(cache.patches, p.w_patch, hidden_gain(PATCH * PATCH), dpre)
    return BackboneParams(w_patch=dw, b_patch=db)
