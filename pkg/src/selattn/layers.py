"""Dense-layer primitives with fixed fan-in gains and hand-written backward passes.

All learnable weights in this package are drawn from the same narrow
Gaussian (std 0.01, see ``training.init_params``). A layer therefore applies
a fixed, shape-derived gain to its matmul so that signal variance is
preserved at initialization: ``sqrt(2/fan_in)`` effective scale before a
rectifier, ``sqrt(1/fan_in)`` for linear output heads. The gain is part of
the architecture, not a parameter; with it, the stock initialization and
learning rate land in a stable training regime without pretrained features.
"""

from __future__ import annotations

import math

import numpy as np

# Reference std of the weight initialization the gains are calibrated against.
WEIGHT_INIT_REF = 0.01

# Output heads run at a fraction of the variance-preserving gain: their
# targets (logits, box offsets) are order-one, and a full-gain head
# overshoots under momentum at the stock learning rate.
HEAD_SCALE = 0.25


def hidden_gain(fan_in: int) -> float:
    """Gain for a matmul feeding a rectifier."""
    return math.sqrt(2.0 / fan_in) / WEIGHT_INIT_REF


def head_gain(fan_in: int) -> float:
    """Gain for a linear output head (logits, offsets)."""
    return HEAD_SCALE * math.sqrt(1.0 / fan_in) / WEIGHT_INIT_REF


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray, gain: float) -> np.ndarray:
    """Forward ``gain * (x @ w) + b`` for (N, fan_in) inputs."""
    return gain * (x @ w) + b


def dense_backward(
    x: np.ndarray, w: np.ndarray, gain: float, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`dense`: returns (dx, dw, db)."""
    dw = gain * (x.T @ dout)
    db = dout.sum(axis=0)
    dx = gain * (dout @ w.T)
    return dx, dw, db


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (z > 0)
