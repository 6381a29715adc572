"""Selective-attention region proposals and contextual detection, in plain NumPy.

A desk-scale, framework-free detection pipeline for protocol-standardized
imagery: an attention region restricts where proposals are generated, a
reduced anchor pyramid restricts what is hypothesized per position, and the
detection head sees each proposal's normalized coordinates alongside its
pooled appearance. Every stage carries hand-written gradients.
"""

from .anchors import AnchorSpec, AttentionRegion, GridGeometry, reduction_stats
from .backbone import Image
from .detector import CLASS_NAMES, LEFT_LUNG, RIGHT_LUNG, Detection, detect
from .geometry import Box, RegressionTarget, clip, decode, dice, encode, iou
from .rpn import ProposalSet, propose
from .synthdata import SceneConfig, generate_dataset, read_dataset, write_dataset
from .training import GroundTruth, LossConfig, ModelDims, OptimizerConfig, init_params

__version__ = "0.1.0"

__all__ = [
    "AnchorSpec",
    "AttentionRegion",
    "Box",
    "CLASS_NAMES",
    "Detection",
    "GridGeometry",
    "GroundTruth",
    "Image",
    "LEFT_LUNG",
    "LossConfig",
    "ModelDims",
    "OptimizerConfig",
    "ProposalSet",
    "RIGHT_LUNG",
    "RegressionTarget",
    "SceneConfig",
    "clip",
    "decode",
    "detect",
    "dice",
    "encode",
    "generate_dataset",
    "init_params",
    "iou",
    "propose",
    "read_dataset",
    "reduction_stats",
    "write_dataset",
    "__version__",
]
