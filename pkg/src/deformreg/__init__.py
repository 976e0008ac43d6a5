"""Modality-agnostic 3D non-rigid registration toolkit.

Pipeline: a dense teacher network is pretrained on synthetic multi-modal
pairs, compressed into a student via knowledge distillation, and adapted
per image pair at inference through self-supervised test-time optimization.
"""

from deformreg.core.volume import (
    Volume3D,
    DisplacementField,
    Mask3D,
    ResampleRecord,
    normalize_intensity,
    pad_or_resample_for_network,
    restore_native,
)
from deformreg.core.io import load_volume, save_volume
from deformreg.core.ops import warp, warp_volume, spatial_gradient, divergence
from deformreg.losses import LossWeights

__version__ = "0.1.0"

__all__ = [
    "Volume3D",
    "DisplacementField",
    "Mask3D",
    "ResampleRecord",
    "normalize_intensity",
    "pad_or_resample_for_network",
    "restore_native",
    "load_volume",
    "save_volume",
    "warp",
    "warp_volume",
    "spatial_gradient",
    "divergence",
    "LossWeights",
]
