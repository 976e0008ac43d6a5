from deformreg.core.volume import (
    Volume3D,
    DisplacementField,
    Mask3D,
    ResampleRecord,
    normalize_intensity,
    pad_or_resample_for_network,
    restore_native,
    restore_ddf_native,
)
from deformreg.core.io import load_volume, save_volume
from deformreg.core.ops import warp, warp_volume, spatial_gradient, divergence
from deformreg.core.affine import affine_prealign

__all__ = [
    "Volume3D",
    "DisplacementField",
    "Mask3D",
    "ResampleRecord",
    "normalize_intensity",
    "pad_or_resample_for_network",
    "restore_native",
    "restore_ddf_native",
    "load_volume",
    "save_volume",
    "warp",
    "warp_volume",
    "spatial_gradient",
    "divergence",
    "affine_prealign",
]
