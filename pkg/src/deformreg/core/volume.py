"""Volume and displacement-field data model, geometry ops, resampling.

Axis convention: arrays are indexed ``[i, j, k]`` and the shape is written
``(H, W, D)`` throughout; displacement component ``c`` of a field moves
sample positions along array axis ``c``, measured in voxel units.  Spacing
is metadata in millimeters and only matters at I/O and reporting time.

All functions here are pure: inputs are treated as immutable and a new
object is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

NETWORK_MULTIPLE = 16


@dataclass
class Volume3D:
    """Scalar intensity grid with voxel spacing and provenance metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    native_shape: Optional[tuple[int, int, int]] = None
    native_spacing: Optional[tuple[float, float, float]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.data, dtype=dtype)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume sharing this volume's geometry metadata."""
        return Volume3D(
            data=np.asarray(data, dtype=np.float32),
            spacing=self.spacing,
            native_shape=self.native_shape,
            native_spacing=self.native_spacing,
            meta=dict(self.meta),
        )


@dataclass
class DisplacementField:
    """Voxel-wise 3-vector field; component c displaces along axis c."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 4 or self.vectors.shape[-1] != 3:
            raise ValueError(
                f"displacement field must have shape (H, W, D, 3), got {self.vectors.shape}"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.vectors.shape[:3])

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.vectors, dtype=dtype)

    @classmethod
    def zeros(cls, shape: tuple[int, int, int]) -> "DisplacementField":
        return cls(np.zeros(tuple(shape) + (3,), dtype=np.float32))


@dataclass
class Mask3D:
    """Binary per-voxel mask."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {arr.shape}")
        uniques = np.unique(arr)
        if not np.all(np.isin(uniques, (0, 1))):
            raise ValueError("mask values must be 0 or 1")
        self.data = arr.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def bool(self) -> np.ndarray:
        return self.data.astype(bool)


@dataclass
class ResampleRecord:
    """Inversion record produced by pad_or_resample_for_network.

    method is "pad" for zero padding, otherwise the interpolator used for
    resampling ("trilinear" for intensities, "nearest" for label volumes).
    """

    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    resampled_spacing: tuple[float, float, float]
    method: str

    def is_identity(self) -> bool:
        return tuple(self.original_shape) == tuple(self.resampled_shape)


def normalize_intensity(vol: Volume3D) -> Volume3D:
    """Affine min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    data = vol.data
    lo = float(data.min())
    hi = float(data.max())
    if hi <= lo:
        return vol.with_data(np.zeros_like(data))
    return vol.with_data((data - lo) / (hi - lo))


def _nearest_multiple(n: int, base: int = NETWORK_MULTIPLE) -> int:
    # ties round up: 8 below a multiple already rounds to it
    m = ((2 * n + base) // (2 * base)) * base
    return max(m, base)


def _ceil_multiple(n: int, base: int = NETWORK_MULTIPLE) -> int:
    return max(((n + base - 1) // base) * base, base)


def _resize(data: np.ndarray, new_shape: tuple[int, int, int], order: int) -> np.ndarray:
    """Align-corners resize: output index i' samples input at i'*(n-1)/(n'-1)."""
    old = data.shape
    axes = []
    for n_old, n_new in zip(old, new_shape):
        if n_new > 1:
            axes.append(np.arange(n_new) * (n_old - 1) / (n_new - 1))
        else:
            axes.append(np.zeros(1))
    coords = np.meshgrid(*axes, indexing="ij")
    out = ndimage.map_coordinates(
        data.astype(np.float64), np.stack(coords), order=order, mode="nearest"
    )
    return out.astype(np.float32)


def pad_or_resample_for_network(
    vol: Volume3D, mode: str = "pad", interp: str = "trilinear"
) -> tuple[Volume3D, ResampleRecord]:
    """Bring every dimension to a multiple of 16 so pooling levels divide evenly.

    mode "resample" interpolates to the nearest multiple of 16 (ties round
    up).  mode "pad" zero-pads at the high end of each axis up to the next
    multiple, so restore_native can crop back exactly; it never discards
    voxels, which is why it rounds up rather than to the nearest multiple.
    """
    if mode not in ("pad", "resample"):
        raise ValueError(f"unknown mode {mode!r}")
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interp {interp!r}")
    shape = vol.shape
    if any(n < 1 for n in shape):
        raise ValueError(f"degenerate shape {shape}")

    if mode == "pad":
        target = tuple(_ceil_multiple(n) for n in shape)
        pad = [(0, t - n) for n, t in zip(shape, target)]
        data = np.pad(vol.data, pad, mode="constant") if target != shape else vol.data.copy()
        new_spacing = vol.spacing
        method = "pad"
    else:
        target = tuple(_nearest_multiple(n) for n in shape)
        if target == shape:
            data = vol.data.copy()
        else:
            data = _resize(vol.data, target, order=1 if interp == "trilinear" else 0)
        new_spacing = tuple(
            s * (n - 1) / (t - 1) if t > 1 else s
            for s, n, t in zip(vol.spacing, shape, target)
        )
        method = interp

    rec = ResampleRecord(
        original_shape=shape,
        original_spacing=vol.spacing,
        resampled_shape=target,
        resampled_spacing=tuple(float(s) for s in new_spacing),
        method=method,
    )
    out = Volume3D(
        data=data,
        spacing=rec.resampled_spacing,
        native_shape=shape,
        native_spacing=vol.spacing,
        meta=dict(vol.meta),
    )
    return out, rec


def restore_native(vol: Volume3D, rec: ResampleRecord) -> Volume3D:
    """Invert pad_or_resample_for_network: crop padding or resample back."""
    if vol.shape != tuple(rec.resampled_shape):
        raise ValueError(
            f"volume shape {vol.shape} does not match record {rec.resampled_shape}"
        )
    H, W, D = rec.original_shape
    if rec.method == "pad":
        data = vol.data[:H, :W, :D].copy()
    else:
        order = 1 if rec.method == "trilinear" else 0
        data = _resize(vol.data, rec.original_shape, order=order)
    return Volume3D(
        data=data,
        spacing=rec.original_spacing,
        native_shape=None,
        native_spacing=None,
        meta=dict(vol.meta),
    )


def restore_ddf_native(ddf: DisplacementField, rec: ResampleRecord) -> DisplacementField:
    """Bring a displacement field predicted on the network grid back to
    native geometry.

    Pad mode crops; resample mode trilinearly resizes each component and
    rescales magnitudes by the per-axis grid-extent ratio so displacements
    stay in native voxel units.
    """
    if ddf.shape != tuple(rec.resampled_shape):
        raise ValueError(
            f"field shape {ddf.shape} does not match record {rec.resampled_shape}"
        )
    H, W, D = rec.original_shape
    if rec.method == "pad":
        return DisplacementField(ddf.vectors[:H, :W, :D].copy())
    comps = []
    for c in range(3):
        n_res = rec.resampled_shape[c]
        n_orig = rec.original_shape[c]
        scale = (n_orig - 1) / (n_res - 1) if n_res > 1 else 1.0
        comps.append(_resize(ddf.vectors[..., c], rec.original_shape, order=1) * scale)
    return DisplacementField(np.stack(comps, axis=-1))
