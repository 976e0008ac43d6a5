"""Differentiable trilinear warping and finite-difference operators.

Functions accept torch tensors, numpy arrays, or the core dataclasses and
return torch tensors so gradients can flow to either input.  Displacements
are in voxel units along the array axes.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from deformreg.core.volume import DisplacementField, Volume3D


def _as_image_tensor(x) -> torch.Tensor:
    if isinstance(x, Volume3D):
        x = x.data
    t = torch.as_tensor(x)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-D image, got shape {tuple(t.shape)}")
    return t


def _as_field_tensor(u) -> torch.Tensor:
    if isinstance(u, DisplacementField):
        u = u.vectors
    t = torch.as_tensor(u)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected a (H, W, D, 3) field, got shape {tuple(t.shape)}")
    return t


def base_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity sample positions, shape (H, W, D, 3), voxel units."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"), dim=-1)


def warp(moving, u) -> torch.Tensor:
    """Sample ``moving`` at x + u(x) with trilinear interpolation.

    Out-of-domain positions contribute zero.  Differentiable with respect
    to both the image and the displacement field.
    """
    img = _as_image_tensor(moving)
    field = _as_field_tensor(u)
    if tuple(img.shape) != tuple(field.shape[:3]):
        raise ValueError(f"image shape {tuple(img.shape)} != field shape {tuple(field.shape[:3])}")
    dtype = torch.promote_types(img.dtype, field.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float32
    img = img.to(dtype)
    field = field.to(dtype)

    pos = base_grid(img.shape, dtype=dtype, device=img.device) + field
    # grid_sample wants normalized coords ordered (last spatial dim first)
    norm = []
    for axis in range(3):
        n = img.shape[axis]
        denom = max(n - 1, 1)
        norm.append(2.0 * pos[..., axis] / denom - 1.0)
    grid = torch.stack([norm[2], norm[1], norm[0]], dim=-1)
    out = F.grid_sample(
        img[None, None],
        grid[None],
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )
    return out[0, 0]


def warp_volume(moving: Volume3D, u: DisplacementField) -> Volume3D:
    """Volume-level warp preserving geometry metadata."""
    out = warp(moving, u)
    return moving.with_data(out.detach().cpu().numpy())


def spatial_gradient(field) -> torch.Tensor:
    """Forward differences along each spatial axis, stacked on a new
    leading axis: out[a] = field[.. i+1 ..] - field[.. i ..] along axis a.

    The last slice along each axis uses a replicate boundary (difference
    zero).  Accepts scalar grids (H, W, D) or fields (H, W, D, C).
    """
    t = torch.as_tensor(field.vectors if isinstance(field, DisplacementField) else field)
    if t.ndim not in (3, 4):
        raise ValueError(f"expected 3-D grid or 4-D field, got shape {tuple(t.shape)}")
    if any(t.shape[a] < 2 for a in range(3)):
        raise ValueError(f"each spatial axis needs >= 2 voxels, got {tuple(t.shape[:3])}")
    diffs = []
    for axis in range(3):
        last = t.narrow(axis, t.shape[axis] - 1, 1)
        diffs.append(torch.diff(t, dim=axis, append=last))
    return torch.stack(diffs, dim=0)


def divergence(u) -> torch.Tensor:
    """Sum of forward differences d u_c / d x_c, same scheme as
    spatial_gradient."""
    t = _as_field_tensor(u)
    if any(t.shape[a] < 2 for a in range(3)):
        raise ValueError(f"each spatial axis needs >= 2 voxels, got {tuple(t.shape[:3])}")
    out = None
    for axis in range(3):
        comp = t[..., axis]
        last = comp.narrow(axis, comp.shape[axis] - 1, 1)
        d = torch.diff(comp, dim=axis, append=last)
        out = d if out is None else out + d
    return out
