"""Gradient-based 12-parameter affine pre-alignment.

Optimizes a linear map plus translation (applied about the volume center)
to minimize the negative NCC between the fixed image and the warped
moving image.  Falls back to the identity if no iterate improves on it.
"""

from __future__ import annotations

import numpy as np
import torch

from deformreg.core.ops import _as_image_tensor, base_grid, warp
from deformreg.core.volume import Volume3D


def _affine_displacement(linear: torch.Tensor, translation: torch.Tensor, shape, dtype) -> torch.Tensor:
    grid = base_grid(shape, dtype=dtype)
    center = torch.tensor([(n - 1) / 2.0 for n in shape], dtype=dtype)
    centered = grid - center
    pos = centered @ linear.t() + center + translation
    return pos - grid


def affine_prealign(
    fixed,
    moving,
    iters: int = 120,
    translation_lr: float = 0.1,
    linear_lr: float = 0.005,
):
    """Return (warped_moving, params) with params a (3, 4) matrix [A | t].

    The result is never worse than the identity under the NCC loss: the
    best iterate (including the untouched initialization) is returned.
    """
    from deformreg.losses import ncc_loss

    fixed_t = _as_image_tensor(fixed).to(torch.float32)
    moving_t = _as_image_tensor(moving).to(torch.float32)
    if fixed_t.shape != moving_t.shape:
        raise ValueError(f"shape mismatch {tuple(fixed_t.shape)} vs {tuple(moving_t.shape)}")
    shape = tuple(fixed_t.shape)

    delta = torch.zeros(3, 3, requires_grad=True)
    translation = torch.zeros(3, requires_grad=True)
    eye = torch.eye(3)
    opt = torch.optim.Adam(
        [
            {"params": [translation], "lr": translation_lr},
            {"params": [delta], "lr": linear_lr},
        ]
    )

    best_loss = float("inf")
    best = (eye.clone(), torch.zeros(3))
    for _ in range(iters):
        opt.zero_grad()
        u = _affine_displacement(eye + delta, translation, shape, torch.float32)
        loss = ncc_loss(fixed_t, warp(moving_t, u))
        if not torch.isfinite(loss):
            raise RuntimeError("affine pre-alignment diverged: non-finite NCC loss")
        if float(loss) < best_loss:
            best_loss = float(loss)
            best = ((eye + delta).detach().clone(), translation.detach().clone())
        loss.backward()
        opt.step()

    with torch.no_grad():
        u = _affine_displacement(best[0], best[1], shape, torch.float32)
        final = ncc_loss(fixed_t, warp(moving_t, u))
        if float(final) > best_loss + 1e-6:  # should not happen; keep contract explicit
            best = (eye.clone(), torch.zeros(3))
            u = torch.zeros(shape + (3,))
        warped = warp(moving_t, u)

    params = np.concatenate(
        [best[0].numpy(), best[1].numpy().reshape(3, 1)], axis=1
    ).astype(np.float32)
    if isinstance(moving, Volume3D):
        return moving.with_data(warped.numpy()), params
    return warped, params
