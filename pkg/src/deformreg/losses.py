"""Differentiable similarity and regularization terms.

All losses follow a "lower is better" convention: similarities are negated.
Mutual information is estimated with Gaussian soft binning (Parzen
windows): each sample spreads unit mass over histogram bins with Gaussian
weights, the joint histogram is the average per-sample outer product, and
MI is the plug-in estimate sum p * log(p / (p_f * p_m)) in nats.

Intensities must be normalized to [0, 1] before any MI-based loss.
Reductions use fixed einsum orderings so repeated evaluations are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from deformreg.core.ops import _as_field_tensor, _as_image_tensor, divergence, spatial_gradient, warp

EPS = 1e-8
DEFAULT_BINS = 32
# kernel width of half a bin at the default bin count, in intensity units
DEFAULT_PARZEN_SIGMA = 0.5 / DEFAULT_BINS


@dataclass
class LossWeights:
    """Weighting coefficients and MI estimator settings.

    alpha_div = 0 disables the divergence penalty in the TTO objective.
    """

    lambda_sim: float = 1.0
    lambda_smooth: float = 0.1
    lambda_dist: float = 1.0
    alpha_div: float = 0.1
    bins: int = DEFAULT_BINS
    parzen_sigma: float = DEFAULT_PARZEN_SIGMA

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.parzen_sigma <= 0:
            raise ValueError(f"parzen_sigma must be positive, got {self.parzen_sigma}")
        for name in ("lambda_sim", "lambda_smooth", "lambda_dist", "alpha_div"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _soft_weights(x: torch.Tensor, bins: int, sigma: float) -> torch.Tensor:
    """Per-sample Gaussian bin weights, normalized to sum to 1: (..., bins)."""
    centers = (torch.arange(bins, dtype=x.dtype, device=x.device) + 0.5) / bins
    z = (x.unsqueeze(-1) - centers) / sigma
    w = torch.exp(-0.5 * z * z)
    return w / w.sum(dim=-1, keepdim=True).clamp_min(EPS)


def _mi_from_joint(joint: torch.Tensor) -> torch.Tensor:
    """Plug-in MI in nats from normalized joint histograms (..., B, B)."""
    pf = joint.sum(dim=-1)
    pm = joint.sum(dim=-2)
    log_ratio = (
        torch.log(joint + EPS)
        - torch.log(pf + EPS).unsqueeze(-1)
        - torch.log(pm + EPS).unsqueeze(-2)
    )
    return (joint * log_ratio).sum(dim=(-2, -1))


def soft_mi_2d(
    slice_a,
    slice_b,
    bins: int = DEFAULT_BINS,
    parzen_sigma: float = DEFAULT_PARZEN_SIGMA,
) -> torch.Tensor:
    """Differentiable mutual information between two 2-D slices (nats)."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    a = torch.as_tensor(slice_a)
    b = torch.as_tensor(slice_b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"slices must share a 2-D shape, got {tuple(a.shape)} vs {tuple(b.shape)}")
    dtype = torch.promote_types(a.dtype, b.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float32
    wa = _soft_weights(a.reshape(-1).to(dtype), bins, parzen_sigma)
    wb = _soft_weights(b.reshape(-1).to(dtype), bins, parzen_sigma)
    joint = wa.t() @ wb / wa.shape[0]
    return _mi_from_joint(joint)


def soft_marginal_entropy(
    slice_a, bins: int = DEFAULT_BINS, parzen_sigma: float = DEFAULT_PARZEN_SIGMA
) -> torch.Tensor:
    """Entropy of the soft-binned marginal of a slice (nats)."""
    a = torch.as_tensor(slice_a)
    dtype = a.dtype if a.dtype.is_floating_point else torch.float32
    w = _soft_weights(a.reshape(-1).to(dtype), bins, parzen_sigma)
    p = w.mean(dim=0)
    return -(p * torch.log(p + EPS)).sum()


def multi_axis_mi(fixed, warped, cfg: LossWeights | None = None) -> torch.Tensor:
    """Negated mean of slice-wise MI over all H + W + D slices of the pair.

    Slices are taken along each of the three axes; every slice contributes
    one MI term and the average is divided by (H + W + D).
    """
    cfg = cfg or LossWeights()
    f = _as_image_tensor(fixed)
    m = _as_image_tensor(warped)
    if f.shape != m.shape:
        raise ValueError(f"shape mismatch {tuple(f.shape)} vs {tuple(m.shape)}")
    dtype = torch.promote_types(f.dtype, m.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float32
    wf = _soft_weights(f.to(dtype), cfg.bins, cfg.parzen_sigma)
    wm = _soft_weights(m.to(dtype), cfg.bins, cfg.parzen_sigma)
    H, W, D = f.shape

    joints = [
        torch.einsum("hwda,hwdb->hab", wf, wm) / (W * D),
        torch.einsum("hwda,hwdb->wab", wf, wm) / (H * D),
        torch.einsum("hwda,hwdb->dab", wf, wm) / (H * W),
    ]
    total = sum(_mi_from_joint(j).sum() for j in joints)
    return -total / (H + W + D)


def ncc_loss(fixed, warped) -> torch.Tensor:
    """Negative global Pearson correlation; two constant inputs give 0."""
    f = _as_image_tensor(fixed)
    m = _as_image_tensor(warped)
    if f.shape != m.shape:
        raise ValueError(f"shape mismatch {tuple(f.shape)} vs {tuple(m.shape)}")
    dtype = torch.promote_types(f.dtype, m.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float32
    fc = f.to(dtype).reshape(-1)
    mc = m.to(dtype).reshape(-1)
    fc = fc - fc.mean()
    mc = mc - mc.mean()
    denom = (fc.square().sum().sqrt() * mc.square().sum().sqrt()).clamp_min(EPS)
    return -(fc * mc).sum() / denom


def smoothness(u) -> torch.Tensor:
    """Mean over voxels of squared forward differences, summed over the
    3 components x 3 axes; zero iff the field is constant."""
    t = _as_field_tensor(u)
    grads = spatial_gradient(t)
    n_vox = t.shape[0] * t.shape[1] * t.shape[2]
    return grads.square().sum() / n_vox


def divergence_penalty(u) -> torch.Tensor:
    """Mean squared divergence of the field (near-incompressibility)."""
    return divergence(u).square().mean()


def pretrain_loss(fixed, moving, u, cfg: LossWeights | None = None) -> torch.Tensor:
    """Composite pretraining objective: weighted multi-axis MI of the
    warped pair plus smoothness of the field."""
    cfg = cfg or LossWeights()
    warped = warp(moving, u)
    return cfg.lambda_sim * multi_axis_mi(fixed, warped, cfg) + cfg.lambda_smooth * smoothness(u)


def kd_loss(fixed, moving, u_teacher, u_student, cfg: LossWeights | None = None) -> torch.Tensor:
    """Distillation objective: the student's warp is pulled toward the
    (frozen) teacher's warp and toward the fixed image, with smoothness on
    the student field only.  No gradient flows into u_teacher."""
    cfg = cfg or LossWeights()
    u_t = _as_field_tensor(u_teacher).detach()
    warped_t = warp(moving, u_t)
    warped_s = warp(moving, u_student)
    return (
        cfg.lambda_dist * multi_axis_mi(warped_t, warped_s, cfg)
        + cfg.lambda_sim * multi_axis_mi(fixed, warped_s, cfg)
        + cfg.lambda_smooth * smoothness(u_student)
    )


def tto_loss(fixed, moving, u, cfg: LossWeights | None = None) -> torch.Tensor:
    """Test-time objective: multi-axis MI + NCC similarity, smoothness,
    and optional divergence penalty (alpha_div = 0 disables it)."""
    cfg = cfg or LossWeights()
    warped = warp(moving, u)
    sim = multi_axis_mi(fixed, warped, cfg) + ncc_loss(fixed, warped)
    loss = cfg.lambda_sim * sim + cfg.lambda_smooth * smoothness(u)
    if cfg.alpha_div != 0:
        loss = loss + cfg.alpha_div * divergence_penalty(u)
    return loss
