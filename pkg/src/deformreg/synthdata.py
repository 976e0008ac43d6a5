"""Synthetic multi-modal training pairs with ground-truth deformations.

One anatomy (a smooth random label map) is rendered twice with independent
random intensity assignments to simulate two modalities.  The moving
volume's labels are additionally deformed so that warping the moving
volume by the pair's ground-truth field recovers the fixed anatomy:
``warp(moving, gt_ddf)(x) = moving(x + gt_ddf(x))`` lands on the fixed
voxel's tissue class.

The ground-truth field is sampled directly as a free-form B-spline
deformation (control-point displacements are i.i.d. Gaussian B-spline
coefficients); the moving labels are deformed by its numerically inverted
field, so inversion error lives in the rendered data and never in gt_ddf.

Everything is deterministic per (seed, config): sub-streams are derived
with numpy SeedSequence keys, one per purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from deformreg.core.volume import DisplacementField, Volume3D

# SeedSequence sub-stream keys
_KEY_LABELS = 1
_KEY_DDF = 2
_KEY_MODALITY_FIXED = 3
_KEY_MODALITY_MOVING = 4
_KEY_RENDER = 5
_KEY_MEANS = 6


@dataclass
class SynthConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    num_labels: int = 8
    control_spacing: int = 8
    sigma: float = 2.0
    min_region_fraction: float = 0.005
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.05)
    bias_range: tuple[float, float] = (0.8, 1.25)
    gamma_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if not 2 <= self.num_labels <= 32:
            raise ValueError(f"num_labels must be in [2, 32], got {self.num_labels}")
        if self.control_spacing < 4:
            raise ValueError(f"control_spacing must be >= 4, got {self.control_spacing}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class LabelMap:
    labels: np.ndarray
    num_labels: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int16)
        if self.labels.ndim != 3:
            raise ValueError(f"label map must be 3-D, got shape {self.labels.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass
class SyntheticPair:
    fixed: Volume3D
    moving: Volume3D
    gt_ddf: DisplacementField
    fixed_labels: LabelMap
    moving_labels: LabelMap
    seed: int


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def sample_label_map(
    seed: int, shape, num_labels: int, min_region_fraction: float = 0.005
) -> LabelMap:
    """Argmax of smooth multi-scale noise fields; labels whose region falls
    below min_region_fraction of the domain are merged away."""
    shape = tuple(int(n) for n in shape)
    if any(n < 4 for n in shape):
        raise ValueError(f"degenerate shape {shape}")
    if not 2 <= num_labels <= 32:
        raise ValueError(f"num_labels must be in [2, 32], got {num_labels}")
    rng = _rng(seed, _KEY_LABELS)
    coarse = max(max(shape) / 5.0, 2.0)
    fine = max(max(shape) / 12.0, 1.0)
    fields = []
    for _ in range(num_labels):
        f = ndimage.gaussian_filter(rng.standard_normal(shape), coarse)
        f = f / max(f.std(), 1e-8)
        g = ndimage.gaussian_filter(rng.standard_normal(shape), fine)
        g = g / max(g.std(), 1e-8)
        fields.append(f + 0.5 * g)
    stack = np.stack(fields)

    total = int(np.prod(shape))
    min_count = min_region_fraction * total
    active = list(range(num_labels))
    while True:
        labels = np.argmax(stack[active], axis=0)
        counts = np.bincount(labels.ravel(), minlength=len(active))
        small = [i for i, c in enumerate(counts) if 0 < c < min_count]
        if not small or len(active) <= 2:
            break
        drop = min(small, key=lambda i: counts[i])
        active.pop(drop)

    # relabel to consecutive ids over labels that actually appear
    present = np.unique(labels)
    remap = np.zeros(len(active), dtype=np.int16)
    remap[present] = np.arange(len(present), dtype=np.int16)
    return LabelMap(labels=remap[labels], num_labels=int(len(present)))


def random_bspline_ddf(
    seed: int, shape, control_spacing: int = 8, sigma: float = 2.0
) -> DisplacementField:
    """Free-form deformation: i.i.d. Gaussian(0, sigma^2) control-point
    displacements used as cubic B-spline coefficients and evaluated on the
    dense grid.  The B-spline weights form a partition of unity, so the
    dense field magnitude never exceeds the largest control displacement.
    """
    shape = tuple(int(n) for n in shape)
    if control_spacing < 4:
        raise ValueError(f"control_spacing must be >= 4, got {control_spacing}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return DisplacementField.zeros(shape)
    rng = _rng(seed, _KEY_DDF)
    margin = 2
    ctrl_shape = tuple(int(np.ceil((n - 1) / control_spacing)) + 1 + 2 * margin for n in shape)
    coeffs = rng.normal(0.0, sigma, size=(3,) + ctrl_shape)
    axes = [np.arange(n) / control_spacing + margin for n in shape]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    comps = [
        ndimage.map_coordinates(coeffs[c], coords, order=3, mode="nearest", prefilter=False)
        for c in range(3)
    ]
    return DisplacementField(np.stack(comps, axis=-1).astype(np.float32))


def invert_ddf(u: DisplacementField, iterations: int = 12) -> DisplacementField:
    """Fixed-point inverse displacement: v(x) = -u(x + v(x)).

    Converges for smooth fields with contraction factor below one (small
    displacement relative to its spatial wavelength), which B-spline fields
    from random_bspline_ddf at the default settings satisfy; residuals
    shrink geometrically per iteration.
    """
    import torch
    import torch.nn.functional as F

    shape = u.shape
    field = torch.as_tensor(u.vectors, dtype=torch.float64).permute(3, 0, 1, 2)[None]
    base = torch.stack(
        torch.meshgrid(*[torch.arange(n, dtype=torch.float64) for n in shape], indexing="ij"),
        dim=-1,
    )
    denom = torch.tensor([max(n - 1, 1) for n in shape], dtype=torch.float64)
    v = torch.zeros(shape + (3,), dtype=torch.float64)
    for _ in range(iterations):
        pos = 2.0 * (base + v) / denom - 1.0
        grid = torch.stack([pos[..., 2], pos[..., 1], pos[..., 0]], dim=-1)[None]
        sampled = F.grid_sample(
            field, grid, mode="bilinear", padding_mode="border", align_corners=True
        )
        v = -sampled[0].permute(1, 2, 3, 0)
    return DisplacementField(v.numpy().astype(np.float32))


def warp_labels(labels: LabelMap, u: DisplacementField) -> LabelMap:
    """Pull labels through a displacement field with nearest sampling."""
    if labels.shape != u.shape:
        raise ValueError(f"shape mismatch {labels.shape} vs {u.shape}")
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in labels.shape], indexing="ij")
    )
    pos = grid + np.moveaxis(u.vectors.astype(np.float64), -1, 0)
    warped = ndimage.map_coordinates(labels.labels, pos, order=0, mode="nearest")
    return LabelMap(labels=warped, num_labels=labels.num_labels)


def render_intensity(
    labels: LabelMap,
    seed: int,
    modality_seed: int,
    blur_sigma_range: tuple[float, float] = (0.5, 1.5),
    noise_sigma_range: tuple[float, float] = (0.0, 0.05),
    bias_range: tuple[float, float] = (0.8, 1.25),
    gamma_range: tuple[float, float] = (0.5, 2.0),
) -> Volume3D:
    """Render a label map into an intensity volume.

    Stages, in order: per-label mean intensities drawn uniformly in [0, 1]
    from modality_seed (the multi-modal simulation), Gaussian blur,
    additive Gaussian noise, clamp to [0, 1], monotone gamma remap, smooth
    multiplicative bias field, final clamp to [0, 1].  Intermediate values
    never exceed 1 + bias headroom.
    """
    means_rng = _rng(modality_seed, _KEY_MEANS)
    means = means_rng.uniform(0.0, 1.0, size=labels.num_labels)
    vol = means[np.clip(labels.labels, 0, labels.num_labels - 1)]

    rng = _rng(seed, modality_seed, _KEY_RENDER)
    blur_sigma = rng.uniform(*blur_sigma_range)
    noise_sigma = rng.uniform(*noise_sigma_range)
    gamma = rng.uniform(*gamma_range)
    bias_lo, bias_hi = bias_range
    bias_noise = rng.standard_normal(labels.shape)

    if blur_sigma > 0:
        vol = ndimage.gaussian_filter(vol, blur_sigma)
    if noise_sigma > 0:
        vol = vol + rng.normal(0.0, noise_sigma, size=labels.shape)
    vol = np.clip(vol, 0.0, 1.0)
    if gamma != 1.0:
        vol = vol**gamma
    if bias_hi > bias_lo:
        smooth = ndimage.gaussian_filter(bias_noise, max(labels.shape) / 4.0)
        span = smooth.max() - smooth.min()
        if span > 0:
            bias = bias_lo + (bias_hi - bias_lo) * (smooth - smooth.min()) / span
        else:
            bias = np.full(labels.shape, (bias_lo + bias_hi) / 2.0)
        vol = vol * bias
    elif bias_lo != 1.0:
        vol = vol * bias_lo
    vol = np.clip(vol, 0.0, 1.0)
    return Volume3D(data=vol.astype(np.float32))


def _render_ranges(cfg: SynthConfig) -> dict:
    return {
        "blur_sigma_range": cfg.blur_sigma_range,
        "noise_sigma_range": cfg.noise_sigma_range,
        "bias_range": cfg.bias_range,
        "gamma_range": cfg.gamma_range,
    }


def generate_pair(seed: int, shape=None, cfg: SynthConfig | None = None) -> SyntheticPair:
    """Labels -> deform -> render pipeline for one training pair."""
    cfg = cfg or SynthConfig()
    if shape is not None:
        cfg = replace(cfg, shape=tuple(int(n) for n in shape))
    if any(n % 16 for n in cfg.shape):
        raise ValueError(f"pair shape must be a multiple of 16 per axis, got {cfg.shape}")

    fixed_labels = sample_label_map(seed, cfg.shape, cfg.num_labels, cfg.min_region_fraction)
    gt = random_bspline_ddf(seed, cfg.shape, cfg.control_spacing, cfg.sigma)
    if cfg.sigma == 0:
        moving_labels = LabelMap(fixed_labels.labels.copy(), fixed_labels.num_labels)
    else:
        moving_labels = warp_labels(fixed_labels, invert_ddf(gt))

    mod_fixed = int(_rng(seed, _KEY_MODALITY_FIXED).integers(0, 2**31 - 1))
    mod_moving = int(_rng(seed, _KEY_MODALITY_MOVING).integers(0, 2**31 - 1))
    ranges = _render_ranges(cfg)
    fixed = render_intensity(fixed_labels, seed, mod_fixed, **ranges)
    moving = render_intensity(moving_labels, seed, mod_moving, **ranges)
    return SyntheticPair(
        fixed=fixed,
        moving=moving,
        gt_ddf=gt,
        fixed_labels=fixed_labels,
        moving_labels=moving_labels,
        seed=int(seed),
    )
