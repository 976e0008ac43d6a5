"""Stage drivers: teacher pretraining, knowledge distillation, and
per-pair test-time optimization (TTO).

Training consumes synthetic pairs generated on the fly; the pair for
(epoch, index) is derived deterministically from the run seed, so a rerun
with the same config reproduces checkpoints and loss traces bit for bit.

TTO clones the supplied network, brings the pair onto the network grid
with pad_or_resample_for_network, optimizes all parameters with Adam until
the epoch or wall-clock budget is exhausted, and restores the field and
the warped moving image to native geometry.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from deformreg.core.ops import warp
from deformreg.core.volume import (
    DisplacementField,
    Volume3D,
    pad_or_resample_for_network,
    restore_ddf_native,
    restore_native,
)
from deformreg.losses import LossWeights, kd_loss, pretrain_loss, tto_loss
from deformreg.network import (
    STUDENT_CONFIG,
    TEACHER_CONFIG,
    NetworkConfig,
    RegistrationNetwork,
    build_network,
    save_checkpoint,
)
from deformreg.synthdata import SynthConfig, generate_pair

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    pairs_per_epoch: int = 500
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # lr = 0 is tolerated as an explicit no-op optimizer
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class TTOConfig:
    max_epochs: int = 100
    max_seconds: float = 60.0
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    resample_mode: str = "pad"
    init_from: str | None = None

    def __post_init__(self):
        if self.max_epochs < 1 or self.max_seconds <= 0:
            raise ValueError("both stopping bounds must be positive")


@dataclass
class RegistrationResult:
    ddf: DisplacementField
    warped: Volume3D
    loss_trace: list[float]
    epochs_run: int
    stop_reason: str  # epoch_budget | time_budget | non_finite_loss
    timing: float
    degraded: bool = False


class TrainingDiverged(RuntimeError):
    """Raised when a training stage hits a non-finite loss; carries the
    last network state that produced finite losses."""

    def __init__(self, message: str, net: RegistrationNetwork, log_entries: list):
        super().__init__(message)
        self.net = net
        self.log_entries = log_entries


def pair_seed(root_seed: int, epoch: int, index: int) -> int:
    """Deterministic per-step seed for on-the-fly pair generation."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, epoch, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**31 - 1))


def _run_synthetic_stage(
    net: RegistrationNetwork,
    cfg: TrainConfig,
    gen_cfg: SynthConfig,
    step_loss,
    checkpoint_dir=None,
    stage: str = "train",
) -> list[dict]:
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    entries: list[dict] = []
    last_good = copy.deepcopy(net.state_dict())
    start = time.monotonic()
    for epoch in range(cfg.epochs):
        losses = []
        for i in range(cfg.pairs_per_epoch):
            pair = generate_pair(pair_seed(cfg.seed, epoch, i), cfg=gen_cfg)
            fixed_t = pair.fixed.tensor()
            moving_t = pair.moving.tensor()
            opt.zero_grad()
            loss = step_loss(net, fixed_t, moving_t)
            if not torch.isfinite(loss):
                net.load_state_dict(last_good)
                raise TrainingDiverged(
                    f"{stage}: non-finite loss at epoch {epoch} pair {i}; "
                    "restored last finite state",
                    net=net,
                    log_entries=entries,
                )
            loss.backward()
            opt.step()
            losses.append(float(loss))
        last_good = copy.deepcopy(net.state_dict())
        entries.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "wall_seconds": time.monotonic() - start,
            }
        )
        if checkpoint_dir is not None and cfg.checkpoint_every > 0:
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                save_checkpoint(net, f"{checkpoint_dir}/{stage}_epoch{epoch + 1:04d}.ckpt")
    return entries


def pretrain_teacher(
    cfg: TrainConfig,
    gen_cfg: SynthConfig | None = None,
    network_cfg: NetworkConfig = TEACHER_CONFIG,
    checkpoint_dir=None,
) -> tuple[RegistrationNetwork, list[dict]]:
    """Train a registration network from scratch on synthetic pairs with
    the composite MI + smoothness objective."""
    gen_cfg = gen_cfg or SynthConfig()
    net = build_network(network_cfg, seed=cfg.seed)

    def step(net, fixed_t, moving_t):
        u = net(fixed_t, moving_t)
        return pretrain_loss(fixed_t, moving_t, u, cfg.weights)

    entries = _run_synthetic_stage(net, cfg, gen_cfg, step, checkpoint_dir, stage="teacher")
    return net, entries


def distill_student(
    teacher: RegistrationNetwork,
    cfg: TrainConfig,
    gen_cfg: SynthConfig | None = None,
    student_cfg: NetworkConfig = STUDENT_CONFIG,
    checkpoint_dir=None,
) -> tuple[RegistrationNetwork, list[dict]]:
    """Train a student to match the frozen teacher's warps; the teacher's
    parameters are never updated."""
    gen_cfg = gen_cfg or SynthConfig()
    student = build_network(student_cfg, seed=cfg.seed)
    teacher.eval()

    def step(student, fixed_t, moving_t):
        with torch.no_grad():
            u_t = teacher(fixed_t, moving_t)
        u_s = student(fixed_t, moving_t)
        return kd_loss(fixed_t, moving_t, u_t, u_s, cfg.weights)

    entries = _run_synthetic_stage(student, cfg, gen_cfg, step, checkpoint_dir, stage="student")
    return student, entries


def tto_register(
    net: RegistrationNetwork,
    fixed: Volume3D,
    moving: Volume3D,
    cfg: TTOConfig | None = None,
) -> RegistrationResult:
    """Self-supervised per-pair optimization of a cloned network.

    Inputs must share shape and be intensity-normalized.  The base network
    is never mutated.  Stops at max_epochs or max_seconds, whichever comes
    first; a non-finite loss returns the best-so-far state flagged
    degraded instead of raising, since TTO serves inference.
    """
    cfg = cfg or TTOConfig()
    if fixed.shape != moving.shape:
        raise ValueError(f"shape mismatch {fixed.shape} vs {moving.shape}")

    fixed_p, rec = pad_or_resample_for_network(fixed, mode=cfg.resample_mode)
    moving_p, _ = pad_or_resample_for_network(moving, mode=cfg.resample_mode)
    fixed_t = fixed_p.tensor()
    moving_t = moving_p.tensor()

    clone = copy.deepcopy(net)
    clone.train()
    opt = torch.optim.Adam(clone.parameters(), lr=cfg.learning_rate)

    trace: list[float] = []
    best_loss = float("inf")
    best_state = copy.deepcopy(clone.state_dict())
    degraded = False
    stop_reason = "epoch_budget"
    start = time.monotonic()
    epochs_run = 0
    for _ in range(cfg.max_epochs):
        opt.zero_grad()
        u = clone(fixed_t, moving_t)
        loss = tto_loss(fixed_t, moving_t, u, cfg.weights)
        if not torch.isfinite(loss):
            clone.load_state_dict(best_state)
            degraded = True
            stop_reason = "non_finite_loss"
            log.warning("TTO hit a non-finite loss; returning best-so-far state")
            break
        value = float(loss)
        if value < best_loss:
            best_loss = value
            best_state = copy.deepcopy(clone.state_dict())
        loss.backward()
        opt.step()
        trace.append(value)
        epochs_run += 1
        if time.monotonic() - start >= cfg.max_seconds:
            stop_reason = "time_budget"
            break
    timing = time.monotonic() - start

    with torch.no_grad():
        u = clone(fixed_t, moving_t)
        warped_p = warp(moving_t, u)
    ddf_p = DisplacementField(u.numpy())
    warped_vol = fixed_p.with_data(warped_p.numpy())
    return RegistrationResult(
        ddf=restore_ddf_native(ddf_p, rec),
        warped=restore_native(warped_vol, rec),
        loss_trace=trace,
        epochs_run=epochs_run,
        stop_reason=stop_reason,
        timing=timing,
        degraded=degraded,
    )


def register_batch(
    net: RegistrationNetwork,
    series: list[tuple[Volume3D, Volume3D]],
    cfg: TTOConfig | None = None,
) -> list[RegistrationResult | None]:
    """Independent TTO per (fixed, moving) pair from the same base
    checkpoint.  A failing pair yields None in its slot; the batch
    continues."""
    results: list[RegistrationResult | None] = []
    for idx, (fixed, moving) in enumerate(series):
        try:
            results.append(tto_register(net, fixed, moving, cfg))
        except Exception:  # noqa: BLE001 - isolate per-pair failures
            log.exception("registration failed for pair %d; continuing", idx)
            results.append(None)
    return results
