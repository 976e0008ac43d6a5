"""Teacher and student 3D U-Net registration networks.

The network maps a (fixed, moving) pair, concatenated as two input
channels, to a dense displacement field with 3 output channels.  Encoder
levels apply one 3x3x3 convolution + LeakyReLU each, with 2x2x2 max
pooling between levels; the bottleneck applies two convolutions; the
decoder starts with one convolution at bottleneck resolution and then
repeats (nearest-neighbor x2 upsample, concatenate skip, convolution).
Full-resolution refinement blocks follow, and a zero-initialized 1x1x1
head emits the displacement field, so an untrained network realizes the
identity transform.

Checkpoint container (format version 1)::

    magic b"DREGCKP1" | uint32 header_len | JSON header | tensor payload

The JSON header carries the config, the build seed, a manifest of named
float32 tensors (shape/offset/size), and the SHA-256 of the payload.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from deformreg.core.volume import DisplacementField, Volume3D

_MAGIC = b"DREGCKP1"
_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 32, 64)
    bottleneck_channels: int = 64
    decoder_channels: tuple[int, ...] = (64, 32, 32, 16)
    refine_channels: int = 16
    refine_blocks: int = 3
    leaky_slope: float = 0.2
    in_channels: int = 2
    out_channels: int = 3
    mode: str = "custom"

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise ValueError("decoder_channels must mirror encoder_channels in length")
        if not self.encoder_channels:
            raise ValueError("need at least one encoder level")
        if not 0 < self.leaky_slope < 1:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.out_channels != 3:
            raise ValueError("displacement head must have 3 output channels")
        if self.refine_blocks < 0:
            raise ValueError("refine_blocks must be >= 0")

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.levels - 1)


TEACHER_CONFIG = NetworkConfig(
    encoder_channels=(16, 32, 32, 64),
    bottleneck_channels=64,
    decoder_channels=(64, 32, 32, 16),
    mode="teacher",
)

STUDENT_CONFIG = NetworkConfig(
    encoder_channels=(16, 24, 24, 32),
    bottleneck_channels=32,
    decoder_channels=(32, 24, 24, 16),
    mode="student",
)


class RegistrationNetwork(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.seed = None
        enc = config.encoder_channels
        dec = config.decoder_channels

        self.encoder = nn.ModuleList()
        ch = config.in_channels
        for out_ch in enc:
            self.encoder.append(nn.Conv3d(ch, out_ch, 3, padding=1))
            ch = out_ch

        self.bottleneck = nn.ModuleList(
            [
                nn.Conv3d(enc[-1], config.bottleneck_channels, 3, padding=1),
                nn.Conv3d(config.bottleneck_channels, config.bottleneck_channels, 3, padding=1),
            ]
        )

        self.decoder = nn.ModuleList()
        self.decoder.append(nn.Conv3d(config.bottleneck_channels, dec[0], 3, padding=1))
        for i in range(1, len(dec)):
            skip_ch = enc[len(enc) - 1 - i]
            self.decoder.append(nn.Conv3d(dec[i - 1] + skip_ch, dec[i], 3, padding=1))

        self.refine = nn.ModuleList()
        ch = dec[-1]
        for _ in range(config.refine_blocks):
            self.refine.append(nn.Conv3d(ch, config.refine_channels, 3, padding=1))
            ch = config.refine_channels

        self.head = nn.Conv3d(ch, config.out_channels, 1)
        self.pool = nn.MaxPool3d(2)

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(x, negative_slope=self.config.leaky_slope)

    def forward(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        """(H, W, D) pair -> (H, W, D, 3) displacement field, voxel units."""
        if fixed.shape != moving.shape:
            raise ValueError(f"shape mismatch {tuple(fixed.shape)} vs {tuple(moving.shape)}")
        factor = self.config.pool_factor
        if any(int(n) % factor for n in fixed.shape):
            raise ValueError(
                f"input shape {tuple(fixed.shape)} not divisible by {factor} "
                f"({self.config.levels} levels)"
            )
        x = torch.stack([fixed, moving])[None].to(self.head.weight.dtype)

        skips = []
        for i, conv in enumerate(self.encoder):
            if i > 0:
                x = self.pool(x)
            x = self._act(conv(x))
            if i < len(self.encoder) - 1:
                skips.append(x)

        for conv in self.bottleneck:
            x = self._act(conv(x))

        for i, conv in enumerate(self.decoder):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = torch.cat([x, skips[len(skips) - i]], dim=1)
            x = self._act(conv(x))

        for conv in self.refine:
            x = self._act(conv(x))

        u = self.head(x)
        return u[0].permute(1, 2, 3, 0)


def build_network(cfg: NetworkConfig, seed: int = 0) -> RegistrationNetwork:
    """Deterministic construction: Kaiming fan-in init scaled for the
    LeakyReLU slope, biases zero, and a zero displacement head."""
    net = RegistrationNetwork(cfg)
    net.seed = int(seed)
    gen = torch.Generator().manual_seed(int(seed))
    gain = (2.0 / (1.0 + cfg.leaky_slope**2)) ** 0.5
    with torch.no_grad():
        for name, param in net.named_parameters():
            if name.startswith("head"):
                param.zero_()
            elif name.endswith("weight"):
                fan_in = param.shape[1] * param.shape[2] * param.shape[3] * param.shape[4]
                param.normal_(0.0, gain / fan_in**0.5, generator=gen)
            else:
                param.zero_()
    return net


def param_count(net: RegistrationNetwork) -> int:
    return sum(p.numel() for p in net.parameters())


def predict(net: RegistrationNetwork, fixed: Volume3D, moving: Volume3D) -> DisplacementField:
    """Amortized displacement prediction on volumes (no gradient)."""
    with torch.no_grad():
        u = net(fixed.tensor(), moving.tensor())
    return DisplacementField(u.numpy())


def save_checkpoint(net: RegistrationNetwork, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    payload = bytearray()
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f4",
                "offset": len(payload),
                "nbytes": len(blob),
            }
        )
        payload.extend(blob)
    header = {
        "format_version": _FORMAT_VERSION,
        "config": dataclasses.asdict(net.config),
        "seed": net.seed,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "tensors": tensors,
    }
    header_blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_blob)))
        fh.write(header_blob)
        fh.write(bytes(payload))


def load_checkpoint(path, config: NetworkConfig | None = None) -> RegistrationNetwork:
    """Load a checkpoint; rejects bad magic, tampered payloads, and, when
    an expected config is passed, any config mismatch."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a registration checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, len(_MAGIC))
    header_start = len(_MAGIC) + 4
    try:
        header = json.loads(blob[header_start : header_start + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    payload = blob[header_start + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise ValueError(f"{path}: checkpoint payload checksum mismatch")

    embedded = NetworkConfig(**header["config"])
    if config is not None and dataclasses.asdict(config) != dataclasses.asdict(embedded):
        raise ValueError(
            f"{path}: checkpoint config {dataclasses.asdict(embedded)} does not match "
            f"expected {dataclasses.asdict(config)}"
        )
    net = RegistrationNetwork(embedded)
    net.seed = header.get("seed")
    state = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + entry["nbytes"]], dtype="<f4")
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    net.load_state_dict(state, strict=True)
    return net


def checkpoint_digest(net: RegistrationNetwork) -> str:
    """SHA-256 over the network's parameters (order-stable)."""
    h = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
