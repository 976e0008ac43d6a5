"""Volume I/O: raw+json sidecar format and a minimal NIfTI-1 codec.

raw+json stores a little-endian float32 buffer in x-fastest order (array
axis 0 varies fastest) next to a JSON header::

    {"shape": [H, W, D], "spacing": [sx, sy, sz], "dtype": "f32"}

The NIfTI-1 path reads/writes shape, spacing and scalar data for .nii and
.nii.gz files; orientation information beyond spacing (qform/sform block)
is carried through as opaque bytes in Volume3D.meta and re-emitted on save.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from deformreg.core.volume import Volume3D

_NIFTI_HDR_SIZE = 348
_NIFTI_VOX_OFFSET = 352.0
# datatype code -> numpy dtype (little-endian)
_NIFTI_DTYPES = {
    2: "<u1",
    4: "<i2",
    8: "<i4",
    16: "<f4",
    64: "<f8",
    256: "<i1",
    512: "<u2",
    768: "<u4",
}
_ORIENT_SLICE = slice(252, 344)  # qform/sform codes + quaternion + srows


def _detect_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".raw") or name.endswith(".json"):
        return "raw+json"
    raise ValueError(f"cannot infer volume format from {path.name!r}; pass format=")


def _raw_paths(path: Path) -> tuple[Path, Path]:
    name = path.name
    if name.endswith(".json"):
        stem = name[: -len(".json")]
    elif name.endswith(".raw"):
        stem = name[: -len(".raw")]
    else:
        stem = name
    return path.with_name(stem + ".raw"), path.with_name(stem + ".json")


def _load_raw_json(path: Path) -> Volume3D:
    raw_path, json_path = _raw_paths(path)
    if not json_path.exists():
        raise FileNotFoundError(f"missing sidecar header {json_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw buffer {raw_path}")
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed raw+json header {json_path}: {exc}") from exc
    for key in ("shape", "spacing", "dtype"):
        if key not in header:
            raise ValueError(f"raw+json header {json_path} lacks required key {key!r}")
    if header["dtype"] != "f32":
        raise ValueError(f"unsupported raw dtype {header['dtype']!r} (only f32)")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise ValueError(f"bad shape {header['shape']} in {json_path}")
    buf = raw_path.read_bytes()
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(buf) != expected:
        raise ValueError(
            f"{raw_path}: buffer holds {len(buf)} bytes, header implies {expected}"
        )
    data = np.frombuffer(buf, dtype="<f4").reshape(shape, order="F")
    return Volume3D(data=data.copy(), spacing=tuple(float(s) for s in header["spacing"]))


def _save_raw_json(vol: Volume3D, path: Path) -> None:
    raw_path, json_path = _raw_paths(path)
    raw_path.write_bytes(vol.data.astype("<f4").ravel(order="F").tobytes())
    header = {
        "shape": [int(n) for n in vol.shape],
        "spacing": [float(s) for s in vol.spacing],
        "dtype": "f32",
    }
    json_path.write_text(json.dumps(header, indent=2) + "\n")


def _read_maybe_gz(path: Path) -> bytes:
    if path.name.lower().endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _load_nifti(path: Path) -> Volume3D:
    blob = _read_maybe_gz(path)
    if len(blob) < _NIFTI_HDR_SIZE + 4:
        raise ValueError(f"{path}: file too small for a NIfTI-1 header")
    hdr = blob[:_NIFTI_HDR_SIZE]
    (sizeof_hdr,) = struct.unpack("<i", hdr[0:4])
    swapped = False
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        (sizeof_hdr,) = struct.unpack(">i", hdr[0:4])
        if sizeof_hdr != _NIFTI_HDR_SIZE:
            raise ValueError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        swapped = True
    end = ">" if swapped else "<"
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
    dim = struct.unpack(end + "8h", hdr[40:56])
    ndim = dim[0]
    if ndim < 3 or any(d <= 0 for d in dim[1:4]):
        raise ValueError(f"{path}: need a 3-D volume, got dim={dim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : 1 + ndim]):
        raise ValueError(f"{path}: only single-frame 3-D volumes are supported")
    shape = tuple(dim[1:4])
    (datatype,) = struct.unpack(end + "h", hdr[70:72])
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_NIFTI_DTYPES[datatype])
    if swapped:
        dtype = dtype.newbyteorder(">")
    pixdim = struct.unpack(end + "8f", hdr[76:108])
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack(end + "f", hdr[108:112])
    offset = int(vox_offset) if vox_offset >= _NIFTI_HDR_SIZE else _NIFTI_HDR_SIZE + 4
    slope, inter = struct.unpack(end + "2f", hdr[112:120])

    count = shape[0] * shape[1] * shape[2]
    payload = blob[offset : offset + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise ValueError(f"{path}: voxel payload truncated")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    data = data.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = data * np.float32(slope) + np.float32(inter)
    meta = {"nifti_orient": hdr[_ORIENT_SLICE]}
    return Volume3D(data=data.copy(), spacing=spacing, meta=meta)


def _save_nifti(vol: Volume3D, path: Path) -> None:
    H, W, D = vol.shape
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, H, W, D, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, _NIFTI_VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    orient = vol.meta.get("nifti_orient")
    if isinstance(orient, (bytes, bytearray)) and len(orient) == 344 - 252:
        hdr[_ORIENT_SLICE] = bytes(orient)
    else:
        # canonical sform: diagonal spacing, origin 0
        struct.pack_into("<2h", hdr, 252, 0, 1)
        struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, 0.0)
        struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, 0.0)
        struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, 0.0)
    hdr[344:348] = b"n+1\x00"

    blob = bytes(hdr) + b"\x00\x00\x00\x00" + vol.data.astype("<f4").ravel(order="F").tobytes()
    if path.name.lower().endswith(".gz"):
        with gzip.open(path, "wb", mtime=0) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def load_volume(path, format: str | None = None) -> Volume3D:
    """Load a Volume3D from a NIfTI-1 or raw+json file."""
    path = Path(path)
    fmt = format or _detect_format(path)
    if fmt == "nifti":
        if not path.exists():
            raise FileNotFoundError(f"no such volume {path}")
        return _load_nifti(path)
    if fmt == "raw+json":
        return _load_raw_json(path)
    raise ValueError(f"unknown format {fmt!r}")


def save_volume(vol: Volume3D, path, format: str | None = None) -> None:
    """Write a Volume3D; raw+json round-trips bit-faithfully."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = format or _detect_format(path)
    if fmt == "nifti":
        _save_nifti(vol, path)
    elif fmt == "raw+json":
        _save_raw_json(vol, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
