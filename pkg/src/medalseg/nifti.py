"""Minimal single-file NIfTI-1 reader/writer (.nii / .nii.gz).

Covers exactly what the pipeline needs: axis-aligned spacing from pixdim,
3-D scalar grids and 4-D channel stacks (stored channels-last on disk,
channels-first in memory), common dtypes, gzip by file suffix. No affine
handling beyond a diagonal sform.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .volume import RAW, Volume

HDR_SIZE = 348
MAGIC = b"n+1\x00"

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def save_nifti(path, data: np.ndarray, spacing) -> None:
    """Write a 3-D (H,W,D) or channels-first 4-D (N,H,W,D) array."""
    data = np.asarray(data)
    if data.ndim == 4:
        data = np.moveaxis(data, 0, -1)  # channels become the t axis
    elif data.ndim != 3:
        raise InvalidArgumentError(f"expected 3-D or 4-D array, got shape {data.shape}")
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if data.dtype == np.int64:
        data = data.astype(np.int32)
    if np.dtype(data.dtype) not in _CODES:
        data = data.astype(np.float64)
    code = _CODES[np.dtype(data.dtype)]

    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    pixdim = [1.0, float(spacing[0]), float(spacing[1]), float(spacing[2]), 1.0, 1.0, 1.0, 1.0]

    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<b", hdr, 123, 10)     # xyzt: mm | sec
    struct.pack_into("<h", hdr, 254, 1)      # sform: scaled identity
    struct.pack_into("<4f", hdr, 280, pixdim[1], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, pixdim[2], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, pixdim[3], 0)
    struct.pack_into("<4s", hdr, 344, MAGIC)

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(np.asfortranarray(data).tobytes(order="F"))


def load_nifti(path):
    """Read a NIfTI-1 file; returns (data, spacing).

    3-D files give an (H,W,D) array, 4-D files a channels-first (N,H,W,D).
    """
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HDR_SIZE + 4:
        raise InvalidArgumentError(f"{path}: truncated NIfTI file")

    order = "<"
    if struct.unpack_from("<i", raw, 0)[0] != HDR_SIZE:
        order = ">"
        if struct.unpack_from(">i", raw, 0)[0] != HDR_SIZE:
            raise InvalidArgumentError(f"{path}: not a NIfTI-1 file")
    if raw[344:347] != MAGIC[:3]:
        raise InvalidArgumentError(f"{path}: unsupported NIfTI magic {raw[344:348]!r}")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise InvalidArgumentError(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(int(n) for n in dim[1 : 1 + ndim])
    code = struct.unpack_from(order + "h", raw, 70)[0]
    if code not in _DTYPES:
        raise InvalidArgumentError(f"{path}: unsupported datatype code {code}")
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(order + "f", raw, 108)[0])
    slope, inter = struct.unpack_from(order + "2f", raw, 112)

    dtype = np.dtype(_DTYPES[code]).newbyteorder(order)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * slope + inter
    else:
        data = np.ascontiguousarray(data.astype(data.dtype.newbyteorder("=")))
    if ndim == 4:
        data = np.moveaxis(data, -1, 0)
    spacing = tuple(float(abs(p)) or 1.0 for p in pixdim[1:4])
    return data, spacing


def save_volume(path, v: Volume) -> None:
    save_nifti(path, v.data, v.spacing)


def load_volume(path, modality: str, intensity_domain: str = RAW) -> Volume:
    data, spacing = load_nifti(path)
    if data.ndim != 3:
        raise InvalidArgumentError(f"{path}: expected a scalar volume")
    return Volume(data=data, spacing=spacing, modality=modality, intensity_domain=intensity_domain)


def save_channel_manifest(path, channel_files, class_ids, class_names) -> None:
    """JSON manifest tying per-channel NIfTI files to class identity."""
    entries = [
        {"file": str(f), "class_id": int(i), "class_name": str(n)}
        for f, i, n in zip(channel_files, class_ids, class_names)
    ]
    Path(path).write_text(json.dumps({"channels": entries}, indent=2) + "\n")


def load_channel_manifest(path):
    doc = json.loads(Path(path).read_text())
    return doc["channels"]
