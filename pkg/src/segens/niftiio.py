"""Minimal NIfTI-1 reader/writer for challenge-format volumes.

Covers the subset the segmentation challenges actually ship: single-file
.nii / .nii.gz, 3-D grids, integer or float voxel types, spacing in
pixdim[1..3], optional scl slope/intercept. Arrays are exposed in (z, y, x)
order (slices, rows, cols); on disk NIfTI stores x-fastest, so axes are
transposed on the way through.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

_HDR_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag

# NIfTI-1 datatype codes we accept.
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
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read one volume; returns (array (z, y, x), spacing (z_mm, y_mm, x_mm)).

    Raises OSError for missing or malformed files.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    raw = _open_bytes(path)
    if len(raw) < _HDR_SIZE:
        raise OSError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")

    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(endian + "i", raw, 0)
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise OSError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise OSError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 3 <= ndim <= 4 or (ndim == 4 and dim[4] != 1):
        raise OSError(f"{path}: expected a 3-D volume, got dim={dim}")
    nx, ny, nz = dim[1], dim[2], dim[3]

    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPES:
        raise OSError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)

    offset = int(vox_offset) if vox_offset >= _HDR_SIZE else _VOX_OFFSET
    count = nx * ny * nz
    data = raw[offset : offset + count * dtype.itemsize]
    if len(data) != count * dtype.itemsize:
        raise OSError(f"{path}: voxel data truncated")
    arr = np.frombuffer(data, dtype=dtype).reshape((nx, ny, nz), order="F")
    arr = np.ascontiguousarray(arr.transpose(2, 1, 0))  # -> (z, y, x)

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter

    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return arr, spacing


def write_nifti(
    path: str | Path, arr: np.ndarray, spacing: tuple[float, float, float]
) -> None:
    """Write one (z, y, x) volume as single-file NIfTI-1, gzipped if path ends .gz."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {arr.shape}")
    if arr.dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype} for NIfTI output")
    dz, dy, dx = (float(s) for s in spacing)

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, arr.shape[2], arr.shape[1], arr.shape[0], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[arr.dtype])
    struct.pack_into("<h", hdr, 72, arr.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl slope/inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform scaled-voxel
    struct.pack_into("<4f", hdr, 280, dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, dy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, dz, 0.0)
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + arr.transpose(2, 1, 0).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with gzip.open(path, "wb", compresslevel=4) as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
