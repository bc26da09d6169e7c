"""PBTK1 binary arrays, CSV export and the small CSV writers used by traces.

PBTK1 layout (all little-endian)::

    8 bytes   magic  b"PBTK1\\0\\0\\0"
    4 x u32   kind (0 image, 1 sinogram, 2 parameters), rows, cols, reserved=0
    f64[]     payload, row-major
    u32       CRC32 of the payload bytes
"""
from __future__ import annotations

import csv
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

MAGIC = b"PBTK1\0\0\0"
KIND_IMAGE = 0
KIND_SINOGRAM = 1
KIND_PARAMS = 2
_HEADER = struct.Struct("<8s4I")


def encode(array, kind: int) -> bytes:
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        rows, cols = 1, a.shape[0]
    elif a.ndim == 2:
        rows, cols = a.shape
    else:
        raise InvalidArgument(f"PBTK1 stores 1-D or 2-D arrays, got ndim={a.ndim}")
    payload = np.ascontiguousarray(a).tobytes()
    return _HEADER.pack(MAGIC, kind, rows, cols, 0) + payload + struct.pack("<I", zlib.crc32(payload))


def decode(blob: bytes) -> tuple[int, np.ndarray]:
    if len(blob) < _HEADER.size + 4:
        raise InvalidArgument("truncated PBTK1 blob")
    magic, kind, rows, cols, reserved = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise InvalidArgument(f"bad PBTK1 magic {magic!r}")
    if reserved != 0:
        raise InvalidArgument("PBTK1 reserved field must be zero")
    nbytes = rows * cols * 8
    if len(blob) != _HEADER.size + nbytes + 4:
        raise InvalidArgument(f"PBTK1 size mismatch: header says {rows}x{cols}, blob has {len(blob)} bytes")
    payload = blob[_HEADER.size:_HEADER.size + nbytes]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + nbytes)
    if crc != zlib.crc32(payload):
        raise InvalidArgument("PBTK1 CRC mismatch")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return kind, arr


def save_array(path, array, kind: int) -> Path:
    path = Path(path)
    path.write_bytes(encode(array, kind))
    return path


def load_array(path, expect_kind: int | None = None) -> np.ndarray:
    kind, arr = decode(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise InvalidArgument(f"{path}: expected PBTK1 kind {expect_kind}, found {kind}")
    return arr


def save_csv(path, array) -> None:
    """One row per array row, 17 significant digits (exact f64 round trip)."""
    np.savetxt(path, np.atleast_2d(np.asarray(array, dtype=np.float64)), delimiter=",", fmt="%.17g")


def load_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def save_pgm(path, img, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM preview with a linear window ``[lo, hi]``."""
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if lo is None else float(lo)
    hi = float(img.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    px = np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + px.tobytes())


def data_dir(default) -> Path:
    return Path(os.environ.get("PARBEAM_DATA_DIR", default))
