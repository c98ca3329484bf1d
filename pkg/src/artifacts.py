from __future__ import annotations

"""
On-disk formats of everything a run emits.

- PGM (P5) / PPM (P6) 8-bit images;
- depth maps: header b"SDSLAB-DEPTH" then H and W as little-endian int32
  (20 bytes in total), followed by float32 little-endian values;
- field snapshots: header b"SDSLAB-FIELD", resolution (<i4) and extent
  (<f8), then density and color as float32 little-endian;
- CSV tables with a header row.

Encoders return bytes so a run can checksum its artifacts before (or
without) touching the disk; write_atomic then lands them through a
temp file and os.replace.
"""

import hashlib
import io
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Tuple

import numpy as np

from .errors import ShapeError

DEPTH_MAGIC = b"SDSLAB-DEPTH"
FIELD_MAGIC = b"SDSLAB-FIELD"


# -------------------------------------------------------------------
# Atomic writes
# -------------------------------------------------------------------


def write_atomic(path: Path, data: bytes) -> Path:
    """Write bytes through a sibling temp file so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def write_artifacts(out_dir: Path, artifacts: Mapping[str, bytes]) -> None:
    for name in sorted(artifacts):
        write_atomic(Path(out_dir) / name, artifacts[name])


def checksum(artifacts: Mapping[str, bytes]) -> str:
    """sha256 over (name, payload) pairs in name order."""
    h = hashlib.sha256()
    for name in sorted(artifacts):
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(hashlib.sha256(artifacts[name]).digest())
    return h.hexdigest()


# -------------------------------------------------------------------
# Images
# -------------------------------------------------------------------


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(gray: np.ndarray) -> bytes:
    """Grayscale image with values in [0, 1] as binary PGM."""
    img = np.asarray(gray)
    if img.ndim != 2:
        raise ShapeError(f"PGM expects a 2D array, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + _to_u8(img).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    """RGB image (H, W, 3) with values in [0, 1] as binary PPM."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM expects an (H, W, 3) array, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_u8(img).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Inverse of encode_pgm / encode_ppm, returning uint8 pixels."""
    parts = data.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ShapeError(f"Unsupported PNM header {magic!r} maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    # The payload may itself start with whitespace bytes, so slice it from the end.
    pixels = np.frombuffer(data[len(data) - w * h * channels :], dtype=np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return pixels.reshape(shape)


# -------------------------------------------------------------------
# Depth maps
# -------------------------------------------------------------------


def encode_depth(depth: np.ndarray) -> bytes:
    """Depth map as magic + (H, W) little-endian int32 + float32 values."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"Depth map must be 2D, got shape {d.shape}")
    h, w = d.shape
    return DEPTH_MAGIC + struct.pack("<ii", h, w) + d.astype("<f4").tobytes()


def decode_depth(data: bytes) -> np.ndarray:
    if data[:12] != DEPTH_MAGIC:
        raise ShapeError("Not a depth map (bad magic)")
    h, w = struct.unpack("<ii", data[12:20])
    return np.frombuffer(data[20:], dtype="<f4").reshape(h, w).astype(np.float64)


# -------------------------------------------------------------------
# Field snapshots
# -------------------------------------------------------------------


def encode_field(density: np.ndarray, color: np.ndarray, extent: float) -> bytes:
    sigma = np.asarray(density, dtype=np.float64)
    rgb = np.asarray(color, dtype=np.float64)
    r = sigma.shape[0]
    if sigma.shape != (r, r, r) or rgb.shape != (r, r, r, 3):
        raise ShapeError(f"Field arrays have shapes {sigma.shape} and {rgb.shape}")
    header = FIELD_MAGIC + struct.pack("<id", r, float(extent))
    return header + sigma.astype("<f4").tobytes() + rgb.astype("<f4").tobytes()


def decode_field(data: bytes) -> Tuple[np.ndarray, np.ndarray, float]:
    """Returns (density, color, extent) as float64 arrays."""
    n_magic = len(FIELD_MAGIC)
    if data[:n_magic] != FIELD_MAGIC:
        raise ShapeError("Not a field snapshot (bad magic)")
    r, extent = struct.unpack("<id", data[n_magic : n_magic + 12])
    body = np.frombuffer(data[n_magic + 12 :], dtype="<f4").astype(np.float64)
    n = r ** 3
    if body.size != 4 * n:
        raise ShapeError(f"Field snapshot holds {body.size} values, expected {4 * n}")
    return body[:n].reshape(r, r, r), body[n:].reshape(r, r, r, 3), float(extent)


# -------------------------------------------------------------------
# CSV
# -------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def encode_csv(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    """Comma-separated table with a header row; floats use repr for exact round-trip."""
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue().encode("utf-8")


def read_csv(path: Path):
    """Header and rows (as strings) of a CSV written by encode_csv."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:] if line]
