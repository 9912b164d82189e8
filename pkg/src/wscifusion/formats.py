"""Binary chip sets, band-sequential rasters with JSON sidecars, atomic writes.

Chip set layout (little-endian throughout)::

    b"WSCF"  u32 version  u64 count
    count × { u64 id, f64 lon, f64 lat, i32 quarter, u64 block,
              f32[10, 40, 40] input, f32[40, 40] target (NaN = no data) }
"""
from __future__ import annotations

import fcntl
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

CHIP_MAGIC = b"WSCF"
CHIP_VERSION = 1
_CHIP_HEADER = struct.Struct("<4sIQ")


class CorruptFileError(ValueError):
    """A file failed structural validation (bad magic, truncation, ...)."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"corrupt file {self.path}: {reason}")


def chip_dtype(channels=10, size=40):
    return np.dtype([
        ("id", "<u8"), ("lon", "<f8"), ("lat", "<f8"), ("quarter", "<i4"), ("block", "<u8"),
        ("input", "<f4", (channels, size, size)), ("target", "<f4", (size, size)),
    ])


CHIP_DTYPE = chip_dtype()


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_chip_records(path, records):
    records = np.asarray(records, dtype=CHIP_DTYPE)
    with atomic_write(path) as fh:
        fh.write(_CHIP_HEADER.pack(CHIP_MAGIC, CHIP_VERSION, len(records)))
        fh.write(records.tobytes())


def append_chip_records(path, records):
    """Append under an exclusive lock, creating the file if needed."""
    records = np.asarray(records, dtype=CHIP_DTYPE)
    path = Path(path)
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    with os.fdopen(fd, "r+b") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            head = fh.read(_CHIP_HEADER.size)
            if not head:
                count = 0
            elif len(head) < _CHIP_HEADER.size:
                raise CorruptFileError(path, "truncated header")
            else:
                magic, _, count = _CHIP_HEADER.unpack(head)
                if magic != CHIP_MAGIC:
                    raise CorruptFileError(path, f"bad magic {magic!r}")
            fh.seek(_CHIP_HEADER.size + count * CHIP_DTYPE.itemsize)
            fh.write(records.tobytes())
            fh.truncate()
            fh.seek(0)
            fh.write(_CHIP_HEADER.pack(CHIP_MAGIC, CHIP_VERSION, count + len(records)))
            fh.flush()
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def read_chip_records(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _CHIP_HEADER.size:
        raise CorruptFileError(path, "truncated header")
    magic, version, count = _CHIP_HEADER.unpack_from(raw)
    if magic != CHIP_MAGIC:
        raise CorruptFileError(path, f"bad magic {magic!r}")
    if version != CHIP_VERSION:
        raise CorruptFileError(path, f"unsupported version {version}")
    body = len(raw) - _CHIP_HEADER.size
    if body != count * CHIP_DTYPE.itemsize:
        raise CorruptFileError(
            path, f"expected {count} chips ({count * CHIP_DTYPE.itemsize} bytes), "
                  f"found {body} bytes")
    return np.frombuffer(raw, dtype=CHIP_DTYPE, offset=_CHIP_HEADER.size, count=count).copy()


# --------------------------------------------------------------------------
# rasters
# --------------------------------------------------------------------------

def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raster(path, bands, grid, band_names, **extra):
    """Write ``bands`` (nb, H, W) as raw little-endian f32 plus ``<path>.json``."""
    bands = np.asarray(bands, dtype="<f4")
    if bands.ndim == 2:
        bands = bands[None]
    nb, H, W = bands.shape
    if len(band_names) != nb:
        raise ValueError("one band name per band required")
    if (H, W) != (grid.height, grid.width):
        raise ValueError(f"raster {H}x{W} does not match grid {grid.height}x{grid.width}")
    meta = {
        "width": grid.width, "height": grid.height,
        "origin_x": grid.origin_x, "origin_y": grid.origin_y,
        "pixel_size": grid.pixel_size, "nodata": "nan", "bands": list(band_names),
    }
    meta.update(extra)
    with atomic_write(path) as fh:
        fh.write(bands.tobytes())
    with atomic_write(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def read_raster(path):
    """Return ``(bands, meta)``; ``bands`` is float32 (nb, H, W)."""
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(side)
    try:
        meta = json.loads(side.read_text())
        nb, H, W = len(meta["bands"]), int(meta["height"]), int(meta["width"])
    except (ValueError, KeyError) as exc:
        raise CorruptFileError(side, f"bad sidecar ({exc})") from exc
    raw = path.read_bytes()
    if len(raw) != nb * H * W * 4:
        raise CorruptFileError(path, f"expected {nb * H * W * 4} bytes, found {len(raw)}")
    bands = np.frombuffer(raw, dtype="<f4").reshape(nb, H, W).astype(np.float32)
    return bands, meta
