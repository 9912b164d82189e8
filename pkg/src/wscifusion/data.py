"""Footprint gridding, chip sampling, coordinate channels and spatial splits.

Geometry is a flat latitude/longitude grid: pixel (row, col) covers
``[origin_x + col·px, origin_x + (col+1)·px)`` in longitude and
``(origin_y - (row+1)·px, origin_y - row·px]`` in latitude, i.e. indices are
``floor`` of the offset in pixel units (half-open cells).
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .formats import CHIP_DTYPE, chip_dtype, read_chip_records, write_chip_records

log = logging.getLogger(__name__)

LAYERS = ("HH", "HV", "VV", "VH", "inc_palsar", "inc_sentinel", "dem",
          "sin_lon", "cos_lon", "lat_scaled")
SAR_LAYERS = LAYERS[:7]
CHIP_SIZE = 40
MIN_VALID = 16
METERS_PER_DEGREE = 111_320.0
PIXEL_METERS = 25.0
BLOCK_METERS = 80_000.0
MAX_PER_BLOCK = 300

FOOTPRINT_DTYPE = np.dtype([
    ("lon", "<f8"), ("lat", "<f8"), ("quarter", "<i4"), ("wsci", "<f4"), ("valid", "?"),
])


@dataclass(frozen=True)
class FootprintRecord:
    lon: float
    lat: float
    quarter: int
    wsci: float
    valid: bool = True

    def __post_init__(self):
        if not -180 <= self.lon < 180:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")
        if not -90 <= self.lat <= 90:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


def footprint_table(records) -> np.ndarray:
    """Coerce FootprintRecords (or an existing table) into ``FOOTPRINT_DTYPE``."""
    if isinstance(records, np.ndarray) and records.dtype == FOOTPRINT_DTYPE:
        return records
    rows = [(r.lon, r.lat, r.quarter, r.wsci, r.valid) for r in records]
    return np.array(rows, dtype=FOOTPRINT_DTYPE)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    origin_x: float  # west edge, degrees
    origin_y: float  # north edge, degrees
    pixel_size: float = PIXEL_METERS / METERS_PER_DEGREE

    def pixel_index(self, lon, lat):
        col = np.floor((np.asarray(lon, np.float64) - self.origin_x) / self.pixel_size)
        row = np.floor((self.origin_y - np.asarray(lat, np.float64)) / self.pixel_size)
        return row.astype(np.int64), col.astype(np.int64)

    def pixel_center(self, row, col):
        lon = self.origin_x + (np.asarray(col, np.float64) + 0.5) * self.pixel_size
        lat = self.origin_y - (np.asarray(row, np.float64) + 0.5) * self.pixel_size
        return lon, lat

    def corner(self, row, col):
        """Lon/lat of the north-west corner of pixel (row, col)."""
        return self.origin_x + col * self.pixel_size, self.origin_y - row * self.pixel_size

    def window(self, row0, col0, height, width) -> "GridSpec":
        lon, lat = self.corner(row0, col0)
        return GridSpec(width, height, lon, lat, self.pixel_size)

    @classmethod
    def from_meta(cls, meta) -> "GridSpec":
        return cls(int(meta["width"]), int(meta["height"]), float(meta["origin_x"]),
                   float(meta["origin_y"]), float(meta["pixel_size"]))


def grid_footprints(records, grid: GridSpec, quarter=None) -> np.ndarray:
    """Average valid footprint values per pixel; untouched pixels are NaN.

    ``quarter`` filters the records first (None keeps all).
    """
    tab = footprint_table(records)
    keep = tab["valid"] & np.isfinite(tab["wsci"])
    if quarter is not None:
        keep &= tab["quarter"] == quarter
    tab = tab[keep]
    out = np.full((grid.height, grid.width), np.nan, dtype=np.float32)
    if tab.size == 0:
        return out
    row, col = grid.pixel_index(tab["lon"], tab["lat"])
    inside = (row >= 0) & (row < grid.height) & (col >= 0) & (col < grid.width)
    flat = row[inside] * grid.width + col[inside]
    n = grid.height * grid.width
    sums = np.bincount(flat, weights=tab["wsci"][inside].astype(np.float64), minlength=n)
    counts = np.bincount(flat, minlength=n)
    hit = counts > 0
    out.ravel()[hit] = (sums[hit] / counts[hit]).astype(np.float32)
    return out


def encode_coordinates(lon, lat):
    """``(sin lon, cos lon, lat / 90)``: longitude wraps, latitude does not."""
    rad = np.deg2rad(np.asarray(lon, np.float64))
    return np.sin(rad), np.cos(rad), np.asarray(lat, np.float64) / 90.0


def coordinate_layers(lon, lat, size=CHIP_SIZE):
    vals = encode_coordinates(lon, lat)
    return np.stack([np.full((size, size), v, dtype=np.float32) for v in vals])


def block_id(lon, lat, block_meters=BLOCK_METERS):
    """u64 id of the square block (``block_meters`` on a side) containing a point."""
    bx = np.floor(np.asarray(lon, np.float64) * METERS_PER_DEGREE / block_meters).astype(np.int64)
    by = np.floor(np.asarray(lat, np.float64) * METERS_PER_DEGREE / block_meters).astype(np.int64)
    return (((bx + (1 << 31)) << 32) | (by + (1 << 31))).astype(np.uint64)


def _block_uniform(block, seed):
    h = hashlib.blake2b(f"{int(seed)}:{int(block)}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


def split_blocks(blocks, test_fraction=0.2, seed=0):
    """Label each block id ``"train"`` or ``"test"`` by a seeded hash."""
    cache = {}
    out = []
    for b in np.asarray(blocks, dtype=np.uint64).ravel().tolist():
        if b not in cache:
            cache[b] = "test" if _block_uniform(b, seed) < test_fraction else "train"
        out.append(cache[b])
    return np.array(out, dtype="<U5")


class ChipSet:
    """A batch of chips backed by a ``CHIP_DTYPE`` record array plus split labels."""

    def __init__(self, records, split=None):
        records = np.asarray(records)
        # other chip sizes keep their own structured dtype
        self.records = records if records.dtype.names else records.astype(CHIP_DTYPE)
        n = len(self.records)
        self.split = (np.full(n, "", dtype="<U5") if split is None
                      else np.asarray(split, dtype="<U5"))

    def __len__(self):
        return len(self.records)

    @property
    def inputs(self):
        return self.records["input"]

    @property
    def targets(self):
        return self.records["target"]

    def subset(self, index) -> "ChipSet":
        return ChipSet(self.records[index], self.split[index])

    def with_split(self, test_fraction=0.2, seed=0) -> "ChipSet":
        return ChipSet(self.records, split_blocks(self.records["block"], test_fraction, seed))

    def only(self, split) -> "ChipSet":
        return self.subset(np.flatnonzero(self.split == split))

    def save(self, path):
        write_chip_records(path, self.records)

    @classmethod
    def load(cls, path) -> "ChipSet":
        return cls(read_chip_records(path))

    @classmethod
    def concat(cls, sets) -> "ChipSet":
        sets = list(sets)
        if not sets:
            return cls(np.zeros(0, dtype=CHIP_DTYPE))
        return cls(np.concatenate([s.records for s in sets]),
                   np.concatenate([s.split for s in sets]))


def chip_id(quarter, row, col):
    return np.uint64(((int(quarter) & 0xFFFF) << 48) | ((int(row) & 0xFFFFFF) << 24)
                     | (int(col) & 0xFFFFFF))


def chip_record(stack, target, grid, row, col, quarter, block_meters=BLOCK_METERS,
                size=CHIP_SIZE):
    """Cut one chip at pixel offset (row, col); coordinates are the chip centre."""
    rec = np.zeros((), dtype=CHIP_DTYPE if size == CHIP_SIZE else chip_dtype(10, size))
    lon, lat = grid.corner(row + size / 2, col + size / 2)
    rec["id"] = chip_id(quarter, row, col)
    rec["lon"] = lon
    rec["lat"] = lat
    rec["quarter"] = quarter
    rec["block"] = block_id(lon, lat, block_meters)
    rec["input"][:len(SAR_LAYERS)] = stack[:, row:row + size, col:col + size]
    rec["input"][len(SAR_LAYERS):] = coordinate_layers(lon, lat, size)
    if target is None:
        rec["target"] = np.nan
    else:
        rec["target"] = target[row:row + size, col:col + size]
    return rec


def chip_is_acceptable(stack_window, target_window, min_valid=MIN_VALID):
    """Complete input stack and at least ``min_valid`` valid target pixels."""
    if not np.all(np.isfinite(stack_window)):
        return False
    with np.errstate(invalid="ignore"):
        n = np.count_nonzero(np.isfinite(target_window) & (target_window > 0))
    return n >= min_valid


def candidate_positions(grid, n, rng, size=CHIP_SIZE):
    """``n`` random chip origins inside the raster, drawn from ``rng``."""
    gen = rng.generator(draw=0, slot=7)
    rows = gen.integers(0, grid.height - size + 1, size=n)
    cols = gen.integers(0, grid.width - size + 1, size=n)
    return list(zip(rows.tolist(), cols.tolist()))


def sample_chips(stack, target, grid, quarter, positions, min_valid=MIN_VALID,
                 block_meters=BLOCK_METERS, max_per_block=MAX_PER_BLOCK, rng=None,
                 contained=False, size=CHIP_SIZE) -> ChipSet:
    """Cut chips at ``positions`` and keep the acceptable ones.

    ``contained=True`` additionally rejects chips whose corners fall in
    different blocks, so no target pixel of a chip belongs to a neighbouring
    block. Each block keeps at most ``max_per_block`` chips, chosen by seeded
    reservoir sampling over the position stream.
    """
    reservoirs = {}
    seen = {}
    gen = rng.generator(draw=int(quarter) & 0xFFFFFFFF, slot=8) if rng is not None else None
    for row, col in positions:
        if row < 0 or col < 0 or row + size > grid.height or col + size > grid.width:
            continue
        if not chip_is_acceptable(stack[:, row:row + size, col:col + size],
                                  target[row:row + size, col:col + size], min_valid):
            continue
        if contained:
            lon0, lat0 = grid.corner(row, col)
            lon1, lat1 = grid.corner(row + size, col + size)
            # the far corner is exclusive; nudge half a pixel inside
            half = grid.pixel_size / 2
            if block_id(lon0, lat0 - half, block_meters) != block_id(lon1 - half, lat1 + half, block_meters):
                continue
        rec = chip_record(stack, target, grid, row, col, quarter, block_meters, size)
        b = int(rec["block"])
        k = seen.get(b, 0)
        seen[b] = k + 1
        res = reservoirs.setdefault(b, [])
        if k < max_per_block:
            res.append(rec)
        else:
            if gen is None:
                raise ValueError("sample_chips: an RngStream is needed to cap blocks")
            j = int(gen.integers(0, k + 1))
            if j < max_per_block:
                res[j] = rec
    recs = [r for b in sorted(reservoirs) for r in reservoirs[b]]
    if not recs:
        return ChipSet(np.zeros(0, dtype=CHIP_DTYPE if size == CHIP_SIZE else chip_dtype(10, size)))
    return ChipSet(np.stack(recs))


def compute_norm_constants(chips: ChipSet, split="train"):
    """Per-channel mean and std over the chips of one split (streamed)."""
    if split is not None:
        chips = chips.only(split) if np.any(chips.split != "") else chips
    inputs = chips.inputs
    C = inputs.shape[1]
    count = 0
    mean = np.zeros(C)
    m2 = np.zeros(C)
    for x in inputs:
        x = x.reshape(C, -1).astype(np.float64)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = np.sum(np.square(x - mean_b[:, None]), axis=1)
        delta = mean_b - mean
        total = count + n_b
        mean = mean + delta * n_b / total
        m2 = m2 + m2_b + delta * delta * count * n_b / total
        count = total
    if count == 0:
        raise ValueError("compute_norm_constants: no chips in the requested split")
    std = np.sqrt(m2 / count)
    flat = std < 1e-12
    if np.any(flat):
        log.warning("channels %s are constant; std clamped to 1", np.flatnonzero(flat).tolist())
        std[flat] = 1.0
    return mean, std
