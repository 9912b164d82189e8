"""Wall-to-wall prediction with a shifted-window MC-dropout ensemble.

Each pass covers a tile with windows on a core-size stride; passes differ in
a diagonal pixel offset (and, optionally, in the dropout draw). Per pixel the
ensemble mean averages the pass means, ``sigma_model`` is the sample standard
deviation of the pass means, ``sigma_data`` the root of the averaged variance
channel, and ``sigma_total = hypot(sigma_data, sigma_model)``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network
from .core import RngStream
from .data import GridSpec, coordinate_layers
from .formats import write_raster
from .network import ModelState

log = logging.getLogger(__name__)

DEFAULT_OFFSETS = (0, 6, 13, 19, 26)
BANDS = ("mean", "sigma_total", "sigma_data", "sigma_model")
CHUNK = 64


@dataclass(frozen=True)
class TileJob:
    """Output window ``[row0, row0 + height) × [col0, col0 + width)`` of the raster."""

    tile_id: int
    row0: int
    col0: int
    height: int
    width: int
    quarter: int = 0
    rasters: tuple = ()

    def halo(self, spec, offsets=DEFAULT_OFFSETS):
        return spec.border + max(offsets)


def plan_tiles(height, width, tile_size=1600, quarter=0, rasters=()):
    """Non-overlapping tiles covering a ``height × width`` raster, row-major ids."""
    jobs = []
    tid = 0
    for r in range(0, height, tile_size):
        for c in range(0, width, tile_size):
            jobs.append(TileJob(tid, r, c, min(tile_size, height - r), min(tile_size, width - c),
                                quarter, tuple(rasters)))
            tid += 1
    return jobs


@dataclass
class PredictionTile:
    tile_id: int
    row0: int
    col0: int
    mean: np.ndarray
    sigma_data: np.ndarray
    sigma_model: np.ndarray
    sigma_total: np.ndarray
    passes: int
    count: np.ndarray  # contributing windows per pixel


@dataclass
class Mosaic:
    bands: np.ndarray  # (4, H, W) in ``BANDS`` order
    count: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.bands[0]

    @property
    def sigma_total(self):
        return self.bands[1]

    @property
    def sigma_data(self):
        return self.bands[2]

    @property
    def sigma_model(self):
        return self.bands[3]

    def save(self, path, grid: GridSpec):
        write_raster(path, self.bands, grid, list(BANDS), **self.meta)


def model_digest(model: ModelState) -> str:
    from .training import Checkpoint, checkpoint_bytes
    return hashlib.sha256(checkpoint_bytes(Checkpoint(model))).hexdigest()


def compose_sigma(sigma_data, sigma_model):
    """Total standard deviation, computed in float64 and rounded once."""
    return np.hypot(np.asarray(sigma_data, np.float64),
                    np.asarray(sigma_model, np.float64)).astype(np.float32)


def window_input(stack, grid: GridSpec, row, col, size):
    """(C, size, size) model input: the SAR layers plus constant coordinate
    layers for the window centre (same convention as training chips)."""
    lon, lat = grid.corner(row + size / 2, col + size / 2)
    sar = stack[:, row:row + size, col:col + size]
    return np.concatenate([sar, coordinate_layers(lon, lat, size)]).astype(np.float32)


def predict_window(model: ModelState, window, mode="mc", rng: RngStream | None = None,
                   draw: int = 0):
    """Single forward of one (C, S, S) window; returns (2, S-2b, S-2b)."""
    return network.forward(model, np.asarray(window)[None], mode, rng, draw)[0]


def _pass_windows(job: TileJob, spec, offset, height, width):
    """Window origins for one offset: cores on a core-size stride starting
    ``offset`` pixels before the tile origin, kept when the whole input
    window lies inside the raster."""
    core = spec.output_size
    b = spec.border
    rows = range(job.row0 - offset, job.row0 + job.height, core)
    cols = range(job.col0 - offset, job.col0 + job.width, core)
    out = []
    for r in rows:
        for c in cols:
            ir, ic = r - b, c - b
            if ir < 0 or ic < 0 or ir + spec.input_size > height or ic + spec.input_size > width:
                continue
            out.append((ir, ic))
    return out


def ensemble_predict(model: ModelState, job: TileJob, stack, grid: GridSpec,
                     offsets=DEFAULT_OFFSETS, mc_passes=1, rng: RngStream | None = None,
                     mc=True) -> PredictionTile:
    """Predict one tile from ``stack`` (the 7 SAR-like layers of the whole raster).

    With ``mc`` true (and a positive dropout rate) each pass draws its own
    dropout masks from ``rng``; otherwise passes run in eval mode. Windows
    whose input contains NaN are skipped; pixels where the input stack is
    incomplete are NaN in every band.
    """
    spec = model.spec
    stack = np.asarray(stack, dtype=np.float32)
    _, H, W = stack.shape
    mode = "mc" if (mc and spec.dropout > 0) else "eval"
    if mode == "mc" and rng is None:
        raise ValueError("ensemble_predict: mc passes need an RngStream")
    S, b, core = spec.input_size, spec.border, spec.output_size
    h, w = job.height, job.width
    n_pass = len(offsets) * mc_passes
    means = np.full((n_pass, h, w), np.nan, np.float32)
    varis = np.full((n_pass, h, w), np.nan, np.float32)
    p = 0
    for off in offsets:
        origins = _pass_windows(job, spec, off, H, W)
        origins = [(r, c) for r, c in origins if np.all(np.isfinite(stack[:, r:r + S, c:c + S]))]
        for k in range(mc_passes):
            for ci in range(0, len(origins), CHUNK):
                chunk = origins[ci:ci + CHUNK]
                batch = np.stack([window_input(stack, grid, r, c, S) for r, c in chunk])
                out = network.forward(model, batch, mode, rng, draw=p * 1_000_000 + ci // CHUNK)
                for (r, c), o in zip(chunk, out):
                    # core rows r+b .. r+b+core, clipped to the tile
                    tr0, tc0 = r + b - job.row0, c + b - job.col0
                    r0, c0 = max(tr0, 0), max(tc0, 0)
                    r1, c1 = min(tr0 + core, h), min(tc0 + core, w)
                    if r0 >= r1 or c0 >= c1:
                        continue
                    means[p, r0:r1, c0:c1] = o[0, r0 - tr0:r1 - tr0, c0 - tc0:c1 - tc0]
                    varis[p, r0:r1, c0:c1] = o[1, r0 - tr0:r1 - tr0, c0 - tc0:c1 - tc0]
            p += 1
    mean, sd, sm, count = _aggregate(means, varis)
    hole = ~np.all(np.isfinite(stack[:, job.row0:job.row0 + h, job.col0:job.col0 + w]), axis=0)
    for a in (mean, sd, sm):
        a[hole] = np.nan
    count[hole] = 0
    return PredictionTile(job.tile_id, job.row0, job.col0, mean, sd, sm, compose_sigma(sd, sm),
                          n_pass, count)


def _aggregate(means, varis):
    have = np.isfinite(means)
    count = have.sum(axis=0).astype(np.uint16)
    n = count.astype(np.float64)
    m64 = np.where(have, means, 0.0).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = m64.sum(axis=0) / n
        dev = np.where(have, m64 - mean, 0.0)
        sm = np.sqrt(np.sum(dev * dev, axis=0) / (n - 1))
        sd = np.sqrt(np.where(have, varis, 0.0).astype(np.float64).sum(axis=0) / n)
    mean[count == 0] = np.nan
    sd[count == 0] = np.nan
    sm[count < 2] = np.nan
    return mean.astype(np.float32), sd.astype(np.float32), sm.astype(np.float32), count


def stitch_mosaic(tiles, height, width) -> Mosaic:
    """Merge tiles into a 4-band raster, averaging overlaps weighted by
    contributing-window count. Means and variances are averaged; the stds
    are the roots of the averaged variances. Tiles are accumulated in
    tile-id order so the result does not depend on arrival order."""
    acc_m = np.zeros((height, width))
    acc_d = np.zeros((height, width))
    acc_s = np.zeros((height, width))
    w_m = np.zeros((height, width))
    w_s = np.zeros((height, width))
    count = np.zeros((height, width), np.uint16)
    for t in sorted(tiles, key=lambda t: t.tile_id):
        h, w = t.mean.shape
        sl = (slice(t.row0, t.row0 + h), slice(t.col0, t.col0 + w))
        c = t.count.astype(np.float64)
        ok = (t.count > 0) & np.isfinite(t.mean)
        acc_m[sl] += np.where(ok, t.mean.astype(np.float64) * c, 0.0)
        acc_d[sl] += np.where(ok, np.square(t.sigma_data.astype(np.float64)) * c, 0.0)
        w_m[sl] += np.where(ok, c, 0.0)
        okm = ok & np.isfinite(t.sigma_model)
        acc_s[sl] += np.where(okm, np.square(t.sigma_model.astype(np.float64)) * c, 0.0)
        w_s[sl] += np.where(okm, c, 0.0)
        count[sl] += np.where(ok, t.count, 0).astype(np.uint16)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(w_m > 0, acc_m / w_m, np.nan).astype(np.float32)
        sd = np.where(w_m > 0, np.sqrt(acc_d / w_m), np.nan).astype(np.float32)
        sm = np.where(w_s > 0, np.sqrt(acc_s / w_s), np.nan).astype(np.float32)
    bands = np.stack([mean, compose_sigma(sd, sm), sd, sm])
    return Mosaic(bands, count)


@dataclass
class RunReport:
    tiles: int
    failed: list
    pixels: int
    seconds: float
    workers: int

    @property
    def pixels_per_second(self):
        return self.pixels / self.seconds if self.seconds > 0 else 0.0

    def to_dict(self):
        return {"tiles": self.tiles, "failed": list(self.failed), "pixels": self.pixels,
                "seconds": self.seconds, "workers": self.workers,
                "pixels_per_second": self.pixels_per_second}


def run_tiles(model: ModelState, jobs, stack, grid: GridSpec, workers=1, seed=0,
              offsets=DEFAULT_OFFSETS, mc_passes=1, mc=True):
    """Predict every job on a thread pool and stitch the results.

    Each tile draws dropout masks from ``RngStream(seed, tile_id)`` so the
    mosaic is identical for any worker count or job order. A tile that
    raises is retried once, then left as a NaN hole and listed in the report.
    """
    jobs = sorted(jobs, key=lambda j: j.tile_id)
    t0 = time.perf_counter()

    def one(job):
        for attempt in (0, 1):
            try:
                return ensemble_predict(model, job, stack, grid, offsets, mc_passes,
                                        RngStream(seed, job.tile_id), mc)
            except Exception as exc:  # noqa: BLE001 - recorded, never fatal
                log.warning("tile %d attempt %d failed: %s", job.tile_id, attempt + 1, exc)
        return None

    if workers <= 1 or len(jobs) <= 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    tiles = [t for t in results if t is not None]
    failed = [j.tile_id for j, t in zip(jobs, results) if t is None]
    mosaic = stitch_mosaic(tiles, grid.height, grid.width)
    quarter = jobs[0].quarter if jobs else None
    mosaic.meta = {"offsets": list(offsets), "mc_passes": int(mc_passes),
                   "checkpoint_hash": model_digest(model), "quarter": quarter}
    pixels = int(sum(j.height * j.width for j, t in zip(jobs, results) if t is not None))
    report = RunReport(len(jobs), failed, pixels, time.perf_counter() - t0, int(workers))
    return mosaic, report


def seam_positions(start, stop, core, offsets):
    """Core boundaries (first row of a new core) inside ``(start, stop)``."""
    out = set()
    for off in offsets:
        s = start - off
        while s < stop:
            if s > start:
                out.add(s)
            s += core
    return sorted(out)


def max_seam_jump(mean, positions_rows, positions_cols):
    """Largest |difference| between neighbouring pixels across any seam line."""
    mean = np.asarray(mean, np.float64)
    best = 0.0
    for r in positions_rows:
        d = np.abs(mean[r] - mean[r - 1])
        if np.any(np.isfinite(d)):
            best = max(best, float(np.nanmax(d)))
    for c in positions_cols:
        d = np.abs(mean[:, c] - mean[:, c - 1])
        if np.any(np.isfinite(d)):
            best = max(best, float(np.nanmax(d)))
    return best if math.isfinite(best) else float("nan")
