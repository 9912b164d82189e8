"""Occlusion importance: per-channel and per-location sensitivity of one
predicted pixel.

An input is "occluded" by replacing it with a per-channel background value
(the mean over a reference chip sample); importance is the absolute change
of the predicted mean at the target pixel. All forwards run in eval mode,
so reports are deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import network
from .core import RngStream
from .data import LAYERS, METERS_PER_DEGREE, PIXEL_METERS, GridSpec
from .formats import atomic_write, write_raster
from .network import ModelState

METHOD = "occlusion importance"
DECAY_DISTANCES = 28  # rings 0..27
BACKGROUND_CHIPS = 100
_BATCH = 64


def background(chips, n=BACKGROUND_CHIPS, rng: RngStream | None = None):
    """Per-channel mean over a seeded sample of ``n`` chips (all if fewer)."""
    inputs = chips.inputs if hasattr(chips, "inputs") else np.asarray(chips)
    if len(inputs) == 0:
        raise ValueError("background: empty reference set")
    if len(inputs) > n:
        rng = rng or RngStream(0)
        idx = np.sort(rng.generator(slot=9).choice(len(inputs), n, replace=False))
        inputs = inputs[idx]
    return inputs.astype(np.float64).mean(axis=(0, 2, 3))


def _predict_mean(model, batch, pixel):
    r, c = pixel
    outs = [network.forward(model, batch[i:i + _BATCH], "eval")[:, 0, r, c]
            for i in range(0, len(batch), _BATCH)]
    return np.concatenate(outs).astype(np.float64)


def _check_pixel(model, pixel):
    n = model.spec.output_size
    r, c = pixel
    if not (0 <= r < n and 0 <= c < n):
        raise ValueError(f"pixel {pixel} outside the {n}x{n} prediction")
    return int(r), int(c)


def channel_importance(model: ModelState, chip, bg, pixel):
    """|Δ predicted mean| at ``pixel`` (output grid) when each channel in turn
    is replaced by its background value."""
    pixel = _check_pixel(model, pixel)
    chip = np.asarray(chip, np.float32)
    C = chip.shape[0]
    batch = np.repeat(chip[None], C + 1, axis=0)
    for ch in range(C):
        batch[ch + 1, ch] = np.float32(bg[ch])
    pred = _predict_mean(model, batch, pixel)
    return np.abs(pred[1:] - pred[0])


def chebyshev_distance(size, center):
    r = np.abs(np.arange(size)[:, None] - center[0])
    c = np.abs(np.arange(size)[None, :] - center[1])
    return np.maximum(r, c)


def decay_curve(grid, center, n=DECAY_DISTANCES):
    """Mean influence on each Chebyshev ring around ``center``; NaN for a ring
    that does not intersect the grid."""
    dist = chebyshev_distance(grid.shape[0], center)
    out = np.full(n, np.nan)
    for d in range(n):
        ring = dist == d
        if ring.any():
            out[d] = grid[ring].mean()
    return out


def spatial_influence(model: ModelState, chip, pixel, bg, radius=1):
    """Occlude a (2r+1)² patch around every input pixel (all channels set to
    background) and record |Δ predicted mean| at ``pixel``.

    Returns ``(grid (S, S), decay)``; ``decay[d]`` is the mean of ``grid`` on
    the Chebyshev ring at distance ``d`` from the target's input location.
    """
    pixel = _check_pixel(model, pixel)
    chip = np.asarray(chip, np.float32)
    C, S, _ = chip.shape
    fill = np.asarray(bg, np.float32).reshape(C, 1, 1)
    base = _predict_mean(model, chip[None], pixel)[0]
    grid = np.zeros((S, S))
    coords = [(i, j) for i in range(S) for j in range(S)]
    for k in range(0, len(coords), _BATCH):
        part = coords[k:k + _BATCH]
        batch = np.repeat(chip[None], len(part), axis=0)
        for b, (i, j) in enumerate(part):
            batch[b, :, max(0, i - radius):i + radius + 1, max(0, j - radius):j + radius + 1] = fill
        pred = network.forward(model, batch, "eval")[:, 0, pixel[0], pixel[1]].astype(np.float64)
        for (i, j), v in zip(part, pred):
            grid[i, j] = abs(v - base)
    center = (pixel[0] + model.spec.border, pixel[1] + model.spec.border)
    return grid, decay_curve(grid, center)


@dataclass
class AttributionReport:
    pixel: tuple
    channel_importance: np.ndarray
    influence: np.ndarray
    decay: np.ndarray
    radius: int = 1
    channels: tuple = LAYERS
    chip_id: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(a):
            return [None if not math.isfinite(v) else float(v) for v in np.asarray(a).ravel()]
        return {
            "method": METHOD,
            "chip_id": self.chip_id,
            "pixel": list(self.pixel),
            "patch_radius": self.radius,
            "channels": list(self.channels),
            "channel_importance": clean(self.channel_importance),
            "decay_distance": list(range(len(self.decay))),
            "decay_mean_influence": clean(self.decay),
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, json_path, raster_path, lon=0.0, lat=0.0):
        """JSON summary plus the influence grid as a one-band raster centred on
        (lon, lat)."""
        S = self.influence.shape[0]
        px = PIXEL_METERS / METERS_PER_DEGREE
        grid = GridSpec(S, S, lon - S / 2 * px, lat + S / 2 * px, px)
        write_raster(raster_path, self.influence[None], grid, ["occlusion_influence"],
                     method=METHOD, pixel=list(self.pixel))
        with atomic_write(json_path, "w") as fh:
            fh.write(self.to_json())


def attribute(model: ModelState, chip, pixel, bg, radius=1, chip_id=None):
    imp = channel_importance(model, chip, bg, pixel)
    grid, decay = spatial_influence(model, chip, pixel, bg, radius)
    return AttributionReport(tuple(int(v) for v in pixel), imp, grid, decay, radius,
                             chip_id=chip_id)
