"""Deterministic procedural world: a dense complexity field plus pseudo-SAR
layers that respond to it, and sparse footprint sampling of the truth.

The truth is a three-octave value-noise field, coupled to an independent
terrain field, rescaled to the 6–12 range typical of the target index. The
backscatter layers are saturating responses of the truth with additive
noise; L-band-like layers (and their incidence angle) change once per year,
C-band-like layers every quarter. Sparse targets mask the truth without
adding noise, so a model error is never confounded with label noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RngStream
from .data import (FOOTPRINT_DTYPE, METERS_PER_DEGREE, PIXEL_METERS, SAR_LAYERS, GridSpec)

TRUTH_RANGE = (6.0, 12.0)
_BACKSCATTER = ("HH", "HV", "VV", "VH")


def value_noise(gen, height, width, spacing):
    """Smoothstep-interpolated lattice noise with a random phase, roughly unit variance."""
    gh = height // spacing + 3
    gw = width // spacing + 3
    lattice = gen.standard_normal((gh, gw))
    oy, ox = gen.uniform(0, spacing, size=2)
    y = (np.arange(height) + oy) / spacing
    x = (np.arange(width) + ox) / spacing
    iy = np.floor(y).astype(int)
    ix = np.floor(x).astype(int)
    fy = y - iy
    fx = x - ix
    fy = (fy * fy * (3 - 2 * fy))[:, None]
    fx = (fx * fx * (3 - 2 * fx))[None, :]
    v00 = lattice[np.ix_(iy, ix)]
    v01 = lattice[np.ix_(iy, ix + 1)]
    v10 = lattice[np.ix_(iy + 1, ix)]
    v11 = lattice[np.ix_(iy + 1, ix + 1)]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def _rescale(a, lo, hi):
    a = a - a.min()
    span = a.max()
    return lo + (hi - lo) * (a / span if span > 0 else a)


@dataclass(frozen=True)
class SyntheticWorld:
    seed: int = 0
    size: int = 512
    density: float = 0.05
    origin_lon: float = -60.0
    origin_lat: float = -3.0
    spacings: tuple = (64, 32, 16)
    amplitudes: tuple = (1.0, 0.5, 0.25)
    contrast: float = 1.0
    dem_coupling: float = 0.3
    noise: float = 1.0
    informative: tuple = _BACKSCATTER
    kind: str = "smooth"  # "smooth" | "white" | "constant"
    pixel_meters: float = PIXEL_METERS
    noise_levels: dict = field(default_factory=lambda: {
        "HH": 0.10, "HV": 0.10, "VV": 0.16, "VH": 0.22})

    @property
    def grid(self) -> GridSpec:
        px = self.pixel_meters / METERS_PER_DEGREE
        # snap the origin to a whole number of 64-pixel blocks
        snap = 64 * px
        ox = np.floor(self.origin_lon / snap) * snap
        oy = np.floor(self.origin_lat / snap) * snap
        return GridSpec(self.size, self.size, float(ox), float(oy), px)

    def _rng(self, stream) -> RngStream:
        return RngStream(self.seed).child(stream)

    def _smooth(self, stream, spacings=None, amplitudes=None):
        spacings = self.spacings if spacings is None else spacings
        amplitudes = self.amplitudes if amplitudes is None else amplitudes
        out = np.zeros((self.size, self.size))
        for k, (s, a) in enumerate(zip(spacings, amplitudes)):
            out += a * value_noise(self._rng(stream).generator(slot=k), self.size, self.size, s)
        return out

    def dem(self):
        """Terrain in metres, independent of the complexity base field."""
        return _rescale(self._smooth(2, (128, 64), (1.0, 0.4)), 50.0, 1200.0)

    def truth(self) -> np.ndarray:
        lo, hi = TRUTH_RANGE
        mid = 0.5 * (lo + hi)
        if self.kind == "white":
            base = self._rng(1).generator().standard_normal((self.size, self.size))
        elif self.kind == "constant":
            base = np.zeros((self.size, self.size))
        else:
            base = self._smooth(1)
        dem = self.dem()
        z = (dem - dem.mean()) / dem.std()
        if base.std() > 0:
            base = (base - base.mean()) / base.std()
        field_ = base + self.dem_coupling * z
        if field_.max() > field_.min():
            field_ = _rescale(field_, lo, hi)
        else:
            field_ = np.full_like(field_, mid)
        return (mid + self.contrast * (field_ - mid)).astype(np.float32)

    def layers(self, quarter: int) -> np.ndarray:
        """The 7 SAR-like layers (order ``SAR_LAYERS``) for one quarter."""
        L = self.truth().astype(np.float64)
        t = L - TRUTH_RANGE[0]
        year = quarter // 4
        shape = (self.size, self.size)

        def noise(name, sd):
            idx = SAR_LAYERS.index(name)
            draw = year if name in ("HH", "HV", "inc_palsar") else quarter
            gen = self._rng(10 + idx).generator(draw=draw & 0xFFFFFFFF)
            return sd * self.noise * gen.standard_normal(shape)

        decoy = self._smooth(5)  # signal for layers marked uninformative
        decoy_t = _rescale(decoy, 0.0, 6.0)

        def resp(name):
            return t if name in self.informative else decoy_t

        lv = self.noise_levels
        hh = np.tanh(resp("HH") / 4.0) + noise("HH", lv["HH"])
        hv = 0.9 * np.tanh(resp("HV") / 5.0) + noise("HV", lv["HV"])
        vv = 1.0 - np.exp(-resp("VV") / 2.5) + noise("VV", lv["VV"])
        vh = 0.8 * (1.0 - np.exp(-resp("VH") / 3.0)) + noise("VH", lv["VH"])
        inc_p = 36.0 + 3.0 * self._smooth(6, (256,), (1.0,)) + noise("inc_palsar", 0.2)
        ramp = np.linspace(0.0, 4.0, self.size)[None, :]
        inc_s = 38.0 + ramp + 2.0 * self._smooth(7, (256,), (1.0,)) + noise("inc_sentinel", 0.2)
        stack = np.stack([hh, hv, vv, vh, inc_p, inc_s, self.dem()])
        return stack.astype(np.float32)

    def sample_mask(self, quarter: int) -> np.ndarray:
        gen = self._rng(20).generator(draw=quarter & 0xFFFFFFFF)
        return gen.random((self.size, self.size)) < self.density

    def sparse_target(self, quarter: int) -> np.ndarray:
        return np.where(self.sample_mask(quarter), self.truth(), np.float32(np.nan)).astype(np.float32)

    def footprints(self, quarter: int) -> np.ndarray:
        """One footprint per sampled cell, placed uniformly inside the cell."""
        mask = self.sample_mask(quarter)
        rows, cols = np.nonzero(mask)
        gen = self._rng(21).generator(draw=quarter & 0xFFFFFFFF)
        du = gen.random(rows.size)
        dv = gen.random(rows.size)
        g = self.grid
        tab = np.zeros(rows.size, dtype=FOOTPRINT_DTYPE)
        # keep the footprint strictly inside the half-open cell
        du = np.clip(du, 1e-6, 1 - 1e-6)
        dv = np.clip(dv, 1e-6, 1 - 1e-6)
        tab["lon"] = g.origin_x + (cols + du) * g.pixel_size
        tab["lat"] = g.origin_y - (rows + dv) * g.pixel_size
        tab["quarter"] = quarter
        tab["wsci"] = self.truth()[rows, cols]
        tab["valid"] = True
        return tab


def synth_generate(world: SyntheticWorld, quarter: int):
    """Return ``(input_stack (7, H, W), dense_truth (H, W), sparse_target (H, W))``."""
    return world.layers(quarter), world.truth(), world.sparse_target(quarter)
