"""Validation protocols on synthetic data: sparse held-out accuracy, dense
wall-to-wall comparison per site, calibration tables and spatial
correlation.

Site-level Moran's I uses queen contiguity on the native 25 m grid with
row-standardized weights; reports say so in their ``weights`` field.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .core import RngStream
from .data import ChipSet
from .formats import atomic_write
from .inference import DEFAULT_OFFSETS, TileJob, compose_sigma, plan_tiles, run_tiles
from .network import ModelState
from . import network

MORAN_WEIGHTS = "queen"
COVERAGE_BINS = (6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0)


def _nan_to_none(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            v = None
        out[k] = v
    return out


@dataclass
class ValidationRun:
    """Per-pixel table of a validation pass; rows are finite by construction."""

    checkpoint_hash: str
    pred: np.ndarray
    obs: np.ndarray
    sigma_total: np.ndarray
    category: np.ndarray | None = None
    split: str = "test"

    def __post_init__(self):
        ok = np.isfinite(self.pred) & np.isfinite(self.sigma_total) & metrics.valid_mask(self.obs)
        self.pred = np.asarray(self.pred, np.float64)[ok]
        self.obs = np.asarray(self.obs, np.float64)[ok]
        self.sigma_total = np.asarray(self.sigma_total, np.float64)[ok]
        if self.category is not None:
            self.category = np.asarray(self.category)[ok]

    def __len__(self):
        return len(self.pred)

    @property
    def z(self):
        return metrics.z_scores(self.pred, self.obs, self.sigma_total)

    def report(self) -> metrics.EvalReport:
        rep = metrics.accuracy(self.pred, self.obs)
        rep.coverage_1sd, rep.coverage_2sd = metrics.coverage(self.z, (1.0, 2.0))
        return rep


def chip_ensemble(model: ModelState, inputs, passes=5, seed=0, batch=64):
    """MC-dropout ensemble on stand-alone chips.

    A chip carries no context beyond its own window, so the shifted-window
    offsets of mosaic inference are unavailable; the ensemble is ``passes``
    dropout draws on the unshifted window. Returns (mean, sigma_data,
    sigma_model, sigma_total), each (N, S', S').
    """
    rng = RngStream(seed, 0x5EED)
    mode = "mc" if model.spec.dropout > 0 else "eval"
    outs = []
    for p in range(passes):
        chunks = [network.forward(model, inputs[i:i + batch], mode, rng, draw=p * 1_000_000 + i)
                  for i in range(0, len(inputs), batch)]
        outs.append(np.concatenate(chunks))
    outs = np.stack(outs).astype(np.float64)  # (P, N, 2, s, s)
    mean = outs[:, :, 0].mean(axis=0)
    sigma_model = outs[:, :, 0].std(axis=0, ddof=1) if passes > 1 else np.full_like(mean, np.nan)
    sigma_data = np.sqrt(outs[:, :, 1].mean(axis=0))
    mean, sd, sm = (a.astype(np.float32) for a in (mean, sigma_data, sigma_model))
    return mean, sd, sm, compose_sigma(sd, sm)


def validate_sparse(model: ModelState, chips: ChipSet, passes=5, seed=0, categories=None,
                    min_count=100, checkpoint_hash=""):
    """Accuracy and coverage at valid target pixels of test-split chips.

    ``categories`` (one label per chip) adds a stratified breakdown with
    strata under ``min_count`` pixels pooled into "other". Returns
    ``(EvalReport, {category: EvalReport}, ValidationRun)``.
    """
    if len(chips) == 0:
        raise ValueError("validate_sparse: no chips")
    if np.any(chips.split != "test"):
        raise ValueError("validate_sparse: every chip must carry the 'test' split label")
    b = model.spec.border
    mean, _, _, st = chip_ensemble(model, chips.inputs, passes, seed)
    obs = chips.targets[:, b:-b, b:-b]
    cat = None
    if categories is not None:
        cat = np.broadcast_to(np.asarray(categories).reshape(-1, 1, 1), obs.shape)
        cat = cat.ravel()
    run = ValidationRun(checkpoint_hash, mean.ravel(), obs.ravel(), st.ravel(), cat)
    by_cat = {}
    if cat is not None:
        by_cat = metrics.metrics_by_category(run.pred, run.obs, run.category, min_count)
        z = run.z
        labels, counts = np.unique(run.category, return_counts=True)
        small = labels[counts < min_count]
        for key, rep in by_cat.items():
            sel = np.isin(run.category, small) if key == "other" else run.category == key
            rep.coverage_1sd, rep.coverage_2sd = metrics.coverage(z[sel])
    return run.report(), by_cat, run


def calibration_report(run: ValidationRun, edges=COVERAGE_BINS):
    """Global and per-bin |Z| coverage plus Pearson r of |residual| vs sigma."""
    z = run.z
    c1, c2 = metrics.coverage(z, (1.0, 2.0))
    resid = np.abs(run.pred - run.obs)
    return {
        "n": len(run),
        "coverage_1sd": c1,
        "coverage_2sd": c2,
        "residual_sigma_pearson": metrics.pearson(resid, run.sigma_total),
        "bins": metrics.binned_coverage(z, run.obs, list(edges)),
    }


# --------------------------------------------------------------------------
# dense validation
# --------------------------------------------------------------------------

@dataclass
class SiteReport:
    site_id: str
    r2: float
    rmse: float
    bias: float
    n: int
    cross_i: float
    residual_i: float
    truth_std: float
    weights: str = MORAN_WEIGHTS

    def to_dict(self):
        return _nan_to_none(asdict(self))


def _safe_moran(a, b=None):
    try:
        return metrics.morans_i(a, b, weights=MORAN_WEIGHTS)
    except ValueError:
        return float("nan")


def site_report(site_id, pred, truth) -> SiteReport:
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    both = np.isfinite(pred) & np.isfinite(truth)
    p = np.where(both, pred, np.nan)
    t = np.where(both, truth, np.nan)
    acc = metrics.accuracy(p[both], t[both])
    std = float(np.std(t[both])) if both.any() else float("nan")
    return SiteReport(str(site_id), acc.r2, acc.rmse, acc.bias, acc.n,
                      _safe_moran(p, t), _safe_moran(p - t), std)


def site_windows(height, width, size):
    """Non-overlapping ``size``-square sites, row-major ``"r{row}c{col}"`` ids."""
    return [(f"r{r}c{c}", r, c, size, size)
            for r in range(0, height - size + 1, size)
            for c in range(0, width - size + 1, size)]


@dataclass
class DenseReport:
    overall: metrics.EvalReport
    observed: metrics.EvalReport
    unobserved: metrics.EvalReport
    sites: list = field(default_factory=list)
    calibration: dict = field(default_factory=dict)

    @property
    def unobserved_rmse_ratio(self):
        return self.unobserved.rmse / self.observed.rmse

    def to_dict(self):
        return {
            "overall": self.overall.to_dict(),
            "observed": self.observed.to_dict(),
            "unobserved": self.unobserved.to_dict(),
            "unobserved_rmse_ratio": self.unobserved_rmse_ratio,
            "moran_weights": MORAN_WEIGHTS,
            "sites": [s.to_dict() for s in self.sites],
            "calibration": self.calibration,
        }


def _accuracy_with_coverage(pred, truth, sigma):
    ok = np.isfinite(pred) & np.isfinite(truth) & np.isfinite(sigma)
    rep = metrics.accuracy(pred[ok], truth[ok])
    rep.coverage_1sd, rep.coverage_2sd = metrics.coverage(
        metrics.z_scores(pred[ok], truth[ok], sigma[ok]))
    return rep


def validate_dense(model: ModelState, world=None, quarter=0, mosaic=None, holdout=None,
                   observed=None, sites=None, site_size=64, seed=0, workers=1,
                   offsets=DEFAULT_OFFSETS, tile_size=1600):
    """Mosaic a synthetic world and compare against its dense truth.

    ``holdout`` restricts the comparison to those pixels (e.g. test blocks);
    ``observed`` marks pixels that carried a sparse target anywhere in
    training (default: the world's sample mask for ``quarter``) so gap
    filling is reported separately. Sites default to ``site_size`` squares.
    """
    truth = world.truth()
    H, W = truth.shape
    if mosaic is None:
        stack = world.layers(quarter)
        jobs = plan_tiles(H, W, tile_size, quarter)
        mosaic, _ = run_tiles(model, jobs, stack, world.grid, workers, seed, offsets)
    pred = mosaic.mean.astype(np.float64)
    sigma = mosaic.sigma_total.astype(np.float64)
    t = truth.astype(np.float64)
    keep = np.ones((H, W), bool) if holdout is None else np.asarray(holdout, bool)
    if observed is None:
        observed = world.sample_mask(quarter)
    overall = _accuracy_with_coverage(np.where(keep, pred, np.nan), t, sigma)
    obs_rep = _accuracy_with_coverage(np.where(keep & observed, pred, np.nan), t, sigma)
    uno_rep = _accuracy_with_coverage(np.where(keep & ~observed, pred, np.nan), t, sigma)
    sites = site_windows(H, W, site_size) if sites is None else sites
    reports = []
    for sid, r, c, h, w in sites:
        sl = (slice(r, r + h), slice(c, c + w))
        if not keep[sl].any():
            continue
        reports.append(site_report(sid, np.where(keep[sl], pred[sl], np.nan), t[sl]))
    run = ValidationRun("", np.where(keep, pred, np.nan).ravel(), t.ravel(), sigma.ravel())
    return DenseReport(overall, obs_rep, uno_rep, reports, calibration_report(run))


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

def jsonable(obj):
    """Recursively convert numpy values to builtins and non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj):
    with atomic_write(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=1, sort_keys=True, allow_nan=False)


def rows_to_csv(rows):
    rows = list(rows)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def write_csv(path, rows):
    with atomic_write(path, "w") as fh:
        fh.write(rows_to_csv(rows))


__all__ = [
    "ValidationRun", "SiteReport", "DenseReport", "chip_ensemble", "validate_sparse",
    "validate_dense", "calibration_report", "site_report", "site_windows",
    "write_json", "jsonable", "write_csv", "rows_to_csv", "TileJob",
]
