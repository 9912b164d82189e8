"""Loss, uncertainty composition, accuracy, calibration and Moran's I.

Naming follows the regression convention used throughout the package:
``y`` is the predicted mean, ``mu`` the observed target and ``sigma2`` the
predicted (aleatoric) variance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

NODATA = float("nan")
LOG_2PI = math.log(2.0 * math.pi)


def valid_mask(mu):
    """Targets count only when finite and strictly positive."""
    mu = np.asarray(mu)
    with np.errstate(invalid="ignore"):
        return np.isfinite(mu) & (mu > 0)


def gaussian_nll(y, sigma2, mu):
    """Per-pixel Gaussian negative log-likelihood."""
    y = np.asarray(y, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 <= 0):
        raise ValueError("gaussian_nll: variance must be positive")
    r = y - np.asarray(mu, dtype=np.float64)
    out = 0.5 * (LOG_2PI + np.log(sigma2)) + r * r / (2.0 * sigma2)
    return out if out.ndim else float(out)


def masked_loss(pred, target, with_grad=True):
    """Mean NLL over pixels with a valid target.

    Parameters
    ----------
    pred : ndarray (B, 2, H, W)
        Channel 0 is the mean, channel 1 the variance.
    target : ndarray (B, H, W)
        Observed values; NaN / non-positive entries are ignored.

    Returns
    -------
    loss : float
    grad : ndarray like ``pred`` (zero wherever the target is invalid), or
        None when ``with_grad`` is false.
    n_valid : int
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != 4 or pred.shape[1] != 2:
        raise ValueError(f"masked_loss: pred must be (B, 2, H, W), got {pred.shape}")
    if target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(
            f"masked_loss: target shape {target.shape} does not match pred {pred.shape}")
    valid = valid_mask(target)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("masked_loss: batch has no valid target pixels")
    y = pred[:, 0].astype(np.float64)
    s2 = pred[:, 1].astype(np.float64)
    mu = np.where(valid, target, 0.0).astype(np.float64)
    s2_safe = np.where(valid, s2, 1.0)
    if np.any(s2_safe <= 0):
        raise ValueError("masked_loss: variance must be positive")
    r = np.where(valid, y - mu, 0.0)
    nll = 0.5 * (LOG_2PI + np.log(s2_safe)) + r * r / (2.0 * s2_safe)
    loss = float(np.sum(nll[valid]) / n)
    if not with_grad:
        return loss, None, n
    grad = np.zeros(pred.shape, dtype=np.float64)
    grad[:, 0] = np.where(valid, r / s2_safe, 0.0)
    grad[:, 1] = np.where(valid, 0.5 / s2_safe - r * r / (2.0 * s2_safe ** 2), 0.0)
    grad /= n
    return loss, grad.astype(pred.dtype), n


def total_std(sigma_data, sigma_model):
    sigma_data = np.asarray(sigma_data, dtype=np.float64)
    sigma_model = np.asarray(sigma_model, dtype=np.float64)
    return np.hypot(sigma_data, sigma_model)


def z_scores(y, mu, sigma_total):
    """Standardized residuals; NaN wherever an input is NaN."""
    sigma_total = np.asarray(sigma_total, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        if np.any(sigma_total <= 0):
            raise ValueError("z_scores: sigma_total must be positive")
    return (np.asarray(y, dtype=np.float64) - np.asarray(mu, dtype=np.float64)) / sigma_total


def coverage(z, thresholds=(1.0, 2.0)):
    """Fraction of finite ``|z|`` strictly below each threshold."""
    z = np.asarray(z, dtype=np.float64).ravel()
    z = np.abs(z[np.isfinite(z)])
    if z.size == 0:
        return tuple(NODATA for _ in thresholds)
    return tuple(float(np.count_nonzero(z < t) / z.size) for t in thresholds)


def binned_coverage(z, obs, edges, thresholds=(1.0, 2.0)):
    """Coverage per observed-value interval ``[edges[i], edges[i+1])``.

    Returns a list of dicts with ``lo``, ``hi``, ``n`` and one
    ``coverage_<t>sd`` entry per threshold.
    """
    z = np.asarray(z, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (obs >= lo) & (obs < hi) & np.isfinite(z)
        row = {"lo": float(lo), "hi": float(hi), "n": int(sel.sum())}
        for t, c in zip(thresholds, coverage(z[sel], thresholds)):
            row[f"coverage_{t:g}sd"] = c
        rows.append(row)
    return rows


@dataclass
class EvalReport:
    r2: float
    rmse: float
    bias: float
    n: int
    coverage_1sd: float = NODATA
    coverage_2sd: float = NODATA

    def to_dict(self):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def accuracy(pred, obs, r2_kind="determination") -> EvalReport:
    """R², RMSE and bias (mean of pred − obs) over finite pairs.

    ``r2_kind="determination"`` gives 1 − SS_res/SS_tot; ``"pearson"`` the
    squared correlation coefficient. Constant observations leave R² NaN.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    ok = np.isfinite(pred) & np.isfinite(obs)
    pred, obs = pred[ok], obs[ok]
    n = int(pred.size)
    if n == 0:
        return EvalReport(NODATA, NODATA, NODATA, 0)
    resid = pred - obs
    rmse = math.sqrt(float(np.mean(resid * resid)))
    bias = float(np.mean(resid))
    r2 = NODATA
    if n >= 2:
        dev = obs - obs.mean()
        ss_tot = float(np.sum(dev * dev))
        if ss_tot > 0:
            if r2_kind == "determination":
                r2 = 1.0 - float(np.sum(resid * resid)) / ss_tot
            elif r2_kind == "pearson":
                r = pearson(pred, obs)
                r2 = r * r
            else:
                raise ValueError(f"unknown r2_kind {r2_kind!r}")
    return EvalReport(r2, rmse, bias, n)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok] - a[ok].mean(), b[ok] - b[ok].mean()
    den = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    return float(np.sum(a * b) / den) if den > 0 else NODATA


def metrics_by_category(pred, obs, categories, min_count=100, other="other"):
    """Accuracy per category; categories with fewer than ``min_count`` pairs
    are pooled into ``other``."""
    pred = np.asarray(pred).ravel()
    obs = np.asarray(obs).ravel()
    cats = np.asarray(categories).ravel()
    labels, counts = np.unique(cats, return_counts=True)
    small = set(labels[counts < min_count].tolist())
    keyed = np.array([other if c in small else c for c in cats.tolist()], dtype=object)
    out = {}
    for key in sorted(set(keyed.tolist()), key=str):
        sel = keyed == key
        out[key] = accuracy(pred[sel], obs[sel])
    return out


# --------------------------------------------------------------------------
# Moran's I on regular grids
# --------------------------------------------------------------------------

ROOK = ((-1, 0), (1, 0), (0, -1), (0, 1))
QUEEN = ROOK + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def _shift(a, dr, dc, fill):
    """``out[i, j] = a[i + dr, j + dc]`` with ``fill`` outside the grid."""
    H, W = a.shape
    out = np.full_like(a, fill)
    r0, r1 = max(0, -dr), min(H, H - dr)
    c0, c1 = max(0, -dc), min(W, W - dc)
    out[r0:r1, c0:c1] = a[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def grid_weights(valid, weights="queen", row_standardized=True):
    """Per-offset weight planes ``w[k][i, j]`` for the neighbour at
    ``offset[k]`` of cell (i, j); zero when either cell is invalid."""
    offsets = QUEEN if weights == "queen" else ROOK if weights == "rook" else None
    if offsets is None:
        raise ValueError(f"unknown weights {weights!r}")
    valid = np.asarray(valid, dtype=bool)
    planes = [(valid & _shift(valid, dr, dc, False)).astype(np.float64) for dr, dc in offsets]
    if row_standardized:
        deg = np.sum(planes, axis=0)
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        planes = [p * inv for p in planes]
    return offsets, planes


def morans_i(field_a, field_b=None, weights="queen", row_standardized=True):
    """Global Moran's I (``field_b`` None) or bivariate cross-correlation.

    Cells that are NaN in either field are dropped from the sums and from
    every neighbourhood. The cross term uses the symmetrized weights
    ``(W + Wᵀ)/2`` so ``I(a, b) == I(b, a)`` exactly; for ``a == b`` this is
    identical to the ordinary statistic because a quadratic form only sees
    the symmetric part of ``W``.
    """
    a = np.asarray(field_a, dtype=np.float64)
    b = a if field_b is None else np.asarray(field_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("morans_i: fields must be 2-D grids of equal shape")
    valid = np.isfinite(a) & np.isfinite(b)
    n = int(valid.sum())
    if n < 2:
        raise ValueError("morans_i: need at least two valid cells")
    da = np.where(valid, a - a[valid].mean(), 0.0)
    db = np.where(valid, b - b[valid].mean(), 0.0)
    ssa = float(np.sum(da * da))
    ssb = float(np.sum(db * db))
    if ssa == 0 or ssb == 0:
        raise ValueError("morans_i: degenerate field (zero variance)")
    offsets, planes = grid_weights(valid, weights, row_standardized)
    s0 = float(np.sum(planes))
    if s0 == 0:
        raise ValueError("morans_i: no neighbour pairs among valid cells")
    ab = 0.0
    ba = 0.0
    for (dr, dc), w in zip(offsets, planes):
        ab += float(np.sum(w * da * _shift(db, dr, dc, 0.0)))
        ba += float(np.sum(w * db * _shift(da, dr, dc, 0.0)))
    cross = 0.5 * (ab + ba)
    return (n / s0) * cross / math.sqrt(ssa * ssb)
