import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wscifusion import metrics

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)  # 0.9189385332046727


def test_nll_fixtures():
    assert metrics.gaussian_nll(9.0, 1.0, 9.0) == pytest.approx(0.918938533204672, abs=1e-12)
    assert metrics.gaussian_nll(9.0, 1.0, 9.0) == pytest.approx(HALF_LOG_2PI, abs=1e-15)
    # one standard deviation away adds exactly one half
    assert metrics.gaussian_nll(11.0, 4.0, 9.0) - metrics.gaussian_nll(9.0, 4.0, 9.0) \
        == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        metrics.gaussian_nll(1.0, 0.0, 1.0)


def _loop_loss(pred, target):
    total, n = 0.0, 0
    B, _, H, W = pred.shape
    for b in range(B):
        for i in range(H):
            for j in range(W):
                mu = target[b, i, j]
                if not (np.isfinite(mu) and mu > 0):
                    continue
                y, s2 = float(pred[b, 0, i, j]), float(pred[b, 1, i, j])
                total += 0.5 * math.log(2 * math.pi * s2) + (y - mu) ** 2 / (2 * s2)
                n += 1
    return total / n, n


@pytest.mark.parametrize("seed", range(5))
def test_masked_loss_matches_loop(seed):
    g = np.random.default_rng(seed)
    pred = np.stack([g.uniform(6, 12, (3, 8, 8)), g.uniform(0.1, 3, (3, 8, 8))], axis=1)
    target = g.uniform(6, 12, (3, 8, 8))
    target[g.random(target.shape) < 0.6] = np.nan
    target[0, 0, :3] = [0.0, -1.0, np.inf]
    loss, grad, n = metrics.masked_loss(pred, target)
    want, n_want = _loop_loss(pred, target)
    assert n == n_want
    assert abs(loss - want) < 1e-6


def test_masked_loss_gradient_zero_off_mask():
    g = np.random.default_rng(1)
    pred = np.stack([g.uniform(6, 12, (2, 6, 6)), g.uniform(0.1, 3, (2, 6, 6))], axis=1)
    target = np.full((2, 6, 6), np.nan)
    target[0, 2, 3] = 9.0
    target[1, 0, 0] = 7.0
    target[1, 1, 1] = 0.0
    _, grad, n = metrics.masked_loss(pred, target)
    assert n == 2
    invalid = ~metrics.valid_mask(target)
    assert np.all(grad[:, 0][invalid] == 0) and np.all(grad[:, 1][invalid] == 0)
    assert np.count_nonzero(grad[:, 0]) == 2


def test_masked_loss_rejects_empty_and_bad_shapes():
    pred = np.ones((1, 2, 4, 4))
    with pytest.raises(ValueError, match="no valid"):
        metrics.masked_loss(pred, np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        metrics.masked_loss(pred, np.ones((1, 3, 4)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 5, 5), elements=st.one_of(
    st.floats(6, 12), st.just(np.nan), st.just(0.0), st.just(-3.0))))
def test_masked_loss_gradient_zero_property(target):
    if not metrics.valid_mask(target).any():
        target[0, 0, 0] = 8.0
    pred = np.stack([np.full((2, 5, 5), 9.0), np.full((2, 5, 5), 1.5)], axis=1)
    _, grad, _ = metrics.masked_loss(pred, target)
    bad = ~metrics.valid_mask(target)
    assert np.all(grad[:, 0][bad] == 0.0) and np.all(grad[:, 1][bad] == 0.0)


def test_total_std_identity():
    assert metrics.total_std(3.0, 4.0) == 5.0
    g = np.random.default_rng(0)
    a, b = g.uniform(0, 5, 1000), g.uniform(0, 5, 1000)
    t = metrics.total_std(a, b)
    np.testing.assert_allclose(t * t, a * a + b * b, rtol=1e-9)


def test_z_score_and_coverage():
    assert metrics.z_scores(10.0, 9.0, 0.5) == 2.0
    z = np.array([0.5, 1.0, -1.5, 2.0, np.nan, -0.2])
    c1, c2 = metrics.coverage(z)
    assert c1 == pytest.approx(2 / 5) and c2 == pytest.approx(4 / 5)  # strict inequality
    with pytest.raises(ValueError):
        metrics.z_scores(1.0, 1.0, 0.0)


def _binom_halfwidth(p, n, k=4.0):
    return k * math.sqrt(p * (1 - p) / n)


def test_coverage_of_exact_gaussian_predictor():
    g = np.random.default_rng(11)
    n = 200_000
    obs = g.uniform(6, 12, n)
    sigma = g.uniform(0.2, 1.0, n)
    pred = obs + sigma * g.standard_normal(n)
    c1, c2 = metrics.coverage(metrics.z_scores(pred, obs, sigma))
    p1, p2 = math.erf(1 / math.sqrt(2)), math.erf(2 / math.sqrt(2))
    assert abs(c1 - p1) < _binom_halfwidth(p1, n)
    assert abs(c2 - p2) < _binom_halfwidth(p2, n)
    half, _ = metrics.coverage(metrics.z_scores(pred, obs, sigma / 2))
    p_half = math.erf(0.5 / math.sqrt(2))  # Φ(0.5) − Φ(−0.5) = 0.383
    assert abs(half - p_half) < _binom_halfwidth(p_half, n)


def test_accuracy_definitions():
    obs = np.array([1.0, 2.0, 3.0, 4.0])
    rep = metrics.accuracy(obs, obs)
    assert rep.r2 == 1.0 and rep.rmse == 0.0 and rep.bias == 0.0 and rep.n == 4
    const = metrics.accuracy(np.full(4, 2.5), obs)
    assert const.r2 <= 0
    biased = metrics.accuracy(obs + 1, obs)
    assert biased.bias == 1.0 and biased.rmse == 1.0
    assert math.isnan(metrics.accuracy([1.0, 2.0], [3.0, 3.0]).r2)
    assert metrics.accuracy(obs * 2, obs, "pearson").r2 == pytest.approx(1.0)
    assert '"r2": null' in metrics.accuracy([1.0, 2.0], [3.0, 3.0]).to_json()


def test_metrics_by_category_pools_small_strata():
    g = np.random.default_rng(0)
    cats = np.array(["a"] * 150 + ["b"] * 120 + ["c"] * 30 + ["d"] * 20)
    obs = g.uniform(6, 12, cats.size)
    out = metrics.metrics_by_category(obs + 0.1, obs, cats, min_count=100)
    assert set(out) == {"a", "b", "other"}
    assert out["other"].n == 50


# ---------------------------------------------------------------- Moran's I

def _brute_moran(a, b, offsets, row_standardized=True):
    H, W = a.shape
    valid = np.isfinite(a) & np.isfinite(b)
    cells = [(i, j) for i in range(H) for j in range(W) if valid[i, j]]
    n = len(cells)
    index = {c: k for k, c in enumerate(cells)}
    Wm = np.zeros((n, n))
    for (i, j), k in index.items():
        for dr, dc in offsets:
            nb = (i + dr, j + dc)
            if nb in index:
                Wm[k, index[nb]] = 1.0
    if row_standardized:
        rs = Wm.sum(axis=1, keepdims=True)
        Wm = np.divide(Wm, rs, out=np.zeros_like(Wm), where=rs > 0)
    av = np.array([a[c] for c in cells])
    bv = np.array([b[c] for c in cells])
    da, db = av - av.mean(), bv - bv.mean()
    Ws = 0.5 * (Wm + Wm.T)
    num = 0.0
    for p in range(n):
        for q in range(n):
            num += Ws[p, q] * da[p] * db[q]
    return (n / Wm.sum()) * num / math.sqrt(np.sum(da * da) * np.sum(db * db))


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("weights", ["queen", "rook"])
@pytest.mark.parametrize("std", [True, False])
def test_morans_i_matches_bruteforce(seed, weights, std):
    g = np.random.default_rng(seed)
    a = g.standard_normal((16, 16)).cumsum(axis=1)
    b = a + g.standard_normal((16, 16))
    a[g.random((16, 16)) < 0.15] = np.nan
    b[g.random((16, 16)) < 0.1] = np.nan
    offsets = metrics.QUEEN if weights == "queen" else metrics.ROOK
    for x, y in ((a, None), (a, b)):
        got = metrics.morans_i(x, y, weights, std)
        want = _brute_moran(x, x if y is None else y, offsets, std)
        assert abs(got - want) < 1e-10


def test_checkerboard_rook_is_minus_one():
    board = np.indices((8, 8)).sum(axis=0) % 2 * 1.0
    assert metrics.morans_i(board, weights="rook") == pytest.approx(-1.0, abs=1e-12)


def test_cross_moran_symmetry_is_exact():
    g = np.random.default_rng(5)
    a = g.standard_normal((12, 12))
    b = g.standard_normal((12, 12))
    a[3, 4] = np.nan
    assert metrics.morans_i(a, b) == metrics.morans_i(b, a)
    assert metrics.morans_i(a, a) == pytest.approx(metrics.morans_i(a), abs=1e-14)


def test_moran_degenerate_field():
    with pytest.raises(ValueError, match="degenerate"):
        metrics.morans_i(np.ones((5, 5)))
