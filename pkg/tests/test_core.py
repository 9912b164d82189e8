import numpy as np
import pytest

from wscifusion import core
from wscifusion.core import RngStream, ShapeError

from _gradcheck import check

SEEDS = range(20)
TOL = 1e-3


def _proj(gen, shape):
    return gen.standard_normal(shape)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("k", [1, 3])
def test_conv2d_gradients(seed, k):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 5, 6))
    w = g.standard_normal((4, 3, k, k))
    b = g.standard_normal(4)
    R = _proj(g, (2, 4, 5, 6))

    def f():
        return float(np.sum(core.conv2d(x, w, b)[0] * R))

    _, cache = core.conv2d(x, w, b)
    dx, dw, db = core.conv2d_backward(R, cache)
    assert check(f, x, dx, g) < TOL
    assert check(f, w, dw, g) < TOL
    assert check(f, b, db, g) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_gradients(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 6, 5))
    w = g.standard_normal((3, 3, 3))
    R = _proj(g, x.shape)

    def f():
        return float(np.sum(core.depthwise_conv2d(x, w)[0] * R))

    _, cache = core.depthwise_conv2d(x, w)
    dx, dw = core.depthwise_conv2d_backward(R, cache)
    assert check(f, x, dx, g) < TOL
    assert check(f, w, dw, g) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(seed, mode):
    g = np.random.default_rng(seed)
    x = g.standard_normal((3, 4, 3, 3)) * 2 + 1
    scale = g.standard_normal(4)
    shift = g.standard_normal(4)
    rm = g.standard_normal(4)
    rv = g.uniform(0.5, 2.0, 4)
    R = _proj(g, x.shape)

    def f():
        # copies so the running buffers do not drift between evaluations
        return float(np.sum(core.batchnorm2d(x, scale, shift, rm.copy(), rv.copy(), mode)[0] * R))

    _, cache = core.batchnorm2d(x, scale, shift, rm.copy(), rv.copy(), mode)
    dx, ds, db = core.batchnorm2d_backward(R, cache)
    assert check(f, x, dx, g) < TOL
    assert check(f, scale, ds, g) < TOL
    assert check(f, shift, db, g) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("name", ["relu", "silu", "sigmoid", "softplus"])
def test_activation_gradients(seed, name):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 4, 4)) * 3
    if name == "relu":
        x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    fwd = getattr(core, name)
    bwd = getattr(core, name + "_backward")
    R = _proj(g, x.shape)

    def f():
        return float(np.sum(fwd(x.copy())[0] * R))

    _, cache = fwd(x.copy())
    assert check(f, x, bwd(R, cache), g) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("window", [None, 3, 5])
def test_se_gate_gradients(seed, window):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 4, 6, 6))
    wr = g.standard_normal((2, 4, 1, 1))
    br = g.standard_normal(2)
    we = g.standard_normal((4, 2, 1, 1))
    be = g.standard_normal(4)
    R = _proj(g, x.shape)

    def f():
        return float(np.sum(core.se_gate(x, wr, br, we, be, window)[0] * R))

    _, cache = core.se_gate(x, wr, br, we, be, window)
    dx, dwr, dbr, dwe, dbe = core.se_gate_backward(R, cache)
    for arr, grad in ((x, dx), (wr, dwr), (br, dbr), (we, dwe), (be, dbe)):
        assert check(f, arr, grad, g) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_box_dropout_crop_gradients(seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 8, 7))
    R = _proj(g, x.shape)
    mean, count = core.box_mean(x, 5)
    assert check(lambda: float(np.sum(core.box_mean(x, 5)[0] * R)), x,
                 core.box_mean_backward(R, count, 5), g) < TOL

    rng = RngStream(seed)
    _, mask = core.mc_dropout(x, 0.3, rng, draw=2)
    assert check(lambda: float(np.sum(core.mc_dropout(x, 0.3, rng, draw=2)[0] * R)), x,
                 core.mc_dropout_backward(R, mask), g) < TOL

    Rc = _proj(g, (2, 3, 4, 3))
    _, cc = core.crop_border(x, 2)
    assert check(lambda: float(np.sum(core.crop_border(x, 2)[0] * Rc)), x,
                 core.crop_border_backward(Rc, cc), g) < TOL


def test_box_mean_matches_loop():
    g = np.random.default_rng(3)
    x = g.standard_normal((1, 2, 7, 9))
    got, _ = core.box_mean(x, 5)
    want = np.zeros_like(x)
    for i in range(7):
        for j in range(9):
            want[0, :, i, j] = x[0, :, max(0, i - 2):i + 3, max(0, j - 2):j + 3].mean(axis=(1, 2))
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_matches_direct_loop():
    g = np.random.default_rng(4)
    x = g.standard_normal((1, 2, 5, 5))
    w = g.standard_normal((3, 2, 3, 3))
    got, _ = core.conv2d(x, w)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                want[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_activations_overflow_safe():
    x = np.array([-1000.0, -100.0, 0.0, 100.0, 1000.0]).reshape(1, 1, 1, 5)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        s, _ = core.sigmoid(x.copy())
        sp, _ = core.softplus(x.copy())
        si, _ = core.silu(x.copy())
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp)) and np.all(np.isfinite(si))
    assert s[0, 0, 0, 0] == 0.0 and s[0, 0, 0, -1] == 1.0
    assert sp[0, 0, 0, -1] == 1000.0
    assert np.all(sp >= 0)


def test_inverse_softplus_roundtrip():
    y = np.array([1e-3, 0.5, 1.0, 9.0, 30.0])
    x = core.inverse_softplus(y)
    back, _ = core.softplus(x.reshape(1, 1, 1, -1))
    np.testing.assert_allclose(back.ravel(), y, rtol=1e-12)


def test_shape_errors_name_axis():
    x = np.zeros((1, 3, 4, 4))
    with pytest.raises(ShapeError, match="channel"):
        core.conv2d(x, np.zeros((2, 4, 3, 3)))
    with pytest.raises(ShapeError, match="rank"):
        core.conv2d(np.zeros((3, 4, 4)), np.zeros((2, 3, 3, 3)))
    with pytest.raises(ShapeError, match="kernel"):
        core.conv2d(x, np.zeros((2, 3, 2, 2)))
    with pytest.raises(ShapeError, match="spatial"):
        core.crop_border(x, 2)


def test_dropout_contract():
    x = np.ones((2, 3, 8, 8), np.float32)
    rng = RngStream(7)
    a, m1 = core.mc_dropout(x, 0.2, rng, draw=1)
    b, m2 = core.mc_dropout(x, 0.2, rng, draw=1)
    c, _ = core.mc_dropout(x, 0.2, rng, draw=2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert set(np.unique(m1).tolist()) <= {0.0, np.float32(1 / 0.8)}
    same, none = core.mc_dropout(x, 0.2, rng, active=False)
    assert same is x and none is None
    with pytest.raises(ValueError):
        core.mc_dropout(x, 1.0, rng)


def test_rng_streams_are_independent_and_stable():
    a = RngStream(1, 0).generator().random(4)
    b = RngStream(1, 1).generator().random(4)
    c = RngStream(1, 0).generator().random(4)
    assert np.array_equal(a, c) and not np.array_equal(a, b)
    assert RngStream(1).child(2) != RngStream(1).child(3)
    assert RngStream(1).child(2).child(0) != RngStream(1).child(0).child(2)


def test_adam_matches_reference_and_skips_frozen():
    g = np.random.default_rng(0)
    w0 = g.standard_normal(5)
    grads = [g.standard_normal(5) for _ in range(4)]
    p = core.Parameter(w0.copy())
    frozen = core.Parameter(w0.copy(), trainable=False)
    state = core.AdamState()
    m = np.zeros(5)
    v = np.zeros(5)
    ref = w0.copy()
    for t, gr in enumerate(grads, 1):
        p.grad[:] = gr
        frozen.grad[:] = gr
        core.adam_step({"p": p, "f": frozen}, state, 0.01)
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr ** 2
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        ref = ref - 0.01 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p.value, ref, rtol=1e-12, atol=1e-14)
    assert np.array_equal(frozen.value, w0)
    assert "f" not in state.m
