import numpy as np
import pytest

from wscifusion import network
from wscifusion.core import Parameter, RngStream, ShapeError
from wscifusion.metrics import masked_loss

from _gradcheck import rel_error

# regression values for the built-in presets
DEFAULT_PARAMS = 149_226
DESK_PARAMS = 21_366
TINY_PARAMS = 3_303


@pytest.fixture(scope="module")
def default_model():
    return network.build_model(network.default_spec(), RngStream(0))


@pytest.mark.parametrize("batch", [1, 2, 5])
def test_output_shape_and_positivity(default_model, batch):
    x = np.random.default_rng(batch).standard_normal((batch, 10, 40, 40)).astype(np.float32)
    for mode in ("eval", "mc"):
        out = network.forward(default_model, x, mode, RngStream(1))
        assert out.shape == (batch, 2, 32, 32)
        assert out.dtype == np.float32
        assert np.all(out > 0)


def test_parameter_counts():
    assert network.count_parameters(network.build_model(network.default_spec(), RngStream(0))) \
        == DEFAULT_PARAMS
    assert DEFAULT_PARAMS < 400_000
    assert network.count_parameters(network.build_model(network.desk_spec(), RngStream(0))) \
        == DESK_PARAMS
    assert network.count_parameters(network.build_model(network.tiny_spec(), RngStream(0))) \
        == TINY_PARAMS


def test_freeze_is_idempotent_and_small(default_model):
    m = default_model.copy()
    network.freeze_feature_extractor(m)
    network.freeze_feature_extractor(m)
    n = network.count_parameters(m, trainable_only=True)
    assert n == network.head_parameter_count(m.spec) == 82
    assert n / network.count_parameters(m) < 0.05
    network.unfreeze(m)
    assert network.count_parameters(m, trainable_only=True) == DEFAULT_PARAMS


def test_shape_errors(default_model):
    with pytest.raises(ShapeError, match="channel"):
        network.forward(default_model, np.zeros((1, 9, 40, 40), np.float32))
    with pytest.raises(ShapeError, match="height"):
        network.forward(default_model, np.zeros((1, 10, 38, 40), np.float32))
    with pytest.raises(ValueError):
        network.forward(default_model, np.zeros((1, 10, 40, 40), np.float32), "mc")


def test_modes_determinism(default_model):
    x = np.random.default_rng(0).standard_normal((2, 10, 40, 40)).astype(np.float32)
    a = network.forward(default_model, x, "eval")
    b = network.forward(default_model, x, "eval")
    assert np.array_equal(a, b)
    rng = RngStream(3)
    m1 = network.forward(default_model, x, "mc", rng, draw=0)
    m2 = network.forward(default_model, x, "mc", rng, draw=0)
    m3 = network.forward(default_model, x, "mc", rng, draw=1)
    assert np.array_equal(m1, m2) and not np.array_equal(m1, m3)


def test_initial_outputs_near_targets():
    m = network.build_model(network.desk_spec(), RngStream(0))
    x = np.random.default_rng(0).standard_normal((4, 10, 40, 40)).astype(np.float32)
    out = network.forward(m, x, "eval")
    assert abs(float(out[:, 0].mean()) - 9.0) < 1.5
    assert 0.2 < float(out[:, 1].mean()) < 3.0


def test_spec_roundtrip_and_digest():
    s = network.default_spec()
    again = network.ArchitectureSpec.from_dict(s.to_dict())
    assert again == s and again.digest() == s.digest()
    assert network.desk_spec().digest() != s.digest()


@pytest.mark.parametrize("make", [network.tiny_spec, network.desk_spec])
def test_receptive_field_locality_is_exact(make):
    spec = make()
    m = network.build_model(spec, RngStream(2))
    R = spec.receptive_radius()
    g = np.random.default_rng(5)
    x = g.standard_normal((1, 10, spec.input_size, spec.input_size)).astype(np.float32)
    base = network.forward(m, x, "eval")[0, 0]
    b = spec.border
    S = spec.input_size
    for (i, j) in [(0, 0), (S - 1, S // 2), (S // 2, 1)]:
        y = x.copy()
        y[0, :, i, j] += 5.0
        out = network.forward(m, y, "eval")[0, 0]
        rr = np.arange(out.shape[0])[:, None] + b
        cc = np.arange(out.shape[1])[None, :] + b
        far = np.maximum(np.abs(rr - i), np.abs(cc - j)) > R
        assert np.array_equal(out[far], base[far])
        near = ~far
        if near.any():
            assert not np.array_equal(out[near], base[near])


def test_global_se_breaks_locality():
    spec = network.tiny_spec(se_window=None)
    assert spec.receptive_radius() == float("inf")
    m = network.build_model(spec, RngStream(2))
    x = np.random.default_rng(5).standard_normal((1, 10, 16, 16)).astype(np.float32)
    y = x.copy()
    y[0, :, 0, 0] += 5
    a = network.forward(m, x, "eval")[0, 0]
    b = network.forward(m, y, "eval")[0, 0]
    assert not np.array_equal(a[-1, -1], b[-1, -1])


def _as_float64(model):
    params = {k: Parameter(p.value.astype(np.float64)) for k, p in model.params.items()}
    buffers = {k: v.astype(np.float64) for k, v in model.buffers.items()}
    return network.ModelState(model.spec, params, buffers)


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradient(seed):
    spec = network.tiny_spec()
    m = _as_float64(network.build_model(spec, RngStream(seed)))
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 10, 16, 16))
    target = np.where(g.random((2, 12, 12)) < 0.3, g.uniform(6, 12, (2, 12, 12)), np.nan)
    target[0, 0, 0] = 8.0
    rng = RngStream(seed, 9)

    def loss():
        out = network.forward(m, x, "train", rng, draw=1)
        return masked_loss(out, target, with_grad=False)[0]

    tape = network.Tape()
    out = network.forward(m, x, "train", rng, draw=1, tape=tape)
    _, grad, _ = masked_loss(out, target)
    m.zero_grads()
    network.backward(m, tape, grad)
    names = sorted(m.params)
    picks = [names[i] for i in g.choice(len(names), 6, replace=False)] + ["head.conv.weight",
                                                                        "stem.conv.weight"]
    analytic, numeric = [], []
    h = 1e-6
    for name in picks:
        p = m.params[name]
        flat = p.value.reshape(-1)
        i = int(g.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        lp = loss()
        flat[i] = old - h
        lm = loss()
        flat[i] = old
        numeric.append((lp - lm) / (2 * h))
        analytic.append(p.grad.reshape(-1)[i])
    assert rel_error(analytic, numeric) < 1e-2

    # input gradient through the whole network
    tape = network.Tape()
    out = network.forward(m, x, "train", rng, draw=1, tape=tape)
    _, grad, _ = masked_loss(out, target)
    dx = network.input_gradient(m, tape, grad)
    idx = g.choice(x.size, 6, replace=False)
    num = []
    flat = x.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        lp = loss()
        flat[i] = old - h
        lm = loss()
        flat[i] = old
        num.append((lp - lm) / (2 * h))
    assert rel_error(dx.reshape(-1)[idx], num) < 1e-2


def test_frozen_backward_touches_head_only():
    spec = network.tiny_spec()
    m = network.build_model(spec, RngStream(0))
    network.freeze_feature_extractor(m)
    x = np.random.default_rng(0).standard_normal((2, 10, 16, 16)).astype(np.float32)
    before = {k: v.copy() for k, v in m.buffers.items()}
    tape = network.Tape()
    out = network.forward(m, x, "train", RngStream(1), tape=tape)
    _, grad, _ = masked_loss(out, np.full((2, 12, 12), 9.0, np.float32))
    m.zero_grads()
    network.backward(m, tape, grad)
    for name, p in m.params.items():
        if name.startswith("head."):
            assert np.any(p.grad != 0)
        else:
            assert not np.any(p.grad)
    # frozen blocks normalise with running statistics and leave them alone
    for k, v in m.buffers.items():
        assert np.array_equal(v, before[k])
