"""Dense NCHW kernels with hand-written reverse-mode gradients.

Every forward kernel returns ``(out, cache)``; the matching ``*_backward``
consumes the upstream gradient and the cache. Kernels preserve the input
dtype, so the same code path serves the float32 production network and the
float64 shadow evaluation used by gradient checks.

Only the closed set of operations the fusion network needs is provided:
stride-1 same-padded convolutions (dense and depthwise), batch
normalization, SiLU / sigmoid / softplus, squeeze-and-excitation gating,
inverted MC dropout, border cropping and the Adam update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ShapeError",
    "Parameter",
    "RngStream",
    "AdamState",
    "zero_grads",
    "conv2d",
    "conv2d_backward",
    "depthwise_conv2d",
    "depthwise_conv2d_backward",
    "batchnorm2d",
    "batchnorm2d_backward",
    "relu",
    "relu_backward",
    "silu",
    "silu_backward",
    "sigmoid",
    "sigmoid_backward",
    "softplus",
    "softplus_backward",
    "inverse_softplus",
    "box_mean",
    "box_mean_backward",
    "se_gate",
    "se_gate_backward",
    "mc_dropout",
    "mc_dropout_backward",
    "crop_border",
    "crop_border_backward",
    "adam_step",
]

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when tensor extents disagree; the message names the axis."""

    def __init__(self, op: str, axis: str, got, expected):
        self.op = op
        self.axis = axis
        self.got = got
        self.expected = expected
        super().__init__(f"{op}: {axis} axis has extent {got}, expected {expected}")


@dataclass(eq=False)
class Parameter:
    """A trainable value with a same-shaped gradient buffer."""

    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError("Parameter", "grad", self.grad.shape, self.value.shape)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad.fill(0)


def zero_grads(params):
    for p in params:
        p.zero_grad()


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Draws come from Philox, so ``generator(draw, slot)`` returns the same
    numbers for the same ``(seed, stream, draw, slot)`` on every platform.
    """

    seed: int
    stream: int = 0

    def generator(self, draw: int = 0, slot: int = 0) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, slot & _MASK64, draw & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def child(self, stream: int) -> "RngStream":
        # mixes the parent stream in so grandchildren stay distinct
        mixed = (self.stream * 0x9E3779B97F4A7C15 + stream + 1) & _MASK64
        return RngStream(self.seed, mixed)


def _check4(op, x):
    if x.ndim != 4:
        raise ShapeError(op, "rank", x.ndim, 4)


def _check_kernel(op, k, k2):
    if k != k2:
        raise ShapeError(op, "kernel width", k2, k)
    if k % 2 == 0:
        raise ShapeError(op, "kernel", k, "an odd extent")


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

def _im2col(x, k):
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((B, C, k * k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(B, C * k * k, H * W)


def _col2im(dcols, shape, k):
    B, C, H, W = shape
    p = k // 2
    dcols = dcols.reshape(B, C, k * k, H, W)
    dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + H, j:j + W] += dcols[:, :, i * k + j]
    return dxp[:, :, p:p + H, p:p + W]


def conv2d(x, weight, bias=None):
    """Stride-1 same-padded convolution.

    Parameters
    ----------
    x : ndarray, shape (B, C, H, W)
    weight : ndarray, shape (O, C, k, k), ``k`` odd
    bias : ndarray, shape (O,), optional
    """
    _check4("conv2d", x)
    O, C, k, k2 = weight.shape
    _check_kernel("conv2d", k, k2)
    if x.shape[1] != C:
        raise ShapeError("conv2d", "channel", x.shape[1], C)
    if bias is not None and bias.shape != (O,):
        raise ShapeError("conv2d", "bias", bias.shape, (O,))
    B, _, H, W = x.shape
    cols = x.reshape(B, C, H * W) if k == 1 else _im2col(x, k)
    out = np.matmul(weight.reshape(O, -1), cols)
    if bias is not None:
        out += bias.reshape(1, O, 1)
    return out.reshape(B, O, H, W), (cols, x.shape, weight, bias is not None)


def conv2d_backward(dout, cache, need_dx=True):
    """Return ``(dx, dweight, dbias)``; ``dx`` is None when not requested."""
    cols, xshape, weight, has_bias = cache
    B, C, H, W = xshape
    O, _, k, _ = weight.shape
    d = dout.reshape(B, O, H * W)
    dw = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    db = d.sum(axis=(0, 2)) if has_bias else None
    dx = None
    if need_dx:
        dcols = np.matmul(weight.reshape(O, -1).T, d)
        dx = dcols.reshape(xshape) if k == 1 else _col2im(dcols, xshape, k)
    return dx, dw, db


def depthwise_conv2d(x, weight):
    """Per-channel stride-1 same-padded convolution; ``weight`` is (C, k, k)."""
    _check4("depthwise_conv2d", x)
    C, k, k2 = weight.shape
    _check_kernel("depthwise_conv2d", k, k2)
    if x.shape[1] != C:
        raise ShapeError("depthwise_conv2d", "channel", x.shape[1], C)
    B, _, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    tmp = np.empty_like(x)
    w = weight.reshape(1, C, k * k, 1, 1)
    for i in range(k):
        for j in range(k):
            np.multiply(xp[:, :, i:i + H, j:j + W], w[:, :, i * k + j], out=tmp)
            out += tmp
    return out, (xp, weight)


def depthwise_conv2d_backward(dout, cache, need_dx=True):
    xp, weight = cache
    C, k, _ = weight.shape
    B, _, H, W = dout.shape
    p = k // 2
    dw = np.empty_like(weight)
    dxp = np.zeros_like(xp) if need_dx else None
    tmp = np.empty_like(dout)
    for i in range(k):
        for j in range(k):
            np.multiply(dout, xp[:, :, i:i + H, j:j + W], out=tmp)
            dw[:, i, j] = tmp.sum(axis=(0, 2, 3))
            if need_dx:
                np.multiply(dout, weight[:, i, j].reshape(1, C, 1, 1), out=tmp)
                dxp[:, :, i:i + H, j:j + W] += tmp
    dx = dxp[:, :, p:p + H, p:p + W] if need_dx else None
    return dx, dw


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

def batchnorm2d(x, scale, shift, running_mean, running_var, mode="train",
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    ``mode="train"`` normalizes with batch statistics and updates the
    running buffers in place (unbiased variance, PyTorch convention);
    any other mode uses the running buffers only.
    """
    _check4("batchnorm2d", x)
    C = x.shape[1]
    if scale.shape != (C,):
        raise ShapeError("batchnorm2d", "channel", C, scale.shape[0])
    shape = (1, C, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        xc = x - mean.reshape(shape)
        var = np.mean(np.square(xc), axis=(0, 2, 3))
        n = x.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * (n / max(n - 1, 1))).astype(running_var.dtype)
    else:
        xc = x - running_mean.astype(x.dtype).reshape(shape)
        var = running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(shape)
    out = xhat * scale.reshape(shape) + shift.reshape(shape)
    return out, (xhat, inv, scale, mode == "train")


def batchnorm2d_backward(dout, cache, need_dx=True):
    """Return ``(dx, dscale, dshift)``."""
    xhat, inv, scale, batch_stats = cache
    shape = (1, -1, 1, 1)
    dshift = dout.sum(axis=(0, 2, 3))
    dscale = np.einsum("bchw,bchw->c", dout, xhat)
    dx = None
    if need_dx:
        g = (scale * inv).reshape(shape)
        if batch_stats:
            n = dout.size // dout.shape[1]
            dx = g * (dout - (dshift / n).reshape(shape) - xhat * (dscale / n).reshape(shape))
        else:
            dx = dout * g
    return dx, dscale, dshift


# --------------------------------------------------------------------------
# activations (overflow-safe for |x| well beyond 100)
# --------------------------------------------------------------------------

def sigmoid(x):
    e = np.negative(x)
    with np.errstate(over="ignore", under="ignore"):
        np.exp(e, out=e)  # inf for very negative x, giving exactly 0
    e += 1
    np.reciprocal(e, out=e)
    return e, e


def sigmoid_backward(dout, cache):
    s = cache
    return dout * s * (1 - s)


def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def silu(x):
    s, _ = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return dout * s * (1 + x * (1 - s))


def softplus(x):
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return out.astype(x.dtype, copy=False), x


def softplus_backward(dout, cache):
    s, _ = sigmoid(cache)
    return dout * s


def inverse_softplus(y):
    """Pre-activation that softplus maps onto ``y`` (> 0)."""
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# --------------------------------------------------------------------------
# squeeze-and-excitation
# --------------------------------------------------------------------------

def _box_sum(x, r):
    # separable: rows then columns, fixed order, support exactly (2r+1)²
    H, W = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(r, r), (0, 0)])
    rows = xp[..., 0:H, :].copy()
    for i in range(1, 2 * r + 1):
        rows += xp[..., i:i + H, :]
    rp = np.pad(rows, pad + [(0, 0), (r, r)])
    out = rp[..., :, 0:W].copy()
    for j in range(1, 2 * r + 1):
        out += rp[..., :, j:j + W]
    return out


def box_mean(x, window):
    """Same-size moving average over a ``window``×``window`` box.

    Border cells average only the in-bounds neighbours. The sum is built
    from shifted slices in a fixed order, so a perturbation never leaks
    further than ``window // 2`` cells (bit-exact locality).
    """
    r = window // 2
    count = _box_sum(np.ones(x.shape[-2:], dtype=x.dtype), r)
    return _box_sum(x, r) / count, count


def box_mean_backward(dout, count, window):
    # the box is symmetric, so the adjoint of the sum is the sum itself
    return _box_sum(dout / count, window // 2)


def se_gate(x, reduce_weight, reduce_bias, expand_weight, expand_bias, window=None):
    """Squeeze-and-excitation channel gating.

    ``gate = sigmoid(expand(silu(reduce(pool(x)))))`` and ``out = x * gate``.
    ``window=None`` pools globally (one gate per channel and sample); an odd
    integer pools over a local box so every pixel gets its own gate.

    ``reduce_weight`` is (R, C, 1, 1) and ``expand_weight`` is (C, R, 1, 1).
    """
    _check4("se_gate", x)
    C = x.shape[1]
    if reduce_weight.shape[1] != C:
        raise ShapeError("se_gate", "channel", C, reduce_weight.shape[1])
    if window is None:
        pooled = x.mean(axis=(2, 3), keepdims=True)
        count = None
    else:
        pooled, count = box_mean(x, window)
    z, c_red = conv2d(pooled, reduce_weight, reduce_bias)
    a, c_act = silu(z)
    e, c_exp = conv2d(a, expand_weight, expand_bias)
    g, c_sig = sigmoid(e)
    out = x * g
    return out, (x, g, count, window, c_red, c_act, c_exp, c_sig)


def se_gate_backward(dout, cache):
    """Return ``(dx, d_reduce_w, d_reduce_b, d_expand_w, d_expand_b)``."""
    x, g, count, window, c_red, c_act, c_exp, c_sig = cache
    dg = dout * x
    if window is None:
        dg = dg.sum(axis=(2, 3), keepdims=True)
    de = sigmoid_backward(dg, c_sig)
    da, dwe, dbe = conv2d_backward(de, c_exp)
    dz = silu_backward(da, c_act)
    dpooled, dwr, dbr = conv2d_backward(dz, c_red)
    if window is None:
        H, W = x.shape[2:]
        dx_pool = np.broadcast_to(dpooled / (H * W), x.shape)
    else:
        dx_pool = box_mean_backward(dpooled, count, window)
    dx = dout * g + dx_pool
    return dx, dwr, dbr, dwe, dbe


# --------------------------------------------------------------------------
# dropout and cropping
# --------------------------------------------------------------------------

def mc_dropout(x, rate, rng=None, draw=0, slot=0, active=True):
    """Inverted dropout whose mask is a pure function of ``(rng, draw, slot)``.

    Inactive (or ``rate == 0``) returns ``x`` itself.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mc_dropout: rate must lie in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("mc_dropout: an RngStream is required when active")
    u = rng.generator(draw, slot).random(x.shape, dtype=np.float32)
    mask = (u >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def mc_dropout_backward(dout, cache):
    mask = cache
    return dout if mask is None else dout * mask


def crop_border(x, margin):
    _check4("crop_border", x)
    H, W = x.shape[2:]
    if margin < 0 or 2 * margin >= min(H, W):
        raise ShapeError("crop_border", "spatial", (H, W), f"more than {2 * margin}")
    if margin == 0:
        return x, (x.shape, 0)
    return x[:, :, margin:H - margin, margin:W - margin], (x.shape, margin)


def crop_border_backward(dout, cache):
    shape, m = cache
    if m == 0:
        return dout
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, m:shape[2] - m, m:shape[3] - m] = dout
    return dx


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter identity."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    ``params`` is a mapping name -> Parameter; moments are stored in
    ``state`` under the same names. Non-trainable parameters are skipped
    entirely (neither value nor moments move).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g)
        denom = np.sqrt(v / c2) + eps
        p.value -= (lr / c1) * m / denom
    return state
