"""The fixed-resolution fusion network: input norm, stem, 2 fused + 6 MBConv
blocks, 1×1 regression head with softplus, border crop.

The forward pass records a tape of per-layer backward closures; ``backward``
replays it in reverse and accumulates into each ``Parameter.grad``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import core
from .core import Parameter, RngStream, ShapeError

MODES = ("train", "eval", "mc")
HEAD = "head.conv"


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # "fused" | "mbconv"
    width: int
    expansion: int = 4
    kernel: int = 3
    se_ratio: float = 0.0


def _default_blocks():
    return (
        (BlockSpec("fused", 24, 4),) * 2
        + (BlockSpec("mbconv", 40, 4, se_ratio=0.25),) * 6
    )


@dataclass(frozen=True)
class ArchitectureSpec:
    """Everything needed to rebuild the network shape-for-shape.

    ``se_window`` selects the squeeze pooling: ``None`` is the classic
    global average, an odd integer a local box average (keeps the network's
    receptive field finite).
    """

    in_channels: int = 10
    stem_width: int = 24
    blocks: tuple = field(default_factory=_default_blocks)
    dropout: float = 0.2
    head_channels: int = 2
    border: int = 4
    input_size: int = 40
    norm_mean: tuple = (0.0,) * 10
    norm_std: tuple = (1.0,) * 10
    activation: str = "silu"
    se_window: int | None = 5
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    head_mean_init: float = 9.0
    head_var_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(
            self, "blocks",
            tuple(b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks),
        )
        object.__setattr__(self, "norm_mean", tuple(float(v) for v in self.norm_mean))
        object.__setattr__(self, "norm_std", tuple(float(v) for v in self.norm_std))

    @property
    def output_size(self) -> int:
        return self.input_size - 2 * self.border

    @property
    def last_width(self) -> int:
        return self.blocks[-1].width if self.blocks else self.stem_width

    def validate(self):
        kinds = [b.kind for b in self.blocks]
        if kinds != ["fused"] * 2 + ["mbconv"] * 6:
            raise ValueError(
                "invalid block layout: expected 2 fused blocks followed by 6 mbconv "
                f"blocks, got {kinds}")
        if len(self.norm_mean) != self.in_channels or len(self.norm_std) != self.in_channels:
            raise ValueError("normalization constants must have one entry per input channel")
        if any(s <= 0 for s in self.norm_std):
            raise ValueError("normalization std must be positive")
        if self.activation not in ("silu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.se_window is not None and self.se_window % 2 == 0:
            raise ValueError("se_window must be odd")
        for b in self.blocks:
            if b.kernel % 2 == 0 or b.width < 1 or b.expansion < 1:
                raise ValueError(f"invalid block {b}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if 2 * self.border >= self.input_size:
            raise ValueError("border too large for the input size")
        return self

    def receptive_radius(self) -> float:
        """Chebyshev radius beyond which an input pixel cannot reach an output
        pixel (``inf`` with global squeeze pooling)."""
        r = 1  # stem is 3×3
        for b in self.blocks:
            r += b.kernel // 2
            if b.kind == "mbconv" and b.se_ratio > 0:
                if self.se_window is None:
                    return math.inf
                r += self.se_window // 2
        return r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["norm_mean"] = list(self.norm_mean)
        d["norm_std"] = list(self.norm_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_norm(self, mean, std) -> "ArchitectureSpec":
        return replace(self, norm_mean=tuple(mean), norm_std=tuple(std))


def default_spec(**overrides) -> ArchitectureSpec:
    return replace(ArchitectureSpec(), **overrides).validate()


def desk_spec(**overrides) -> ArchitectureSpec:
    """Half-width variant sized for single-core training runs."""
    blocks = (
        (BlockSpec("fused", 12, 2),) * 2
        + (BlockSpec("mbconv", 20, 2, se_ratio=0.25),) * 6
    )
    return replace(ArchitectureSpec(stem_width=12, blocks=blocks), **overrides).validate()


def tiny_spec(**overrides) -> ArchitectureSpec:
    """Widths ≤ 8 and a 16×16 input; for end-to-end gradient checks."""
    blocks = (
        (BlockSpec("fused", 4, 2),) * 2
        + (BlockSpec("mbconv", 6, 2, se_ratio=0.5),) * 6
    )
    base = ArchitectureSpec(stem_width=4, blocks=blocks, input_size=16, border=2,
                            se_window=3)
    return replace(base, **overrides).validate()


# --------------------------------------------------------------------------
# model state
# --------------------------------------------------------------------------

class ModelState:
    """Named parameters, batch-norm buffers and the spec they were built from."""

    def __init__(self, spec: ArchitectureSpec, params: dict, buffers: dict):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.optimizer = None  # AdamState left by the last training run
        self._saved_trainable = None

    def parameters(self, trainable_only=False):
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    def zero_grads(self):
        core.zero_grads(self.params.values())

    def copy(self) -> "ModelState":
        params = {k: Parameter(p.value.copy(), trainable=p.trainable)
                  for k, p in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return ModelState(self.spec, params, buffers)

    def is_frozen(self, prefix: str) -> bool:
        names = [k for k in self.params if k.startswith(prefix + ".")]
        return bool(names) and not any(self.params[k].trainable for k in names)


def _layer_names(spec):
    """(name, kind, in, out, kernel) for every conv-like layer in order."""
    act_in = spec.stem_width
    layers = [("stem", "conv", spec.in_channels, spec.stem_width, 3)]
    for i, b in enumerate(spec.blocks):
        pre = f"blocks.{i}"
        mid = act_in * b.expansion
        if b.kind == "fused":
            layers.append((f"{pre}.expand", "conv", act_in, mid, b.kernel))
        else:
            layers.append((f"{pre}.expand", "conv", act_in, mid, 1))
            layers.append((f"{pre}.dw", "dwconv", mid, mid, b.kernel))
            if b.se_ratio > 0:
                layers.append((f"{pre}.se", "se", mid, max(1, int(act_in * b.se_ratio)), 1))
        layers.append((f"{pre}.project", "conv", mid, b.width, 1))
        act_in = b.width
    return layers


def build_model(spec: ArchitectureSpec, rng: RngStream) -> ModelState:
    """He-initialised model; batch-norm scale 1 / shift 0; the head bias is
    set so the initial softplus outputs sit near ``head_mean_init`` and
    ``head_var_init``."""
    spec.validate()
    gen = rng.generator(draw=0, slot=0)
    f32 = np.float32
    params, buffers = {}, {}

    def he(shape, fan_in):
        return (gen.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(f32)

    def bn(name, c):
        params[f"{name}.bn.scale"] = Parameter(np.ones(c, f32))
        params[f"{name}.bn.shift"] = Parameter(np.zeros(c, f32))
        buffers[f"{name}.bn.running_mean"] = np.zeros(c, f32)
        buffers[f"{name}.bn.running_var"] = np.ones(c, f32)

    for name, kind, cin, cout, k in _layer_names(spec):
        if kind == "conv":
            params[f"{name}.conv.weight"] = Parameter(he((cout, cin, k, k), cin * k * k))
            bn(name, cout)
        elif kind == "dwconv":
            params[f"{name}.conv.weight"] = Parameter(he((cin, k, k), k * k))
            bn(name, cin)
        else:  # squeeze-and-excitation: cout is the reduced width
            params[f"{name}.reduce.weight"] = Parameter(he((cout, cin, 1, 1), cin))
            params[f"{name}.reduce.bias"] = Parameter(np.zeros(cout, f32))
            params[f"{name}.expand.weight"] = Parameter(he((cin, cout, 1, 1), cout))
            params[f"{name}.expand.bias"] = Parameter(np.zeros(cin, f32))

    w = spec.last_width
    # small head weights keep the initial outputs close to the bias targets
    params[f"{HEAD}.weight"] = Parameter(0.1 * he((spec.head_channels, w, 1, 1), w))
    bias = np.zeros(spec.head_channels, f32)
    bias[0] = inverse_softplus_f32(spec.head_mean_init)
    if spec.head_channels > 1:
        bias[1:] = inverse_softplus_f32(spec.head_var_init)
    params[f"{HEAD}.bias"] = Parameter(bias)
    return ModelState(spec, params, buffers)


def inverse_softplus_f32(y):
    return np.float32(core.inverse_softplus(y))


def count_parameters(model, trainable_only=False) -> int:
    """Exact element count over a ModelState or a name -> Parameter mapping."""
    params = model.params if isinstance(model, ModelState) else model
    return sum(p.size for p in params.values() if p.trainable or not trainable_only)


def freeze_feature_extractor(model: ModelState) -> ModelState:
    """Leave only the head conv trainable. Idempotent; ``unfreeze`` undoes it."""
    if model._saved_trainable is None:
        model._saved_trainable = {k: p.trainable for k, p in model.params.items()}
    for name, p in model.params.items():
        p.trainable = name.startswith(HEAD + ".")
    return model


def unfreeze(model: ModelState) -> ModelState:
    if model._saved_trainable is not None:
        for name, p in model.params.items():
            p.trainable = model._saved_trainable[name]
        model._saved_trainable = None
    return model


def head_parameter_count(spec: ArchitectureSpec) -> int:
    return spec.last_width * spec.head_channels + spec.head_channels


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

class Tape:
    """Reverse-mode record: one ``(backward_fn, param_names)`` per layer group."""

    def __init__(self):
        self.entries = []

    def push(self, fn, names):
        self.entries.append((fn, tuple(names)))


class _Forward:
    def __init__(self, model, mode, rng, draw, tape):
        self.m = model
        self.spec = model.spec
        self.mode = mode
        self.rng = rng
        self.draw = draw
        self.tape = tape
        act = self.spec.activation
        self.act, self.act_bw = (
            (core.silu, core.silu_backward) if act == "silu" else (core.relu, core.relu_backward))

    def P(self, name):
        return self.m.params[name].value

    def bn_mode(self, prefix):
        if self.mode == "train" and not self.m.is_frozen(prefix):
            return "train"
        return "eval"

    def grad(self, name, g):
        p = self.m.params[name]
        if p.trainable and g is not None:
            p.grad += g

    # layer primitives; each returns (out, backward(dout, need_dx) -> dx, names)

    def conv_bn_act(self, name, x, act=True, bn_mode="eval"):
        w = self.P(f"{name}.conv.weight")
        if w.ndim == 3:
            y, c_conv = core.depthwise_conv2d(x, w)
        else:
            y, c_conv = core.conv2d(x, w)
        buf = self.m.buffers
        y, c_bn = core.batchnorm2d(
            y, self.P(f"{name}.bn.scale"), self.P(f"{name}.bn.shift"),
            buf[f"{name}.bn.running_mean"], buf[f"{name}.bn.running_var"],
            mode=bn_mode, momentum=self.spec.bn_momentum, eps=self.spec.bn_eps)
        c_act = None
        if act:
            y, c_act = self.act(y)
        names = [f"{name}.conv.weight", f"{name}.bn.scale", f"{name}.bn.shift"]

        def backward(d, need_dx=True):
            if c_act is not None:
                d = self.act_bw(d, c_act)
            d, dscale, dshift = core.batchnorm2d_backward(d, c_bn)
            self.grad(names[1], dscale)
            self.grad(names[2], dshift)
            if w.ndim == 3:
                dx, dw = core.depthwise_conv2d_backward(d, c_conv, need_dx)
            else:
                dx, dw, _ = core.conv2d_backward(d, c_conv, need_dx)
            self.grad(names[0], dw)
            return dx

        return y, backward, names

    def se(self, name, x):
        names = [f"{name}.reduce.weight", f"{name}.reduce.bias",
                 f"{name}.expand.weight", f"{name}.expand.bias"]
        y, cache = core.se_gate(x, *(self.P(n) for n in names), window=self.spec.se_window)

        def backward(d, need_dx=True):
            dx, *grads = core.se_gate_backward(d, cache)
            for n, g in zip(names, grads):
                self.grad(n, g)
            return dx

        return y, backward, names

    def block(self, i, b, x):
        pre = f"blocks.{i}"
        mode = self.bn_mode(pre)
        steps = []
        h = x
        if b.kind == "fused":
            h, bw, n = self.conv_bn_act(f"{pre}.expand", h, True, mode)
            steps.append(bw)
        else:
            h, bw, n = self.conv_bn_act(f"{pre}.expand", h, True, mode)
            steps.append(bw)
            h, bw, n = self.conv_bn_act(f"{pre}.dw", h, True, mode)
            steps.append(bw)
            if b.se_ratio > 0:
                h, bw, n = self.se(f"{pre}.se", h)
                steps.append(bw)
        h, bw, n = self.conv_bn_act(f"{pre}.project", h, False, mode)
        steps.append(bw)
        skip = h.shape == x.shape
        if skip:
            h = h + x

        def backward(d, need_dx=True):
            g = d
            for k, bw in enumerate(reversed(steps)):
                last = k == len(steps) - 1
                g = bw(g, need_dx or not last)
            if need_dx and skip:
                g = g + d
            return g if need_dx else None

        names = [k for k in self.m.params if k.startswith(pre + ".")]
        return h, backward, names

    def dropout(self, x, slot):
        active = self.mode in ("train", "mc")
        y, mask = core.mc_dropout(x, self.spec.dropout, self.rng, self.draw, slot,
                                  active=active)
        return y, (lambda d, need_dx=True: core.mc_dropout_backward(d, mask)), []

    def run(self, x):
        spec = self.spec
        tape = self.tape

        def rec(out):
            y, bw, names = out
            if tape is not None:
                tape.push(bw, names)
            return y

        mean = np.asarray(spec.norm_mean, x.dtype).reshape(1, -1, 1, 1)
        inv_std = (1.0 / np.asarray(spec.norm_std, np.float64)).astype(x.dtype).reshape(1, -1, 1, 1)
        h = (x - mean) * inv_std
        if tape is not None:
            tape.push(lambda d, need_dx=True: d * inv_std, [])
        h = rec(self.conv_bn_act("stem", h, True, self.bn_mode("stem")))
        n_fused = sum(b.kind == "fused" for b in spec.blocks)
        for i, b in enumerate(spec.blocks):
            h = rec(self.block(i, b, h))
            if i == n_fused - 1:
                h = rec(self.dropout(h, slot=0))
        h = rec(self.dropout(h, slot=1))
        w, bias = self.P(f"{HEAD}.weight"), self.P(f"{HEAD}.bias")
        z, c_head = core.conv2d(h, w, bias)

        def head_bw(d, need_dx=True):
            dx, dw, db = core.conv2d_backward(d, c_head, need_dx)
            self.grad(f"{HEAD}.weight", dw)
            self.grad(f"{HEAD}.bias", db)
            return dx

        if tape is not None:
            tape.push(head_bw, [f"{HEAD}.weight", f"{HEAD}.bias"])
        y, c_sp = core.softplus(z)
        if tape is not None:
            tape.push(lambda d, need_dx=True: core.softplus_backward(d, c_sp), [])
        y, c_crop = core.crop_border(y, spec.border)
        if tape is not None:
            tape.push(lambda d, need_dx=True: core.crop_border_backward(d, c_crop), [])
        return y


def forward(model: ModelState, batch, mode="eval", rng: RngStream | None = None,
            draw: int = 0, tape: Tape | None = None):
    """Map a (B, C, S, S) batch to (B, 2, S-2·border, S-2·border).

    ``mode="train"``: batch-statistics norm (frozen blocks use running
    statistics), dropout active. ``"eval"``: running statistics, dropout off.
    ``"mc"``: running statistics, dropout active; the masks are a function of
    ``(rng, draw)``. Pass a ``Tape`` to record for ``backward``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    spec = model.spec
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ShapeError("forward", "rank", batch.ndim, 4)
    if batch.shape[1] != spec.in_channels:
        raise ShapeError("forward", "channel", batch.shape[1], spec.in_channels)
    if batch.shape[2] != spec.input_size:
        raise ShapeError("forward", "height", batch.shape[2], spec.input_size)
    if batch.shape[3] != spec.input_size:
        raise ShapeError("forward", "width", batch.shape[3], spec.input_size)
    if mode != "eval" and spec.dropout > 0 and rng is None:
        raise ValueError(f"mode {mode!r} needs an RngStream for dropout")
    if not np.issubdtype(batch.dtype, np.floating):
        batch = batch.astype(np.float32)
    fw = _Forward(model, mode, rng, draw, tape)
    try:
        return fw.run(batch)
    finally:
        fw.tape = None  # the recorded closures hold ``fw``; avoid a tape cycle


def backward(model: ModelState, tape: Tape, dout) -> None:
    """Accumulate parameter gradients for ``dout`` = dLoss/dOutput.

    Propagation stops at the earliest layer group that owns a trainable
    parameter, so a frozen feature extractor costs no backward work.
    """
    entries = tape.entries
    first = None
    for i, (_, names) in enumerate(entries):
        if any(model.params[n].trainable for n in names):
            first = i
            break
    if first is None:
        return
    d = dout
    for i in range(len(entries) - 1, first - 1, -1):
        fn, _ = entries[i]
        d = fn(d, i > first)


def input_gradient(model: ModelState, tape: Tape, dout):
    """dLoss/dInput through the whole tape (parameters untouched)."""
    saved = {k: p.trainable for k, p in model.params.items()}
    try:
        for p in model.params.values():
            p.trainable = False
        d = dout
        for fn, _ in reversed(tape.entries):
            d = fn(d, True)
        return d
    finally:
        for k, p in model.params.items():
            p.trainable = saved[k]
