"""Optimisation loop, step learning-rate schedule, checkpoints and transfer.

Checkpoint layout (little-endian)::

    b"WSCM"  u32 version  u64 header_len  header (UTF-8 JSON)  tensor data

The JSON header holds the architecture spec, its digest, the epoch counter,
the training-config echo, the Adam step and an index of tensors
``[name, kind, shape, trainable]``; tensor data is the concatenation of the
indexed tensors as f32 in index order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import network
from .core import AdamState, Parameter, RngStream, adam_step
from .data import ChipSet
from .formats import CorruptFileError, atomic_write
from .metrics import masked_loss
from .network import ArchitectureSpec, ModelState

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WSCM"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")
TRANSFER_MODES = ("none", "full", "frozen_head")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


class SpecMismatchError(ValueError):
    def __init__(self, field_name, expected, found):
        self.field = field_name
        super().__init__(
            f"spec mismatch: field {field_name!r} is {found!r} in the checkpoint, "
            f"expected {expected!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 96
    lr: float = 1e-3
    milestones: tuple = (0.1, 0.2, 0.5)
    factor: float = 0.1
    dropout: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    transfer: str = "none"
    clip_norm: float | None = None
    steps_per_epoch: int | None = None  # cap for desk-scale runs; None = full pass

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(float(m) for m in self.milestones))
        ms = self.milestones
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing fractions in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.transfer not in TRANSFER_MODES:
            raise ValueError(f"transfer must be one of {TRANSFER_MODES}")

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


def milestone_epochs(config: TrainConfig):
    # floor(fraction·epochs), never before epoch 1
    return [max(1, math.floor(m * config.epochs)) for m in config.milestones]


def lr_at(config: TrainConfig, epoch: int) -> float:
    drops = sum(epoch >= e for e in milestone_epochs(config))
    return config.lr * config.factor ** drops


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float
    skipped_batches: int
    steps: int
    seconds: float


@dataclass
class History:
    epochs: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    backward_seconds: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr", "skipped_batches"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.lr), r.skipped_batches])
        return buf.getvalue()


def core_targets(chips: ChipSet, spec: ArchitectureSpec):
    b = spec.border
    t = chips.targets
    return t[:, b:t.shape[1] - b, b:t.shape[2] - b]


def _check_split(chips: ChipSet):
    if np.any(chips.split == "test"):
        raise ValueError("training received test-split chips")


def _clip(params, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(p.grad))) for p in params if p.trainable))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= s


def train(model: ModelState, chips: ChipSet, config: TrainConfig,
          optimizer: AdamState | None = None, start_epoch: int = 0,
          callback=None, stop_epoch: int | None = None):
    """Optimise ``model`` in place on the training chips.

    Returns ``(model, history)``. Every step draws its dropout masks from
    ``RngStream(config.seed, 1)`` at the global step index and every epoch
    shuffles chip order with ``RngStream(config.seed, 2)``, so a run is
    reproducible bit for bit. ``start_epoch``/``stop_epoch`` run a slice of
    the schedule (resuming passes the saved optimizer state).
    """
    if len(chips) == 0:
        raise ValueError("train: empty chip set")
    _check_split(chips)
    if config.transfer == "frozen_head":
        network.freeze_feature_extractor(model)
    elif config.transfer == "full":
        network.unfreeze(model)
        for p in model.params.values():
            p.trainable = True
    spec = model.spec
    if abs(spec.dropout - config.dropout) > 1e-12:
        model.spec = spec = replace(spec, dropout=config.dropout)
    optimizer = optimizer or AdamState()
    drop_rng = RngStream(config.seed, 1)
    shuffle_rng = RngStream(config.seed, 2)
    inputs = chips.inputs
    targets = core_targets(chips, spec)
    n = len(chips)
    history = History()
    step = optimizer.step
    params = list(model.params.values())
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    for epoch in range(start_epoch, end):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        order = shuffle_rng.generator(draw=epoch).permutation(n)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        if config.steps_per_epoch is not None:
            batches = batches[:config.steps_per_epoch]
        losses = []
        skipped = 0
        for bi, idx in enumerate(batches):
            idx = np.sort(idx)
            tgt = targets[idx]
            if not np.any(np.isfinite(tgt) & (np.nan_to_num(tgt) > 0)):
                skipped += 1
                continue
            s0 = time.perf_counter()
            model.zero_grads()
            tape = network.Tape()
            out = network.forward(model, inputs[idx], "train", drop_rng, draw=step, tape=tape)
            loss, grad, _ = masked_loss(out, tgt)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi, loss)
            b0 = time.perf_counter()
            network.backward(model, tape, grad)
            history.backward_seconds.append(time.perf_counter() - b0)
            if config.clip_norm is not None:
                _clip(params, config.clip_norm)
            adam_step(model.params, optimizer, lr, config.beta1, config.beta2, config.eps)
            history.step_seconds.append(time.perf_counter() - s0)
            del tape, out, grad  # release layer caches before the next batch
            step += 1
            losses.append(loss)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), lr,
                          skipped, len(losses), time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d loss %.4f lr %.1e skipped %d (%.1fs)", epoch, rec.mean_loss,
                 lr, skipped, rec.seconds)
        if callback is not None:
            callback(model, rec)
    model.optimizer = optimizer
    return model, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ModelState
    epoch: int = 0
    config: dict | None = None
    optimizer: AdamState | None = None


def _tensor_index(ckpt: Checkpoint):
    m = ckpt.model
    items = []
    for name, p in m.params.items():
        items.append((name, "param", p.value, p.trainable))
    for name, b in m.buffers.items():
        items.append((name, "buffer", b, False))
    opt = ckpt.optimizer
    if opt is not None:
        for name in m.params:
            if name in opt.m:
                items.append((name, "adam_m", opt.m[name], False))
                items.append((name, "adam_v", opt.v[name], False))
    return items


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    items = _tensor_index(ckpt)
    header = {
        "spec": ckpt.model.spec.to_dict(),
        "spec_digest": ckpt.model.spec.digest(),
        "epoch": int(ckpt.epoch),
        "config": ckpt.config,
        "adam_step": None if ckpt.optimizer is None else int(ckpt.optimizer.step),
        "tensors": [[n, k, list(a.shape), bool(t)] for n, k, a, t in items],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a, _ in items)
    return _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb + body


def save_checkpoint(path, ckpt: Checkpoint | ModelState):
    if isinstance(ckpt, ModelState):
        ckpt = Checkpoint(ckpt)
    with atomic_write(path) as fh:
        fh.write(checkpoint_bytes(ckpt))


def checkpoint_digest(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _first_difference(expected: dict, found: dict):
    for key in sorted(set(expected) | set(found)):
        if expected.get(key) != found.get(key):
            return key, expected.get(key), found.get(key)
    return None


def _expected_shapes(spec: ArchitectureSpec):
    shapes = {}
    for name, kind, cin, cout, k in network._layer_names(spec):
        if kind == "conv":
            shapes[f"{name}.conv.weight"] = (cout, cin, k, k)
            c = cout
        elif kind == "dwconv":
            shapes[f"{name}.conv.weight"] = (cin, k, k)
            c = cin
        else:
            shapes[f"{name}.reduce.weight"] = (cout, cin, 1, 1)
            shapes[f"{name}.reduce.bias"] = (cout,)
            shapes[f"{name}.expand.weight"] = (cin, cout, 1, 1)
            shapes[f"{name}.expand.bias"] = (cin,)
            continue
        for suffix in ("bn.scale", "bn.shift", "bn.running_mean", "bn.running_var"):
            shapes[f"{name}.{suffix}"] = (c,)
    shapes[f"{network.HEAD}.weight"] = (spec.head_channels, spec.last_width, 1, 1)
    shapes[f"{network.HEAD}.bias"] = (spec.head_channels,)
    return shapes


def load_checkpoint(path, expected_spec: ArchitectureSpec | None = None) -> Checkpoint:
    """Read a checkpoint; structural problems raise ``CorruptFileError`` and a
    spec different from ``expected_spec`` raises ``SpecMismatchError``."""
    raw = Path(path).read_bytes()
    return checkpoint_from_bytes(raw, expected_spec, path)


def checkpoint_from_bytes(raw: bytes, expected_spec=None, path="<bytes>") -> Checkpoint:
    if len(raw) < _CKPT_HEAD.size:
        raise CorruptFileError(path, "truncated header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CorruptFileError(path, f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CorruptFileError(path, f"unsupported version {version}")
    start = _CKPT_HEAD.size
    if len(raw) < start + hlen:
        raise CorruptFileError(path, "truncated JSON header")
    try:
        header = json.loads(raw[start:start + hlen].decode())
        spec = ArchitectureSpec.from_dict(header["spec"])
        index = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(path, f"unreadable header ({exc})") from exc
    if spec.digest() != header.get("spec_digest"):
        raise CorruptFileError(path, "spec digest does not match the stored spec")
    if expected_spec is not None:
        diff = _first_difference(expected_spec.to_dict(), spec.to_dict())
        if diff is not None:
            raise SpecMismatchError(*diff)
    need = sum(4 * int(np.prod(shape, dtype=np.int64)) for _, _, shape, _ in index)
    body = raw[start + hlen:]
    if len(body) != need:
        raise CorruptFileError(path, f"tensor data is {len(body)} bytes, expected {need}")
    shapes = _expected_shapes(spec)
    params, buffers = {}, {}
    opt = AdamState(step=header["adam_step"]) if header.get("adam_step") is not None else None
    off = 0
    for name, kind, shape, trainable in index:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        arr = arr.astype(np.float32)
        off += 4 * count
        if kind in ("param", "buffer") and shapes.get(name) != tuple(shape):
            raise CorruptFileError(
                path, f"tensor {name} has shape {tuple(shape)}, spec implies {shapes.get(name)}")
        if kind == "param":
            params[name] = Parameter(arr, trainable=bool(trainable))
        elif kind == "buffer":
            buffers[name] = arr
        elif kind == "adam_m" and opt is not None:
            opt.m[name] = arr
        elif kind == "adam_v" and opt is not None:
            opt.v[name] = arr
        else:
            raise CorruptFileError(path, f"unknown tensor kind {kind!r}")
    missing = set(shapes) - set(params) - set(buffers)
    if missing:
        raise CorruptFileError(path, f"missing tensors {sorted(missing)[:3]}")
    # restore the declared ordering used at build time
    params = {k: params[k] for k in shapes if k in params}
    buffers = {k: buffers[k] for k in shapes if k in buffers}
    model = ModelState(spec, params, buffers)
    return Checkpoint(model, header["epoch"], header.get("config"), opt)


# --------------------------------------------------------------------------
# transfer learning
# --------------------------------------------------------------------------

@dataclass
class TransferResult:
    checkpoint: Checkpoint
    history: History
    grad_param_count: int
    full_param_count: int

    @property
    def mean_step_seconds(self):
        return float(np.mean(self.history.step_seconds)) if self.history.step_seconds else 0.0

    @property
    def mean_backward_seconds(self):
        s = self.history.backward_seconds
        return float(np.mean(s)) if s else 0.0


def transfer_train(base, chips: ChipSet, mode: str, config: TrainConfig,
                   expected_spec: ArchitectureSpec | None = None) -> TransferResult:
    """Adapt a trained model to new targets.

    ``mode="full"`` re-optimises every parameter; ``"frozen_head"`` trains the
    1×1 head only. ``base`` is a Checkpoint, a ModelState or a checkpoint path.
    """
    if mode not in ("full", "frozen_head"):
        raise ValueError("mode must be 'full' or 'frozen_head'")
    if isinstance(base, (str, Path)):
        base = load_checkpoint(base, expected_spec)
    model = base.model if isinstance(base, Checkpoint) else base
    if expected_spec is not None:
        diff = _first_difference(expected_spec.to_dict(), model.spec.to_dict())
        if diff is not None:
            raise SpecMismatchError(*diff)
    model = model.copy()
    config = replace(config, transfer=mode)
    model, history = train(model, chips, config)
    full = network.count_parameters(model)
    trainable = network.count_parameters(model, trainable_only=True)
    ckpt = Checkpoint(model, config.epochs, config.to_dict(), model.optimizer)
    return TransferResult(ckpt, history, trainable, full)
