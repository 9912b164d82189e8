"""Command-line driver for the whole pipeline.

Every command validates its inputs first, writes outputs atomically, drops a
``<output>.manifest.json`` next to its main output and prints one JSON
summary line on stdout. Errors go to stderr as a single line
``error <code> <message>``; exit status is 0 on success, 1 for runtime
failures and 2 for usage or input errors.

Configuration files are JSON objects whose keys are the long flag names
(dashes or underscores); explicit flags take precedence over file values.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import attribution, data, evaluation, inference, network, synth, training
from .core import RngStream
from .formats import CorruptFileError, atomic_write, read_raster, write_raster

log = logging.getLogger("wscifusion")

SPECS = {"default": network.default_spec, "desk": network.desk_spec, "tiny": network.tiny_spec}


class UsageError(Exception):
    """Bad arguments or unusable input files (exit code 2)."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _need_file(path, what="input"):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"missing {what} file: {p}")
    return p


def _need_dir(path, what="input"):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"missing {what} directory: {p}")
    return p


def _write_manifest(out, command, config, inputs, outputs, seed, t0):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    path = Path(str(out) + ".manifest.json")
    evaluation.write_json(path, manifest)
    return path


def _layers_path(root, quarter):
    return Path(root) / f"layers_q{quarter}.f32"


def _target_path(root, quarter):
    return Path(root) / f"target_q{quarter}.f32"


def _quarters(text):
    try:
        return [int(q) for q in str(text).split(",") if q != ""]
    except ValueError as exc:
        raise UsageError(f"bad quarter list {text!r}") from exc


def _pixel(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"pixel must be 'row,col', got {text!r}") from exc
    return r, c


def _load_model(path, expected_spec=None):
    p = _need_file(path, "checkpoint")
    try:
        return training.load_checkpoint(p, expected_spec)
    except CorruptFileError as exc:
        raise UsageError(str(exc)) from exc


def _load_chips(path):
    p = _need_file(path, "chip")
    try:
        return data.ChipSet.load(p), p
    except CorruptFileError as exc:
        raise UsageError(str(exc)) from exc


def _split_labels(path):
    """Split labels travel next to a chip file as ``<chips>.split``."""
    side = Path(str(path) + ".split")
    if not side.is_file():
        return None
    return np.array(side.read_text().split(), dtype="<U5")


def _read_world(root):
    p = _need_file(Path(root) / "world.json", "world description")
    cfg = json.loads(p.read_text())
    cfg["spacings"] = tuple(cfg["spacings"])
    cfg["amplitudes"] = tuple(cfg["amplitudes"])
    cfg["informative"] = tuple(cfg["informative"])
    return synth.SyntheticWorld(**cfg), p


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg, t0):
    quarters = _quarters(args.quarters)
    world = synth.SyntheticWorld(seed=args.seed, size=args.extent, density=args.density,
                                 kind=args.kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = world.grid
    outputs = []
    truth = world.truth()
    write_raster(out / "truth.f32", truth[None], grid, ["wsci"])
    outputs.append(out / "truth.f32")
    write_raster(out / "dem.f32", world.dem()[None].astype(np.float32), grid, ["dem"])
    outputs.append(out / "dem.f32")
    rows = []
    for q in quarters:
        write_raster(_layers_path(out, q), world.layers(q), grid, list(data.SAR_LAYERS),
                     quarter=q)
        outputs.append(_layers_path(out, q))
        fp = world.footprints(q)
        rows.extend(fp.tolist())
    fp_path = out / "footprints.csv"
    with atomic_write(fp_path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(data.FOOTPRINT_DTYPE.names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else int(v) for v in r])
    outputs.append(fp_path)
    desc = {f.name: getattr(world, f.name) for f in fields(world)}
    evaluation.write_json(out / "world.json", desc)
    outputs.append(out / "world.json")
    _write_manifest(out / "world.json", "synth", cfg, [], outputs, args.seed, t0)
    return {"out": str(out), "quarters": quarters, "footprints": len(rows)}


def _read_footprints(path):
    p = _need_file(path, "footprint")
    try:
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            recs = [(float(r["lon"]), float(r["lat"]), int(r["quarter"]), float(r["wsci"]),
                     r["valid"] not in ("0", "False", "false")) for r in reader]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unreadable footprint table {p}: {exc}") from exc
    return np.array(recs, dtype=data.FOOTPRINT_DTYPE), p


def cmd_grid(args, cfg, t0):
    table, fp = _read_footprints(args.footprints)
    like = _need_file(args.like, "reference raster")
    _need_file(str(like) + ".json", "raster sidecar")
    _, meta = read_raster(like)
    grid = data.GridSpec.from_meta(meta)
    target = data.grid_footprints(table, grid, args.quarter)
    out = Path(args.out)
    write_raster(out, target[None], grid, ["wsci"], quarter=args.quarter)
    _write_manifest(out, "grid", cfg, [fp, like], [out], args.seed, t0)
    n = int(np.isfinite(target).sum())
    return {"out": str(out), "valid_pixels": n}


def cmd_sample(args, cfg, t0):
    root = _need_dir(args.rasters, "raster")
    quarters = _quarters(args.quarters)
    inputs = []
    for q in quarters:
        inputs += [_need_file(_layers_path(root, q), "layer raster"),
                   _need_file(_target_path(root, q), "target raster")]
    rng = RngStream(args.seed)
    sets = []
    for q in quarters:
        stack, meta = read_raster(_layers_path(root, q))
        target, _ = read_raster(_target_path(root, q))
        grid = data.GridSpec.from_meta(meta)
        if args.stride:
            pos = [(r, c) for r in range(0, grid.height - data.CHIP_SIZE + 1, args.stride)
                   for c in range(0, grid.width - data.CHIP_SIZE + 1, args.stride)]
        else:
            pos = data.candidate_positions(grid, args.candidates, rng.child(q))
        sets.append(data.sample_chips(stack, target[0], grid, q, pos, args.min_valid,
                                      args.block_meters, args.max_per_block, rng,
                                      args.contained))
    chips = data.ChipSet.concat(sets).with_split(args.test_fraction, args.seed)
    out = Path(args.out)
    chips.save(out)
    with atomic_write(str(out) + ".split", "w") as fh:
        fh.write("\n".join(chips.split.tolist()) + "\n")
    _write_manifest(out, "sample", cfg, inputs, [out, Path(str(out) + ".split")], args.seed, t0)
    return {"out": str(out), "chips": len(chips),
            "train": int(np.sum(chips.split == "train")),
            "test": int(np.sum(chips.split == "test"))}


def _train_config(args, transfer="none"):
    return training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        milestones=tuple(args.milestones), factor=args.factor, dropout=args.dropout,
        seed=args.seed, transfer=transfer, clip_norm=args.clip_norm,
        steps_per_epoch=args.steps_per_epoch)


def _chips_with_split(path):
    chips, p = _load_chips(path)
    split = _split_labels(p)
    if split is not None:
        if len(split) != len(chips):
            raise UsageError(f"split file does not match {p}")
        chips = data.ChipSet(chips.records, split)
    return chips, p


def cmd_train(args, cfg, t0):
    chips, p = _chips_with_split(args.chips)
    train_set = chips.only("train") if np.any(chips.split == "train") else chips
    if len(train_set) == 0:
        raise UsageError("no training chips")
    try:
        config = _train_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mean, std = data.compute_norm_constants(train_set, None)
    spec = SPECS[args.spec]().with_norm(mean, std)
    model = network.build_model(spec, RngStream(args.seed, 3))
    model, history = training.train(model, train_set, config)
    out = Path(args.out)
    ckpt = training.Checkpoint(model, config.epochs, config.to_dict(), model.optimizer)
    training.save_checkpoint(out, ckpt)
    hist = Path(str(out) + ".history.csv")
    with atomic_write(hist, "w") as fh:
        fh.write(history.to_csv())
    _write_manifest(out, "train", cfg, [p], [out, hist], args.seed, t0)
    last = history.epochs[-1]
    return {"out": str(out), "epochs": config.epochs, "final_loss": last.mean_loss,
            "parameters": network.count_parameters(model)}


def cmd_transfer(args, cfg, t0):
    base = _load_model(args.base)
    chips, p = _chips_with_split(args.chips)
    train_set = chips.only("train") if np.any(chips.split == "train") else chips
    try:
        config = _train_config(args, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = training.transfer_train(base, train_set, args.mode, config)
    out = Path(args.out)
    training.save_checkpoint(out, result.checkpoint)
    hist = Path(str(out) + ".history.csv")
    with atomic_write(hist, "w") as fh:
        fh.write(result.history.to_csv())
    _write_manifest(out, "transfer", cfg, [Path(args.base), p], [out, hist], args.seed, t0)
    return {"out": str(out), "mode": args.mode,
            "grad_parameters": result.grad_param_count,
            "parameters": result.full_param_count,
            "mean_step_seconds": result.mean_step_seconds}


def cmd_infer(args, cfg, t0):
    ckpt = _load_model(args.model)
    root = _need_dir(args.rasters, "raster")
    lp = _need_file(_layers_path(root, args.quarter), "layer raster")
    if args.workers < 1 or args.tile_size < 1:
        raise UsageError("--workers and --tile-size must be positive")
    stack, meta = read_raster(lp)
    grid = data.GridSpec.from_meta(meta)
    jobs = inference.plan_tiles(grid.height, grid.width, args.tile_size, args.quarter,
                                (str(lp),))
    mosaic, report = inference.run_tiles(ckpt.model, jobs, stack, grid, args.workers,
                                         args.seed, inference.DEFAULT_OFFSETS, args.mc_passes)
    mosaic.meta["checkpoint_hash"] = _sha256(args.model)
    out = Path(args.out)
    mosaic.save(out, grid)
    _write_manifest(out, "infer", cfg, [Path(args.model), lp], [out, Path(str(out) + ".json")],
                    args.seed, t0)
    return {"out": str(out), **report.to_dict()}


def cmd_evaluate(args, cfg, t0):
    ckpt = _load_model(args.model)
    model = ckpt.model
    if bool(args.chips) == bool(args.world):
        raise UsageError("give exactly one of --chips or --world")
    out = Path(args.report)
    if args.chips:
        chips, p = _chips_with_split(args.chips)
        test = chips.only("test")
        if len(test) == 0:
            raise UsageError(f"{p} has no test-split chips")
        rep, by_q, run = evaluation.validate_sparse(
            model, test, args.passes, args.seed, categories=test.records["quarter"],
            checkpoint_hash=_sha256(args.model))
        result = {"accuracy": rep.to_dict(),
                  "by_quarter": {str(k): v.to_dict() for k, v in by_q.items()},
                  "calibration": evaluation.calibration_report(run)}
        inputs = [Path(args.model), p]
        rows = result["calibration"]["bins"]
    else:
        world, wp = _read_world(args.world)
        dense = evaluation.validate_dense(model, world, args.quarter, seed=args.seed,
                                          workers=args.workers, site_size=args.site_size)
        result = dense.to_dict()
        inputs = [Path(args.model), wp]
        rows = result["sites"]
    result["checkpoint_hash"] = _sha256(args.model)
    evaluation.write_json(out, result)
    csv_path = out.with_suffix(".csv")
    evaluation.write_csv(csv_path, rows)
    _write_manifest(out, "evaluate", cfg, inputs, [out, csv_path], args.seed, t0)
    head = result.get("accuracy") or result.get("overall")
    return {"report": str(out), **{k: head[k] for k in ("r2", "rmse", "bias", "n")}}


def cmd_attribute(args, cfg, t0):
    ckpt = _load_model(args.model)
    chips, p = _load_chips(args.chips)
    hit = np.flatnonzero(chips.records["id"] == np.uint64(args.chip_id))
    if hit.size == 0:
        raise UsageError(f"chip id {args.chip_id} not found in {p}")
    rec = chips.records[hit[0]]
    bg = attribution.background(chips, attribution.BACKGROUND_CHIPS, RngStream(args.seed))
    report = attribution.attribute(ckpt.model, rec["input"], _pixel(args.pixel), bg,
                                   args.radius, int(rec["id"]))
    out = Path(args.out)
    raster = out.with_suffix(".f32")
    report.save(out, raster, float(rec["lon"]), float(rec["lat"]))
    _write_manifest(out, "attribute", cfg, [Path(args.model), p], [out, raster], args.seed, t0)
    imp = report.channel_importance
    return {"report": str(out), "top_channel": report.channels[int(np.argmax(imp))]}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--epochs", type=int, default=50, help="training epochs (default 50)")
    p.add_argument("--batch-size", type=int, default=96, help="chips per step (default 96)")
    p.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    p.add_argument("--milestones", type=float, nargs="+", default=[0.1, 0.2, 0.5],
                   help="epoch fractions at which the rate is multiplied by --factor")
    p.add_argument("--factor", type=float, default=0.1, help="learning-rate decay factor")
    p.add_argument("--dropout", type=float, default=0.2, help="dropout rate")
    p.add_argument("--clip-norm", type=float, default=None,
                   help="global gradient-norm clip (off by default)")
    p.add_argument("--steps-per-epoch", type=int, default=None,
                   help="cap on optimizer steps per epoch (default: full pass)")


def build_parser():
    parser = argparse.ArgumentParser(prog="wscifusion", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="WARNING",
                        help="stderr logging level (DEBUG, INFO, WARNING, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        p.add_argument("--config", default=None,
                       help="JSON file of flag values; explicit flags override it")
        return p

    p = add("synth", cmd_synth, "write a synthetic world: layer rasters, truth, footprints")
    p.add_argument("--extent", type=int, default=512, help="world side length in pixels")
    p.add_argument("--density", type=float, default=0.05, help="fraction of sampled cells")
    p.add_argument("--quarters", default="0", help="comma-separated quarter indices")
    p.add_argument("--kind", default="smooth", choices=["smooth", "white", "constant"],
                   help="spatial structure of the truth field")
    p.add_argument("--out", required=True, help="output directory")

    p = add("grid", cmd_grid, "grid footprints onto a raster as a sparse target")
    p.add_argument("--footprints", required=True, help="footprint CSV (lon,lat,quarter,wsci,valid)")
    p.add_argument("--quarter", type=int, default=None, help="keep only this quarter")
    p.add_argument("--like", required=True, help="raster whose geometry the target uses")
    p.add_argument("--out", required=True, help="output target raster")

    p = add("sample", cmd_sample, "cut chips with a valid-pixel threshold and a block split")
    p.add_argument("--rasters", required=True,
                   help="directory holding layers_q<Q>.f32 and target_q<Q>.f32")
    p.add_argument("--quarters", default="0", help="comma-separated quarter indices")
    p.add_argument("--candidates", type=int, default=2000,
                   help="random chip positions per quarter (ignored with --stride)")
    p.add_argument("--stride", type=int, default=0, help="regular chip stride in pixels")
    p.add_argument("--min-valid", type=int, default=data.MIN_VALID,
                   help="minimum valid target pixels per chip")
    p.add_argument("--block-meters", type=float, default=data.BLOCK_METERS,
                   help="side of the spatial split blocks in metres")
    p.add_argument("--max-per-block", type=int, default=data.MAX_PER_BLOCK,
                   help="chip cap per block")
    p.add_argument("--contained", action="store_true",
                   help="reject chips that straddle a block boundary")
    p.add_argument("--test-fraction", type=float, default=0.2, help="share of test blocks")
    p.add_argument("--out", required=True, help="output chip file")

    p = add("train", cmd_train, "train a model from scratch")
    p.add_argument("--chips", required=True, help="chip file (train split is used)")
    p.add_argument("--spec", default="default", choices=sorted(SPECS),
                   help="architecture preset")
    _train_flags(p)
    p.add_argument("--out", required=True, help="output checkpoint")

    p = add("transfer", cmd_transfer, "adapt a checkpoint to new targets")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--chips", required=True, help="chip file with the new targets")
    p.add_argument("--mode", required=True, choices=["full", "frozen_head"],
                   help="re-optimise everything or only the head")
    _train_flags(p)
    p.add_argument("--out", required=True, help="output checkpoint")

    p = add("infer", cmd_infer, "predict a 4-band mosaic (mean and uncertainties)")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--rasters", required=True, help="directory holding layers_q<Q>.f32")
    p.add_argument("--quarter", type=int, default=0, help="quarter to predict")
    p.add_argument("--tile-size", type=int, default=1600, help="tile side in pixels")
    p.add_argument("--workers", type=int, default=1, help="parallel tile workers")
    p.add_argument("--mc-passes", type=int, default=1, help="dropout draws per offset")
    p.add_argument("--out", required=True, help="output mosaic raster")

    p = add("evaluate", cmd_evaluate, "accuracy, calibration and spatial-correlation reports")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--chips", default=None, help="chip file; its test split is evaluated")
    p.add_argument("--world", default=None, help="synthetic world directory (dense truth)")
    p.add_argument("--quarter", type=int, default=0, help="quarter for dense evaluation")
    p.add_argument("--passes", type=int, default=5, help="MC passes for chip evaluation")
    p.add_argument("--site-size", type=int, default=64, help="dense site side in pixels")
    p.add_argument("--workers", type=int, default=1, help="parallel tile workers")
    p.add_argument("--report", required=True, help="output JSON report (CSV alongside)")

    p = add("attribute", cmd_attribute, "occlusion importance for one predicted pixel")
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--chips", required=True, help="chip file holding the chip")
    p.add_argument("--chip-id", required=True, type=int, help="id of the chip to explain")
    p.add_argument("--pixel", required=True, help="target pixel 'row,col' in the output grid")
    p.add_argument("--radius", type=int, default=1, help="occlusion patch radius")
    p.add_argument("--out", required=True, help="output JSON report (raster alongside)")
    return parser


def _merge_config(parser, args, argv):
    """Apply a JSON config file under the explicitly given flags."""
    if not args.config:
        return {k: v for k, v in vars(args).items() if k != "func"}
    path = _need_file(args.config, "config")
    try:
        values = json.loads(path.read_text())
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
    known = set(vars(args))
    for key, value in values.items():
        name = key.replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown config key {key!r}")
        if name not in given:
            setattr(args, name, value)
    return {k: v for k, v in vars(args).items() if k != "func"}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _merge_config(parser, args, argv)
        summary = args.func(args, cfg, t0)
    except UsageError as exc:
        print(f"error 2 {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, training.SpecMismatchError, CorruptFileError) as exc:
        print(f"error 2 {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line report for scripts
        msg = str(exc).replace("\n", " ")
        print(f"error 1 {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(evaluation.jsonable(summary), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
