"""Command-line pipeline: gen-data, train, quantize, infer, eval, bench, attention."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import model_io
from . import quant as Q
from .data import TileParams, generate_dataset, read_dataset, read_tile, stack_tiles, write_dataset
from .fusion import attention_csv, attention_summary
from .heads import decode_and_nms, format_detections
from .metrics import evaluate
from .model import Detector, QuantizedDetector, normalize_inputs
from .train import TrainConfig, calibration_batches, history_csv, load_config, parse_overrides, train


class UsageError(Exception):
    pass


def _split(tiles, man, split: str):
    if split == "all":
        return list(tiles)
    keep = set(man.ids(split))
    return [t for t, tid in zip(tiles, man.splits) if tid in keep]


def cmd_gen_data(a) -> int:
    if a.sun_min > a.sun_max:
        raise UsageError(f"--sun-min ({a.sun_min}) must not exceed --sun-max ({a.sun_max})")
    if a.tiles < 1:
        raise UsageError("--tiles must be >= 1")
    try:
        params = TileParams(size=a.size, sun_min=a.sun_min, sun_max=a.sun_max)
    except ValueError as e:
        raise UsageError(str(e)) from None
    val = a.tiles // 4 if a.val is None else a.val
    if val + a.test > a.tiles:
        raise UsageError("--val plus --test exceeds --tiles")
    tiles, man = generate_dataset(a.tiles, a.seed, params, val, a.test)
    write_dataset(tiles, man, a.out)
    sizes = man.split_sizes()
    print(f"wrote {a.tiles} tiles to {a.out} (train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")
    return 0


def cmd_train(a) -> int:
    try:
        cfg = load_config(a.config) if a.config else TrainConfig()
        over = dict(kv.split("=", 1) for kv in a.set or [])
        if a.qat:
            over["qat"] = "true"
        if a.seed is not None:
            over["seed"] = str(a.seed)
        if a.epochs is not None:
            over["epochs"] = str(a.epochs)
        cfg = parse_overrides(over, cfg)
    except (KeyError, ValueError) as e:
        raise UsageError(f"config: {e}") from None
    tiles, man = read_dataset(a.data)
    tr, va = _split(tiles, man, "train"), _split(tiles, man, "val")
    if not tr:
        raise RuntimeError("dataset has no training tiles")
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.config.txt").write_text(cfg.to_text())

    def log(row):
        print(f"epoch {row['epoch']:4d} [{row['phase']}] lr {row['lr']:.3e} loss {row['total']:.4f} val mAP@0.5 {row['val_map50']:.4f}", flush=True)

    res = train(cfg, tr, va, log=None if a.quiet else log)
    Path(f"{out}.log.csv").write_text(history_csv(res.history))
    meta = {"config_sha256_16": cfg.digest(), "seed": cfg.seed, "best_epoch": res.best_epoch, "best_val_map50": res.best_val}
    model_io.save(res.model, out, meta)
    print(f"saved {out} (best epoch {res.best_epoch}, val mAP@0.5 {res.best_val:.4f})")
    return 0


def cmd_quantize(a) -> int:
    model = model_io.load(a.model)
    if isinstance(model, QuantizedDetector):
        raise RuntimeError(f"{a.model} is already an int8 model")
    if a.data:
        tiles, man = read_dataset(a.data)
        oi, dem, _ = stack_tiles(_split(tiles, man, "train"))
        model.calibrate(calibration_batches(oi, dem))
    q = QuantizedDetector.from_float(model)
    n = model_io.save(q, a.out, model_io.read_header(a.model).get("metadata", {}))
    print(f"saved {a.out} ({n} bytes)")
    return 0


def _predict(model, oi, dem):
    Q.COUNTERS.reset()
    out = model.predict(oi, dem)
    if isinstance(model, QuantizedDetector) and Q.COUNTERS.float_ops:
        raise RuntimeError(f"integer path executed {Q.COUNTERS.float_ops} float operations")
    return out


def cmd_infer(a) -> int:
    model = model_io.load(a.model)
    tile = read_tile(a.tile)
    oi, dem = normalize_inputs(tile.oi[None], tile.dem[None])
    dets = decode_and_nms(_predict(model, oi, dem), tile.oi.shape, a.conf, a.iou)[0]
    tid = Path(a.tile).name.split(".")[0]
    text = format_detections(tid, dets)
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    if isinstance(model, QuantizedDetector):
        print(f"int8 path: {Q.COUNTERS.calls} conv kernels, float ops {Q.COUNTERS.float_ops}", file=sys.stderr)
    return 0


def cmd_eval(a) -> int:
    model = model_io.load(a.model)
    tiles, man = read_dataset(a.data)
    sel = _split(tiles, man, a.split)
    if not sel:
        raise RuntimeError(f"split {a.split!r} is empty")
    oi, dem, boxes = stack_tiles(sel)
    dets = decode_and_nms(_predict(model, oi, dem), (man.size, man.size), a.conf, a.iou)
    rep = evaluate(dets, boxes)
    sys.stdout.write(rep.text())
    return 0


def cmd_bench(a) -> int:
    model = model_io.load(a.model)
    hw = (a.size, a.size)
    graph = model.describe()
    macs = B.count_macs(graph, hw)
    rng = np.random.default_rng(0)
    oi, dem = normalize_inputs(rng.random((1, *hw)), rng.normal(size=(1, *hw)))
    fmodel = model if isinstance(model, Detector) else None
    qmodel = model if isinstance(model, QuantizedDetector) else None
    f_bytes = Path(a.model).stat().st_size if fmodel else None
    q_bytes = Path(a.model).stat().st_size if qmodel else None
    if a.int8:
        qmodel = model_io.load(a.int8)
        q_bytes = Path(a.int8).stat().st_size
    elif fmodel is not None and not fmodel.uncalibrated():
        qmodel = QuantizedDetector.from_float(fmodel)
    f_lat = B.bench_latency(lambda: fmodel.predict(oi, dem), a.reps) if fmodel and a.reps else None
    q_lat = B.bench_latency(lambda: qmodel.predict(oi, dem), a.reps) if qmodel and a.reps else None
    n_weights = sum(r["cout"] * r["cin"] // r["groups"] * r["k"] ** 2 for r in graph["layers"] if r["kind"] in B.CONV_KINDS)
    rep = B.BenchReport(macs, f_lat, q_lat, 4 * n_weights, n_weights, f_bytes, q_bytes, hw)
    sys.stdout.write(rep.text())
    if a.csv:
        Path(a.csv).write_text(rep.csv())
    if a.macs_csv:
        Path(a.macs_csv).write_text(macs.csv())
    return 0


def cmd_attention(a) -> int:
    model = model_io.load(a.model)
    tiles, man = read_dataset(a.data)
    sel = _split(tiles, man, a.split)
    ids = [tid for tid in man.splits if a.split == "all" or man.splits[tid] == a.split]
    oi, dem, _ = stack_tiles(sel)
    rows = attention_summary(model, oi, dem, ids)
    text = attention_csv(rows)
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aqpcd", description="Dual-sensor INT8 crater detector pipeline")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic tile dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--tiles", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--sun-min", type=float, default=5.0)
    g.add_argument("--sun-max", type=float, default=85.0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--val", type=int, default=None, help="held-out validation tiles (default: a quarter)")
    g.add_argument("--test", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--qat", action="store_true", help="finish with quantization-aware fine-tuning")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    q = sub.add_parser("quantize", help="convert a float model to int8")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--data", default=None, help="dataset whose training split calibrates the observers")
    q.set_defaults(fn=cmd_quantize)

    i = sub.add_parser("infer", help="detect craters in one tile")
    i.add_argument("--model", required=True)
    i.add_argument("--tile", required=True, help="tile path stem (DIR/tiles/000001) or its .oi file")
    i.add_argument("--out", default=None)
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.5)
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="mAP and F1 on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
    e.add_argument("--conf", type=float, default=0.01)
    e.add_argument("--iou", type=float, default=0.5)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="MAC count, latency and size report")
    b.add_argument("--model", required=True)
    b.add_argument("--int8", default=None, help="int8 model to time next to a float one")
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--reps", type=int, default=20, help="timed repetitions, at least 10 (0 skips timing)")
    b.add_argument("--csv", default=None)
    b.add_argument("--macs-csv", default=None)
    b.set_defaults(fn=cmd_bench)

    at = sub.add_parser("attention", help="mean attention per tile, scale and modality as CSV")
    at.add_argument("--model", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    at.add_argument("--out", default=None)
    at.set_defaults(fn=cmd_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors this way
        return int(e.code or 0)
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.cmd}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # any runtime failure maps to exit 1
        print(f"{parser.prog} {args.cmd}: error: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
