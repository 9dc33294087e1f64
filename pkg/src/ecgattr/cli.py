"""Command-line entry point: ``ecgattr <gen|train|attribute|evaluate|report|run-all>``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import engine
from .attributions import ALL_METHODS, MethodId, MethodParams, prepare_network, read_attributions, write_attributions
from .errors import EcgAttrError, StageError
from .harness import (OUTPUT_ENV, RunConfig, build_table, draw_backgrounds, emit, read_records, run_pipeline,
                      run_preset, stage_attribute, stage_evaluate, stage_generate, stage_select, stage_train,
                      write_records)
from .metrics import EvalConfig
from .model import TrainConfig, preset
from .report import render_report
from .synth import read_dataset

EXIT_CODES = {"error": 1, "usage": 2, "config": 3, "input": 4, "load": 5, "training": 6, "attribution": 7,
              "stage": 8}


def _default_out(name):
    return os.path.join(os.environ.get(OUTPUT_ENV, "runs"), name)


def _methods(text):
    if not text:
        return [m.value for m in ALL_METHODS]
    return [MethodId.parse(m).value for m in text.split(",") if m.strip()]


def cmd_gen(args):
    out = args.out or _default_out("dataset")
    ds = stage_generate(args.n_per_class, args.seed, out)
    emit("dataset_written", path=out, train=len(ds.train), test=len(ds.test))


def cmd_train(args):
    base = TrainConfig()
    if args.train_config:
        with open(args.train_config) as fh:
            base = TrainConfig.from_kv(fh.read())
    overrides = {"learning_rate": args.lr, "batch_size": args.batch_size, "weight_decay": args.weight_decay,
                 "epochs": args.epochs}
    cfg = TrainConfig(**{**asdict(base), **{k: v for k, v in overrides.items() if v is not None}, "seed": args.seed})
    ds = read_dataset(args.data)
    out = args.out or _default_out("checkpoint")
    net, hist = stage_train(ds, preset(args.preset), cfg, args.seed, out, log=lambda d: emit(d.pop("event"), **d))
    emit("checkpoint_written", path=out, test_accuracy=hist.test_accuracy[-1])


def cmd_attribute(args):
    ds = read_dataset(args.data)
    net = prepare_network(engine.load_checkpoint(args.checkpoint))
    methods = _methods(args.methods)
    eval_cfg = EvalConfig(threshold=args.threshold, max_examples=args.max_examples)
    selected = stage_select(net, ds.test, eval_cfg)
    emit("selected", count=len(selected))
    mp = MethodParams(seed=args.seed, ig_steps=args.ig_steps, n_samples=args.n_samples, n_segments=args.n_segments)
    backgrounds = None
    if MethodId.DEEPSHAP.value in methods:
        backgrounds = draw_backgrounds(ds.train, mp.deepshap_backgrounds, args.seed)
    maps, failures = stage_attribute(net, selected, methods, mp, backgrounds, args.workers,
                                     log=lambda e, **kw: emit(e, **kw))
    for f in failures:
        emit("attribution_failed", **f)
    out = args.out or _default_out("attributions")
    write_attributions(maps, out)
    emit("attributions_written", path=out, maps=len(maps))


def cmd_evaluate(args):
    ds = read_dataset(args.data)
    net = prepare_network(engine.load_checkpoint(args.checkpoint))
    maps = read_attributions(args.attributions)
    ids = {m.example_id for m in maps}
    selected = [ex for ex in ds.test if ex.id in ids]
    cfg = EvalConfig(window=args.window)
    records = stage_evaluate(net, selected, maps, cfg, args.repeat, args.workers, log=lambda e, **kw: emit(e, **kw))
    out = args.out or _default_out("metrics.csv")
    write_records(records, out)
    emit("metrics_written", path=out, records=len(records), skipped=sum(r.skipped for r in records))


def cmd_report(args):
    records = []
    for path in args.metrics:
        records += read_records(path)
    methods = _methods(args.methods) if args.methods else None
    table = build_table(records, methods)
    paths = render_report(table, args.out or _default_out("report"))
    emit("report_written", csv=paths[0], markdown=paths[1], rows=len(table.rows))


def cmd_run_all(args):
    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_json(json.load(fh))
    else:
        cfg = run_preset(args.preset, args.seed)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.output_dir = args.out
    if not cfg.output_dir:
        cfg.output_dir = _default_out(f"run-{args.preset}-seed{cfg.seed}")
    if args.workers is not None:
        cfg.workers = args.workers
    if args.methods:
        cfg.methods = _methods(args.methods)
    if args.repeats is not None:
        cfg.eval.repeats = args.repeats
    cfg = RunConfig.from_json(asdict(cfg))
    run_pipeline(cfg, log=lambda e, **kw: emit(e, **kw))


def build_parser():
    p = argparse.ArgumentParser(prog="ecgattr", description="Evaluate feature attributions on 1D ECG signals.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n-per-class", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a classifier on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--preset", default="desk", choices=["desk", "paper"])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--train-config", help="flat key=value file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--weight-decay", type=float)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attribute", help="select test examples and dump attribution maps")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out")
    a.add_argument("--methods", help="comma-separated method names (default: all)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--threshold", type=float, default=0.9)
    a.add_argument("--max-examples", type=int)
    a.add_argument("--ig-steps", type=int, default=64)
    a.add_argument("--n-samples", type=int, default=1000)
    a.add_argument("--n-segments", type=int, default=64)
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(fn=cmd_attribute)

    e = sub.add_parser("evaluate", help="score attribution dumps")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--attributions", required=True)
    e.add_argument("--out")
    e.add_argument("--window", type=int, default=16)
    e.add_argument("--repeat", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("report", help="aggregate metric CSVs into the results table")
    r.add_argument("--metrics", nargs="+", required=True)
    r.add_argument("--out")
    r.add_argument("--methods")
    r.set_defaults(fn=cmd_report)

    ra = sub.add_parser("run-all", help="full pipeline over all repeats")
    ra.add_argument("--preset", default="desk", choices=["tiny", "desk", "paper"])
    ra.add_argument("--seed", type=int)
    ra.add_argument("--config", help="RunConfig JSON file")
    ra.add_argument("--out")
    ra.add_argument("--workers", type=int)
    ra.add_argument("--repeats", type=int)
    ra.add_argument("--methods")
    ra.set_defaults(fn=cmd_run_all)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.fn(args)
    except EcgAttrError as exc:
        emit("error", stream=sys.stderr, category=exc.category, message=str(exc))
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        emit("error", stream=sys.stderr, category="io", message=str(exc))
        return 9
    return 0


if __name__ == "__main__":
    sys.exit(main())
