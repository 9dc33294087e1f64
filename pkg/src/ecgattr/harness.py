"""End-to-end pipeline: generate -> train -> select -> attribute -> evaluate -> report."""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from . import engine
from .attributions import (ALL_METHODS, AttributionMap, MethodId, MethodParams, SignMode, apply_sign_mode,
                           prepare_network, raw_attribution, read_attributions, write_attributions)
from .errors import ConfigError, EcgAttrError, StageError
from .metrics import EvalConfig, MetricRecord, aggregate_by_mode, better_mode, evaluate_example
from .model import (NetworkConfig, TrainConfig, build_network, model_inputs, preset, select_eval_examples,
                    standardize, train)
from .report import ResultsTable, TableRow, render_report
from .synth import BeatClass, GeneratorParams, gen_dataset, read_dataset, write_dataset

OUTPUT_ENV = "ECGATTR_OUT"


def emit(event, stream=None, **fields_):
    """Single-line JSON progress event."""
    stream = stream or sys.stdout
    stream.write(json.dumps({"event": event, **fields_}, sort_keys=True, default=_json_default) + "\n")
    stream.flush()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return str(obj)


@dataclass
class RunConfig:
    n_per_class: int = 600
    network_preset: str = "desk"
    network: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    method_params: MethodParams = field(default_factory=MethodParams)
    eval: EvalConfig = field(default_factory=EvalConfig)
    methods: list = field(default_factory=lambda: [m.value for m in ALL_METHODS])
    output_dir: str = ""
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        self.methods = [MethodId.parse(m).value for m in self.methods]
        self.network_config()

    def network_config(self):
        return preset(self.network_preset, **self.network)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        nested = {"train": TrainConfig, "method_params": MethodParams, "eval": EvalConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown RunConfig keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in data and not is_dataclass(data[key]):
                try:
                    data[key] = typ(**data[key])
                except TypeError as exc:
                    raise ConfigError(f"bad {key} section: {exc}") from None
        return cls(**data)


def run_preset(name, seed=0, output_dir=""):
    """Named RunConfigs: ``tiny`` (smoke tests), ``desk`` (minutes), ``paper`` (full scale)."""
    if name == "tiny":
        return RunConfig(n_per_class=12, network={"base_channels": 4},
                         train=TrainConfig(learning_rate=5e-3, batch_size=12, epochs=6),
                         method_params=MethodParams(ig_steps=8, n_samples=64, deepshap_backgrounds=2),
                         eval=EvalConfig(repeats=1, max_examples=3, threshold=0.34),
                         output_dir=output_dir, seed=seed)
    if name == "desk":
        return RunConfig(n_per_class=600, network_preset="desk",
                         train=TrainConfig(learning_rate=2e-3, batch_size=32, epochs=8),
                         eval=EvalConfig(repeats=3, max_examples=16),
                         output_dir=output_dir, seed=seed)
    if name == "paper":
        return RunConfig(n_per_class=2000, network_preset="paper", train=TrainConfig(),
                         eval=EvalConfig(repeats=5), output_dir=output_dir, seed=seed)
    raise ConfigError(f"unknown run preset {name!r}; choose tiny, desk or paper")


# -- stages ------------------------------------------------------------------

def stage_generate(n_per_class, seed, out_dir=None, params=None):
    dataset = gen_dataset(n_per_class, seed, params or GeneratorParams())
    if out_dir:
        write_dataset(dataset, out_dir)
    return dataset


def stage_train(dataset, net_cfg, train_cfg, seed, out_dir=None, log=None):
    net = build_network(net_cfg, seed)
    net, history = train(net, dataset, train_cfg, log=log)
    if out_dir:
        engine.save_checkpoint(net, out_dir)
        with open(os.path.join(out_dir, "history.json"), "w") as fh:
            json.dump(asdict(history), fh, indent=1)
            fh.write("\n")
    return net, history


def stage_select(net, examples, eval_cfg):
    selected = select_eval_examples(net, examples, eval_cfg.threshold)
    if eval_cfg.max_examples is not None:
        selected = selected[:eval_cfg.max_examples]
    return selected


def draw_backgrounds(train_examples, count, seed):
    """Standardized normal-class training signals used as DeepSHAP references."""
    normals = [ex for ex in train_examples if ex.label == BeatClass.NORMAL]
    if not normals:
        raise ConfigError("no normal-class training examples for DeepSHAP backgrounds")
    rng = np.random.default_rng([int(seed), 7])
    idx = rng.choice(len(normals), size=min(count, len(normals)), replace=False)
    return np.stack([standardize(normals[i].signal) for i in sorted(idx)])


def _attribute_one(args):
    net, ex, methods, mparams, backgrounds = args
    x = standardize(ex.signal)
    target = int(ex.label)
    maps, failures = [], []
    for method in methods:
        try:
            values, _ = raw_attribution(net, x, method, mparams, target, ex.id, backgrounds)
        except EcgAttrError as exc:
            failures.append({"method": method, "example_id": ex.id, "error": str(exc)})
            continue
        for mode in SignMode:
            maps.append(AttributionMap(apply_sign_mode(values, mode), method, mode, target, ex.id))
    return maps, failures


def _parallel_map(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // workers)))


def stage_attribute(net, selected, methods, mparams, backgrounds=None, workers=1, log=None):
    """Raw and absolute maps for every (example, method); failed pairs are logged, not fatal."""
    net = prepare_network(net)
    results = _parallel_map(_attribute_one, [(net, ex, list(methods), mparams, backgrounds) for ex in selected],
                            workers)
    maps, failures = [], []
    for ex, (m, f) in zip(selected, results):
        maps += m
        failures += f
        if log:
            log("attributed", example_id=ex.id, maps=len(m), failures=len(f))
    return maps, failures


def _evaluate_one(args):
    net, ex, ex_maps, eval_cfg, repeat = args
    x = standardize(ex.signal)
    records, seen = [], {}
    for amap in ex_maps:
        key = (amap.method, amap.values.tobytes())
        if key in seen:
            # identical map under both sign modes: reuse the scores
            rec = seen[key]
            records.append(MetricRecord(rec.example_id, rec.method, amap.sign_mode.value, rec.loc, rec.hit,
                                        rec.degradation, rec.skipped, rec.repeat))
            continue
        rec = evaluate_example(net, x, ex, amap, eval_cfg, amap.method.value, amap.sign_mode.value,
                               amap.target_class, repeat)
        seen[key] = rec
        records.append(rec)
    return records


def stage_evaluate(net, selected, maps, eval_cfg, repeat=0, workers=1, log=None):
    net = prepare_network(net)
    by_example = {}
    for amap in maps:
        by_example.setdefault(amap.example_id, []).append(amap)
    items = [(net, ex, by_example.get(ex.id, []), eval_cfg, repeat) for ex in selected]
    results = _parallel_map(_evaluate_one, items, workers)
    records = []
    for ex, recs in zip(selected, results):
        records += recs
        if log:
            log("evaluated", example_id=ex.id, records=len(recs))
    return records


METRICS_FIELDS = MetricRecord.CSV_FIELDS


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.as_row())


def read_records(path):
    with open(path, newline="") as fh:
        return [MetricRecord.from_row(row) for row in csv.DictReader(fh)]


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return math.fsum(xs) / len(xs) if xs else float("nan")


def build_table(records, methods=None, metadata=None):
    """Mean over repeats of per-repeat (method, sign mode) aggregates; better sign mode per method."""
    repeats = sorted({r.repeat for r in records})
    per_repeat, pooled = [], {}
    for rep in repeats:
        rows = aggregate_by_mode([r for r in records if r.repeat == rep])
        per_repeat.append([TableRow(b.method, b.sign_mode, b.loc, b.pointing, b.degradation)
                           for b in better_mode(rows).values()])
        for key, row in rows.items():
            pooled.setdefault(key, []).append(row)
    mean_rows = {}
    for key, rows in pooled.items():
        mean_rows[key] = TableRow(key[0], key[1], _nanmean([r.loc for r in rows]),
                                  _nanmean([r.pointing for r in rows]), _nanmean([r.degradation for r in rows]))
    best = {}
    for (method, _), row in mean_rows.items():
        cur = best.get(method)
        if cur is None or (not math.isnan(row.average) and (math.isnan(cur.average) or row.average > cur.average)):
            best[method] = row
    order = list(methods) if methods is not None else list(best)
    table_rows = [best[m] for m in order if m in best]
    return ResultsTable(table_rows, dict(metadata or {}), per_repeat)


def run_pipeline(cfg: RunConfig, log=None):
    """Run every repeat (seed + repeat index) and return the averaged results table."""
    out = cfg.output_dir or os.environ.get(OUTPUT_ENV, "runs")
    os.makedirs(out, exist_ok=True)
    log = log or (lambda event, **kw: emit(event, **kw))
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    net_cfg = cfg.network_config()
    all_records, meta = [], {"seeds": [], "selected": [], "skipped": [], "test_accuracy": [], "failures": []}
    for rep in range(cfg.eval.repeats):
        seed = cfg.seed + rep
        rdir = os.path.join(out, f"repeat{rep}")
        stage = "generate"
        try:
            log("stage", stage=stage, repeat=rep, seed=seed)
            dataset = stage_generate(cfg.n_per_class, seed, os.path.join(rdir, "dataset"))
            stage = "train"
            log("stage", stage=stage, repeat=rep, seed=seed)
            tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
            net, history = stage_train(dataset, net_cfg, tcfg, seed, os.path.join(rdir, "checkpoint"),
                                       log=lambda d: log(d.pop("event"), repeat=rep, **d))
            stage = "select"
            folded = prepare_network(net)
            selected = stage_select(folded, dataset.test, cfg.eval)
            log("stage", stage=stage, repeat=rep, seed=seed, selected=len(selected))
            stage = "attribute"
            log("stage", stage=stage, repeat=rep, seed=seed, methods=len(cfg.methods))
            mparams = MethodParams(**{**asdict(cfg.method_params), "seed": seed})
            backgrounds = None
            if MethodId.DEEPSHAP.value in cfg.methods:
                backgrounds = draw_backgrounds(dataset.train, mparams.deepshap_backgrounds, seed)
            maps, failures = stage_attribute(folded, selected, cfg.methods, mparams, backgrounds, cfg.workers)
            write_attributions(maps, os.path.join(rdir, "attributions"))
            for f in failures:
                log("attribution_failed", repeat=rep, **f)
            stage = "evaluate"
            log("stage", stage=stage, repeat=rep, seed=seed, maps=len(maps))
            records = stage_evaluate(folded, selected, maps, cfg.eval, rep, cfg.workers)
            write_records(records, os.path.join(rdir, "metrics.csv"))
        except EcgAttrError as exc:
            raise StageError(stage, seed, exc) from exc
        except Exception as exc:  # keep partial artifacts, name the stage
            raise StageError(stage, seed, f"{type(exc).__name__}: {exc}") from exc
        all_records += records
        meta["seeds"].append(seed)
        meta["selected"].append(len(selected))
        meta["skipped"].append(sum(r.skipped for r in records))
        meta["test_accuracy"].append(history.test_accuracy[-1])
        meta["failures"].append(len(failures))
    write_records(all_records, os.path.join(out, "metrics.csv"))
    table = build_table(all_records, cfg.methods, meta)
    render_report(table, out)
    with open(os.path.join(out, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    log("done", output_dir=out, rows=len(table.rows))
    return table


def load_stage_inputs(data_dir, checkpoint_dir):
    return read_dataset(data_dir), engine.load_checkpoint(checkpoint_dir)


__all__ = [
    "RunConfig", "run_preset", "run_pipeline", "stage_generate", "stage_train", "stage_select", "stage_attribute",
    "stage_evaluate", "build_table", "write_records", "read_records", "draw_backgrounds", "emit",
    "read_attributions", "model_inputs", "NetworkConfig",
]
