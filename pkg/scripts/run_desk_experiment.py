"""Desk-scale experiment: three seeds, all twelve methods, results table on stdout.

    python scripts/run_desk_experiment.py --out runs/desk --seed 0
"""

import argparse
import json
import sys

from ecgattr.harness import run_pipeline, run_preset
from ecgattr.report import report_markdown


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--max-examples", type=int, default=16)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    cfg = run_preset("desk", seed=args.seed, output_dir=args.out)
    cfg.eval.repeats = args.repeats
    cfg.eval.max_examples = args.max_examples
    cfg.workers = args.workers

    def log(event, **kw):
        if event in ("stage", "done"):
            print(json.dumps({"event": event, **kw}), file=sys.stderr, flush=True)

    table = run_pipeline(cfg, log=log)
    print(report_markdown(table))
    print("test accuracy per seed:", [round(a, 4) for a in table.metadata["test_accuracy"]])
    for seed, rows in zip(table.metadata["seeds"], table.per_repeat):
        by = {r.method: r for r in rows}
        if "GradCAM" in by and "Random" in by:
            gap = by["GradCAM"].average - by["Random"].average
            print(f"seed {seed}: GradCAM - Random average = {gap:+.3f}")


if __name__ == "__main__":
    main()
