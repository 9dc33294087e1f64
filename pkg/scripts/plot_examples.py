"""SVG overlays (signal, attribution, shaded abnormal beats) from a finished run.

    python scripts/plot_examples.py runs/desk/repeat0 --methods GradCAM,Random --limit 4
"""

import argparse
import os

from ecgattr.attributions import read_attributions
from ecgattr.report import plot_overlay
from ecgattr.synth import read_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("repeat_dir", help="a repeatN directory holding dataset/ and attributions/")
    ap.add_argument("--methods", default="GradCAM,Random")
    ap.add_argument("--sign-mode", default="raw", choices=["raw", "absolute"])
    ap.add_argument("--limit", type=int, default=4)
    ap.add_argument("--out")
    args = ap.parse_args()

    test = {ex.id: ex for ex in read_dataset(os.path.join(args.repeat_dir, "dataset")).test}
    maps = read_attributions(os.path.join(args.repeat_dir, "attributions"))
    wanted = set(args.methods.split(","))
    out = args.out or os.path.join(args.repeat_dir, "overlays")
    os.makedirs(out, exist_ok=True)
    ids = sorted({m.example_id for m in maps})[:args.limit]
    for amap in maps:
        if amap.example_id in ids and amap.method.value in wanted and amap.sign_mode.value == args.sign_mode:
            path = os.path.join(out, f"ex{amap.example_id}_{amap.method.value}_{args.sign_mode}.svg")
            plot_overlay(test[amap.example_id], amap, path)
            print(path)


if __name__ == "__main__":
    main()
