#!/usr/bin/env python3
"""Filtering ablation: oracle-filtered vs unfiltered vs relabeled self-data.

Runs the composed (ipa) planner's improvement loop under each filtering mode
with shared initial checkpoints, then overlays the curves in one chart.

Usage:
    python scripts/run_filter_ablation.py --out runs/filters --seeds 0 1 2
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sail.cli import main as cli_main
from sail.configs import RunConfig
from sail.harness import cmd_train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/filters")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--rollouts", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    cfg = RunConfig(out=str(out))
    if not (out / "checkpoints" / "ckpt_theta").exists():
        print("training initial models (one-time)...")
        cmd_train(cfg, out, progress=print)

    for filter_mode in ("oracle", "none", "relabel"):
        for seed in args.seeds:
            code = cli_main(
                [
                    "sail",
                    "--out", str(out),
                    "--seed", str(seed),
                    "--adaptation", "ipa",
                    "--filter", filter_mode,
                    "--iterations", str(args.iterations),
                    "--rollouts", str(args.rollouts),
                ]
            )
            if code != 0:
                return code

    metrics_files = [str(p / "metrics.csv") for p in sorted(out.glob("run_*"))]
    chart = out / "filters.svg"
    code = cli_main(["plot", *metrics_files, "--out", str(chart)])
    print(f"curves: {chart}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
