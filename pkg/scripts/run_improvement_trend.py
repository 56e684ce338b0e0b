#!/usr/bin/env python3
"""Reproduce the headline experiment: adapted planning improves over iterations.

Trains the initial models once, then runs the improvement loop on the novel
colors for both the composed (ipa) planner and the in-domain-only baseline,
over several master seeds, and renders the success-rate curves to SVG.

Usage:
    python scripts/run_improvement_trend.py --out runs/trend --seeds 0 1 2
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sail.cli import main as cli_main
from sail.configs import RunConfig
from sail.harness import cmd_train
from sail.metrics import METRICS_HEADER


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/trend")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--rollouts", type=int, default=30)
    ap.add_argument("--filter", dest="filter_mode", default="oracle",
                    choices=("oracle", "none", "relabel"))
    args = ap.parse_args()

    out = Path(args.out)
    cfg = RunConfig(out=str(out))
    ckpt = out / "checkpoints"
    if not (ckpt / "ckpt_theta").exists():
        print("training initial models (one-time)...")
        cmd_train(cfg, out, progress=print)

    metrics_files = []
    for adaptation in ("ipa", "in_domain_cfg"):
        for seed in args.seeds:
            code = cli_main(
                [
                    "sail",
                    "--out", str(out),
                    "--seed", str(seed),
                    "--adaptation", adaptation,
                    "--filter", args.filter_mode,
                    "--iterations", str(args.iterations),
                    "--rollouts", str(args.rollouts),
                ]
            )
            if code != 0:
                return code
    for run_dir in sorted(out.glob("run_*")):
        metrics_files.append(str(run_dir / "metrics.csv"))

    chart = out / "trend.svg"
    code = cli_main(["plot", *metrics_files, "--out", str(chart)])
    print(f"curves: {chart}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
