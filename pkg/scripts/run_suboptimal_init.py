#!/usr/bin/env python3
"""Suboptimal-initialization experiment: demos from a 70/30 random/expert mix.

The in-domain model is trained on low-quality demonstrations, then improved
without any experience filtering. Compares the composed planner against the
in-domain-only baseline.

Usage:
    python scripts/run_suboptimal_init.py --out runs/subopt --seeds 0 1 2
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from sail.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/subopt")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--rollouts", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "subopt.json"
    cfg_path.write_text(
        json.dumps({"out": str(out), "corpus": {"demo_policy": "suboptimal"}}, indent=2)
    )

    if not (out / "checkpoints" / "ckpt_theta").exists():
        code = cli_main(["train", "--config", str(cfg_path)])
        if code != 0:
            return code

    for adaptation in ("ipa", "in_domain_cfg"):
        for seed in args.seeds:
            code = cli_main(
                [
                    "sail",
                    "--config", str(cfg_path),
                    "--seed", str(seed),
                    "--adaptation", adaptation,
                    "--filter", "none",
                    "--iterations", str(args.iterations),
                    "--rollouts", str(args.rollouts),
                ]
            )
            if code != 0:
                return code

    metrics_files = [str(p / "metrics.csv") for p in sorted(out.glob("run_*"))]
    chart = out / "subopt.svg"
    code = cli_main(["plot", *metrics_files, "--out", str(chart)])
    print(f"curves: {chart}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
