"""Command-line interface: train, sail, eval, plot, inspect-episode.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, world
from .configs import apply_overrides, load_config
from .loop import run_sail
from .metrics import METRICS_HEADER, MetricsError, parse_metrics
from .nn import ConfigError
from .world import TaskError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", type=str, default=None, help="output directory")


def _add_loop_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--adaptation", choices=("in_domain_cfg", "ipa", "pa"), default=None)
    p.add_argument("--filter", dest="filter_mode", choices=("oracle", "none", "relabel"), default=None)
    p.add_argument("--ctrl", choices=("open", "semi_open", "closed"), default=None)
    p.add_argument("--iterations", type=int, default=None, help="loop iterations K")
    p.add_argument("--rollouts", type=int, default=None, help="rollouts per task N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sail", description="desk-scale self-improving visual planner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="build demo corpora and train all models")
    _add_common(p_train)

    p_sail = sub.add_parser("sail", help="run the self-improvement loop")
    _add_common(p_sail)
    _add_loop_flags(p_sail)
    p_sail.add_argument("--ckpt", type=str, default=None, help="checkpoint directory (default <out>/checkpoints)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint without finetuning")
    _add_common(p_eval)
    p_eval.add_argument("--ckpt", type=str, default=None)
    p_eval.add_argument("--adaptation", choices=("in_domain_cfg", "ipa", "pa"), default="ipa")
    p_eval.add_argument("--tasks", type=str, default="orange,purple", help="comma-separated colors")
    p_eval.add_argument("--rollouts", type=int, default=30)

    p_plot = sub.add_parser("plot", help="render metrics CSVs to an SVG chart")
    p_plot.add_argument("metrics", nargs="+", help="metrics.csv files")
    p_plot.add_argument("--out", type=str, default="metrics.svg")

    p_inspect = sub.add_parser("inspect-episode", help="pretty-print an episode file")
    p_inspect.add_argument("episode", type=str)
    return parser


def _resolve(args) -> tuple:
    cfg = load_config(args.config)
    overrides = {}
    for name in ("seed",):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if getattr(args, "out", None):
        overrides["out"] = args.out
    for cli_name, field in (
        ("adaptation", "adaptation_mode"),
        ("filter_mode", "filter_mode"),
        ("ctrl", "ctrl"),
        ("iterations", "iterations"),
        ("rollouts", "rollouts"),
    ):
        if getattr(args, cli_name, None) is not None:
            overrides[field] = getattr(args, cli_name)
    cfg = apply_overrides(cfg, **overrides)
    return cfg


def _cmd_train(args) -> int:
    cfg = _resolve(args)
    out = harness.cmd_train(cfg, cfg.out, progress=lambda m: print(m, flush=True))
    print(f"checkpoints written to {out}")
    return EXIT_OK


def _cmd_sail(args) -> int:
    cfg = _resolve(args)
    ckpt_dir = args.ckpt or str(Path(cfg.out) / "checkpoints")
    sched, e_theta, e_general, idm = harness.load_models(cfg, ckpt_dir)
    in_domain, _ = harness.build_corpora(cfg)
    run_name = (
        f"run_{cfg.sail.adaptation_mode}_{cfg.sail.filter_mode}"
        f"_s{cfg.sail.master_seed}_{harness.config_digest(cfg)}"
    )
    run_dir = Path(cfg.out) / run_name
    reports = run_sail(
        cfg.sail,
        e_theta,
        e_general,
        idm,
        sched,
        d_ini=in_domain,
        out_dir=run_dir,
        on_iteration=lambda r: print(
            f"iteration {r.iteration}: success {r.success_rate():.3f} "
            f"|D|={r.d_size} ({r.wall_clock:.1f}s)",
            flush=True,
        ),
    )
    print(f"run directory: {run_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt_dir = args.ckpt or str(Path(cfg.out) / "checkpoints")
    sched, e_theta, e_general, idm = harness.load_models(cfg, ckpt_dir)
    tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
    out_dir = Path(cfg.out) / f"eval_{args.adaptation}_s{cfg.sail.master_seed}"
    rows = harness.evaluate(
        cfg,
        e_theta,
        e_general,
        idm,
        sched,
        tasks,
        args.rollouts,
        cfg.sail.master_seed,
        args.adaptation,
        out_dir=out_dir,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in rows:
            f.write(r.to_csv() + "\n")
    for r in rows:
        print(f"{r.task}: {r.n_success}/{r.n_rollouts} = {r.success_rate:.3f}")
    print(f"eval written to {out_dir}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    rows = []
    for path in args.metrics:
        p = Path(path)
        if not p.exists():
            raise harness.StartupError(f"missing metrics file: {p}")
        rows.extend(parse_metrics(p.read_text()))
    svg = harness.render_metrics_svg(rows)
    Path(args.out).write_text(svg)
    print(f"chart written to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    p = Path(args.episode)
    if not p.exists():
        raise harness.StartupError(f"missing episode file: {p}")
    print(harness.inspect_episode_text(p))
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "sail": _cmd_sail,
    "eval": _cmd_eval,
    "plot": _cmd_plot,
    "inspect-episode": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TaskError, MetricsError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
