"""Operational shell: corpus building, initial training, evaluation, plots.

Model files pair the flat array checkpoint with a small JSON sidecar holding
architecture and role metadata, so a checkpoint directory is self-describing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import nn, world
from .configs import RunConfig
from .diffusion import (
    Denoiser,
    GuidanceConfig,
    NoiseSchedule,
    TaskPrompt,
    VOCAB,
    make_schedule,
)
from .idm import IdmModel, train_idm
from .loop import demo_items, train_denoiser_on_items
from .metrics import METRICS_HEADER, MetricsRow
from .nn import ConfigError, NetConfig
from .planner import ControlMode, plan_rollout
from .world import EpisodeRecord, FRAME_HW


class StartupError(RuntimeError):
    """Missing or unreadable run prerequisites (checkpoints, metrics files)."""


def make_run_schedule(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def denoiser_net_config(cfg: RunConfig, seed: int) -> NetConfig:
    stack = cfg.denoiser.frames * FRAME_HW * FRAME_HW * 3
    cond = FRAME_HW * FRAME_HW * 3
    return NetConfig(
        in_width=stack + cond,
        hidden=tuple(cfg.denoiser.hidden),
        out_width=stack,
        t_width=cfg.denoiser.t_width,
        c_width=cfg.denoiser.c_width,
        seed=seed,
    )


def build_corpora(cfg: RunConfig) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """In-domain demos over seen-color combos; general demos over all colors."""
    in_domain = world.collect_demos(
        world.seen_task_combos(),
        cfg.corpus.demos_per_task,
        cfg.corpus.demo_policy,
        world.episode_seed(cfg.seed, 1),
    )
    general = world.collect_demos(
        world.all_task_combos(),
        cfg.corpus.general_demos_per_task,
        "expert",
        world.episode_seed(cfg.seed, 2),
        y_band=tuple(cfg.corpus.general_y_band),
    )
    return in_domain, general


def train_initial_models(cfg: RunConfig, progress=None):
    """Train the in-domain denoiser, the general denoiser, and the IDM."""
    sched = make_run_schedule(cfg)
    in_domain, general = build_corpora(cfg)

    e_theta = Denoiser(
        "in_domain",
        denoiser_net_config(cfg, world.episode_seed(cfg.seed, 11)),
        sched,
        geometry=(FRAME_HW, FRAME_HW, cfg.denoiser.frames),
    )
    theta_losses = train_denoiser_on_items(
        e_theta,
        demo_items(in_domain),
        cfg.train.theta_steps,
        cfg.train.lr,
        cfg.train.batch,
        world.episode_seed(cfg.seed, 12),
        sched,
        cfg.idm.frame_skip,
        cfg.train.drop_prob,
    )
    if progress:
        progress(f"in-domain model trained: loss {theta_losses[0]:.4f} -> {theta_losses[-1]:.4f}")

    e_general = Denoiser(
        "general",
        denoiser_net_config(cfg, world.episode_seed(cfg.seed, 21)),
        sched,
        geometry=(FRAME_HW, FRAME_HW, cfg.denoiser.frames),
    )
    general_losses = train_denoiser_on_items(
        e_general,
        demo_items(general),
        cfg.train.general_steps,
        cfg.train.lr,
        cfg.train.batch,
        world.episode_seed(cfg.seed, 22),
        sched,
        cfg.idm.frame_skip,
        cfg.train.drop_prob,
    )
    if progress:
        progress(
            f"general model trained: loss {general_losses[0]:.4f} -> {general_losses[-1]:.4f}"
        )

    idm = train_idm(
        general,
        k=cfg.idm.frame_skip,
        epochs=cfg.idm.epochs,
        lr=cfg.idm.lr,
        seed=world.episode_seed(cfg.seed, 31),
        hidden=tuple(cfg.idm.hidden),
        batch=cfg.idm.batch,
    )
    if progress:
        progress("inverse dynamics model trained")
    return e_theta, e_general, idm, {"theta": theta_losses, "general": general_losses}


def save_denoiser(den: Denoiser, path: str | Path) -> None:
    path = Path(path)
    nn.save_checkpoint(den.params, path)
    meta = {
        "kind": "denoiser",
        "role": den.role,
        "geometry": list(den.geometry),
        "net": asdict(den.cfg),
        "vocab": list(den.vocab),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, default=list))


def load_denoiser(path: str | Path, sched: NoiseSchedule) -> Denoiser:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    if not path.exists():
        raise StartupError(f"missing checkpoint file: {path}")
    if not meta_path.exists():
        raise StartupError(f"missing checkpoint sidecar: {meta_path}")
    meta = json.loads(meta_path.read_text())
    net = meta["net"]
    net["hidden"] = tuple(net["hidden"])
    cfg = NetConfig(**net)
    return Denoiser(
        meta["role"],
        cfg,
        sched,
        geometry=tuple(meta["geometry"]),
        params=nn.load_checkpoint(path),
        vocab=tuple(meta["vocab"]),
    )


def save_idm(idm: IdmModel, path: str | Path) -> None:
    path = Path(path)
    nn.save_checkpoint(idm.params, path)
    meta = {
        "kind": "idm",
        "frame_skip": idm.frame_skip,
        "bound": idm.bound,
        "net": asdict(idm.cfg),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, default=list))


def load_idm(path: str | Path) -> IdmModel:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    if not path.exists():
        raise StartupError(f"missing checkpoint file: {path}")
    if not meta_path.exists():
        raise StartupError(f"missing checkpoint sidecar: {meta_path}")
    meta = json.loads(meta_path.read_text())
    net = meta["net"]
    net["hidden"] = tuple(net["hidden"])
    return IdmModel(
        cfg=NetConfig(**net),
        params=nn.load_checkpoint(path),
        frame_skip=meta["frame_skip"],
        bound=meta["bound"],
    )


def _write_loss_csv(path: Path, losses: list[float]) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for i, v in enumerate(losses):
            f.write(f"{i},{v:.6f}\n")


def cmd_train(cfg: RunConfig, out_dir: str | Path, progress=None) -> Path:
    """Build corpora, train all three models, write checkpoints and loss logs."""
    out = Path(out_dir) / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    e_theta, e_general, idm, losses = train_initial_models(cfg, progress=progress)
    save_denoiser(e_theta, out / "ckpt_theta")
    save_denoiser(e_general, out / "ckpt_general")
    save_idm(idm, out / "ckpt_idm")
    _write_loss_csv(out / "loss_theta.csv", losses["theta"])
    _write_loss_csv(out / "loss_general.csv", losses["general"])
    (out / "train_config.json").write_text(cfg.to_json())
    return out


def load_models(cfg: RunConfig, ckpt_dir: str | Path):
    sched = make_run_schedule(cfg)
    ckpt = Path(ckpt_dir)
    e_theta = load_denoiser(ckpt / "ckpt_theta", sched)
    e_general = load_denoiser(ckpt / "ckpt_general", sched)
    idm = load_idm(ckpt / "ckpt_idm")
    return sched, e_theta, e_general, idm


def evaluate(
    cfg: RunConfig,
    e_theta,
    e_general,
    idm,
    sched,
    tasks: tuple[str, ...],
    n: int,
    seed: int,
    adaptation_mode: str,
    out_dir: str | Path | None = None,
    iteration: int = 0,
) -> list[MetricsRow]:
    """Pure evaluation: N seeded rollouts per task, no finetuning."""
    guidance = GuidanceConfig(
        alpha=cfg.sail.guidance_alpha, gamma=cfg.sail.guidance_gamma, mode=adaptation_mode
    )
    ctrl = ControlMode(cfg.sail.ctrl)
    rows = []
    ep_root = None
    if out_dir is not None:
        ep_root = Path(out_dir) / "episodes"
        ep_root.mkdir(parents=True, exist_ok=True)
    for task_idx, task in enumerate(tasks):
        combos = world.novel_eval_combos(task) if task in world.NOVEL_COLORS else [
            c for c in world.seen_task_combos() if c[0] == task
        ]
        episodes = []
        for j in range(n):
            target, scene = combos[j % len(combos)]
            ep_seed = world.episode_seed(seed, task_idx, j)
            state = world.reset(TaskPrompt((target,)), scene, ep_seed)
            episodes.append(
                plan_rollout(
                    state,
                    guidance,
                    e_theta,
                    e_general,
                    idm,
                    ctrl,
                    sched,
                    ep_seed,
                    ddim_steps=cfg.sail.ddim_steps,
                )
            )
        if ep_root is not None:
            for j, ep in enumerate(episodes):
                world.save_episode(ep, ep_root / f"{task}_{j:05d}.ep")
        ok = sum(e.success for e in episodes)
        rows.append(
            MetricsRow(
                iteration=iteration,
                task=task,
                adaptation_mode=adaptation_mode,
                filter_mode="none",
                n_rollouts=n,
                n_success=ok,
                success_rate=ok / n,
                mean_episode_length=float(np.mean([e.length for e in episodes])),
                seed=seed,
            )
        )
    return rows


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:8]


PLOT_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_metrics_svg(rows: list[MetricsRow], width: int = 640, height: int = 420) -> str:
    """Success-rate-vs-iteration chart: one mean line per (adaptation, filter)
    with a min-max band across seeds. Deterministic output bytes."""
    ml, mr, mt, mb = 56, 16, 16, 44
    px = lambda u: ml + u * (width - ml - mr)
    py = lambda v: height - mb - v * (height - mt - mb)

    iters = sorted({r.iteration for r in rows})
    span = max(iters[-1] - iters[0], 1) if iters else 1
    x_of = lambda it: px((it - iters[0]) / span) if len(iters) > 1 else px(0.5)

    groups: dict[tuple[str, str], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.adaptation_mode, r.filter_mode), []).append(r)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{py(0):.2f}" x2="{width - mr}" y2="{py(0):.2f}" stroke="black"/>',
        f'<line x1="{ml}" y1="{py(0):.2f}" x2="{ml}" y2="{mt}" stroke="black"/>',
        f'<text x="{(ml + width - mr) / 2:.2f}" y="{height - 10}" text-anchor="middle">iteration</text>',
        f'<text x="14" y="{(mt + py(0)) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(mt + py(0)) / 2:.2f})">success rate</text>',
    ]
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(
            f'<text x="{ml - 6}" y="{py(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>'
        )
        parts.append(
            f'<line x1="{ml - 4}" y1="{py(v):.2f}" x2="{ml}" y2="{py(v):.2f}" stroke="black"/>'
        )
    for it in iters:
        parts.append(
            f'<text x="{x_of(it):.2f}" y="{py(0) + 18:.2f}" text-anchor="middle">{it}</text>'
        )

    for gi, key in enumerate(sorted(groups)):
        color = PLOT_COLORS[gi % len(PLOT_COLORS)]
        by_iter: dict[int, list[float]] = {}
        for r in groups[key]:
            by_iter.setdefault(r.iteration, []).append(r.success_rate)
        its = sorted(by_iter)
        means = [float(np.mean(by_iter[i])) for i in its]
        lows = [min(by_iter[i]) for i in its]
        highs = [max(by_iter[i]) for i in its]

        if len(its) > 1 and any(h > l for l, h in zip(lows, highs)):
            band = " ".join(f"{x_of(i):.2f},{py(h):.2f}" for i, h in zip(its, highs))
            band += " " + " ".join(
                f"{x_of(i):.2f},{py(l):.2f}" for i, l in zip(reversed(its), reversed(lows))
            )
            parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2"/>')
        if len(its) == 1:
            parts.append(
                f'<circle cx="{x_of(its[0]):.2f}" cy="{py(means[0]):.2f}" r="4" fill="{color}"/>'
            )
        else:
            pts = " ".join(f"{x_of(i):.2f},{py(m):.2f}" for i, m in zip(its, means))
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
        label = f"{key[0]} / filter={key[1]}"
        parts.append(
            f'<text x="{width - mr - 4}" y="{mt + 16 * (gi + 1)}" text-anchor="end" '
            f'fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def inspect_episode_text(path: str | Path) -> str:
    rec = world.load_episode(path)
    lines = [
        f"episode {Path(path).name}",
        f"  prompt:  {rec.task.text()}",
        f"  success: {rec.success}",
        f"  seed:    {rec.seed}",
        f"  frames:  {len(rec.frames)} of {rec.frames.shape[1]}x{rec.frames.shape[2]}",
        f"  actions: {len(rec.actions)}"
        + (
            f" (|dx| mean {np.abs(rec.actions[:, 0]).mean():.4f}, "
            f"|dy| mean {np.abs(rec.actions[:, 1]).mean():.4f})"
            if len(rec.actions)
            else ""
        ),
        f"  pixel range: [{rec.frames.min():.3f}, {rec.frames.max():.3f}]",
    ]
    return "\n".join(lines)
