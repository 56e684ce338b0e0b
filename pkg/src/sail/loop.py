"""The self-adapting improvement loop: compose, roll out, filter, finetune.

Each iteration adapts the in-domain denoiser with the frozen general model,
collects N seeded rollouts per novel task (round-robin over evaluation
scenes), filters them, accumulates the growing dataset, and finetunes the
in-domain model on it. The general model is never updated.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn, world
from .diffusion import (
    Denoiser,
    GuidanceConfig,
    NoiseSchedule,
    TaskPrompt,
    train_step,
    DEFAULT_ALPHA,
    DEFAULT_DDIM_STEPS,
    DEFAULT_GAMMA,
)
from .idm import IdmModel, train_idm
from .metrics import METRICS_HEADER, MetricsRow
from .planner import ControlMode, plan_rollout
from .world import EpisodeRecord


@dataclass(frozen=True)
class SailConfig:
    iterations: int = 3  # K
    rollouts: int = 30  # N, per task per iteration
    filter_mode: str = "oracle"  # oracle | none | relabel
    adaptation_mode: str = "ipa"  # in_domain_cfg | ipa | pa
    include_initial_demos: bool = True
    finetune_steps: int = 2000
    finetune_lr: float = 1e-4
    finetune_batch: int = 8
    finetune_idm: bool = False
    guidance_alpha: float = DEFAULT_ALPHA
    guidance_gamma: float = DEFAULT_GAMMA
    ctrl: str = "semi_open"
    master_seed: int = 0
    novel_tasks: tuple[str, ...] = ("orange", "purple")
    ddim_steps: int = DEFAULT_DDIM_STEPS
    drop_prob: float = 0.1

    def __post_init__(self):
        if self.iterations < 1 or self.rollouts < 1:
            raise nn.ConfigError("iterations and rollouts must be >= 1")
        if self.finetune_steps < 1:
            raise nn.ConfigError("finetune_steps must be >= 1")
        if self.filter_mode not in ("oracle", "none", "relabel"):
            raise nn.ConfigError(f"unknown filter mode {self.filter_mode!r}")
        if self.adaptation_mode not in ("in_domain_cfg", "ipa", "pa"):
            raise nn.ConfigError(f"unknown adaptation mode {self.adaptation_mode!r}")
        if not self.novel_tasks:
            raise nn.ConfigError("novel task list must be non-empty")

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(
            alpha=self.guidance_alpha, gamma=self.guidance_gamma, mode=self.adaptation_mode
        )


@dataclass(frozen=True)
class TrainItem:
    """One finetuning unit: a real frame sequence and its (possibly relabeled) prompt."""

    frames: np.ndarray
    prompt: TaskPrompt


@dataclass
class IterationReport:
    iteration: int
    task_results: dict[str, tuple[int, int]]  # task -> (successes, rollouts)
    d_ini_size: int
    d_self_size: int
    d_size: int
    mean_episode_length: float
    wall_clock: float
    ckpt_id: str
    finetune_skipped: bool = False

    def success_rate(self) -> float:
        ok = sum(s for s, _ in self.task_results.values())
        n = sum(n for _, n in self.task_results.values())
        return ok / n if n else 0.0


def apply_filter(episodes: list[EpisodeRecord], mode: str) -> list[TrainItem]:
    """oracle: keep successes; none: keep all; relabel: prefix failures with `not`."""
    if mode == "oracle":
        return [TrainItem(ep.frames, ep.task) for ep in episodes if ep.success]
    if mode == "none":
        return [TrainItem(ep.frames, ep.task) for ep in episodes]
    if mode == "relabel":
        out = []
        for ep in episodes:
            prompt = ep.task if ep.success else TaskPrompt(("not", *ep.task.tokens))
            out.append(TrainItem(ep.frames, prompt))
        return out
    raise nn.ConfigError(f"unknown filter mode {mode!r}")


def demo_items(demos: list[EpisodeRecord]) -> list[TrainItem]:
    return [TrainItem(ep.frames, ep.task) for ep in demos]


def sample_window(
    item: TrainItem, rng: np.random.Generator, frame_skip: int, future: int
):
    """(cond, x0, prompt) window: the future stack is strided by the frame skip
    and clamps at the episode end (the world freezes once an episode stops)."""
    n = len(item.frames)
    t = int(rng.integers(0, max(n - 1, 1)))
    idx = np.minimum(t + frame_skip * np.arange(1, future + 1), n - 1)
    return item.frames[t], item.frames[idx], item.prompt


def train_denoiser_on_items(
    den: Denoiser,
    items: list[TrainItem],
    steps: int,
    lr: float,
    batch: int,
    seed: int,
    sched: NoiseSchedule,
    frame_skip: int,
    drop_prob: float = 0.1,
) -> list[float]:
    """Run `steps` minibatches of denoising training over window samples."""
    if not items:
        raise nn.TrainingError("no training items")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    future = den.geometry[2]
    losses = []
    for _ in range(steps):
        picks = rng.integers(0, len(items), size=batch)
        batch_items = [sample_window(items[i], rng, frame_skip, future) for i in picks]
        losses.append(train_step(den, batch_items, sched, rng, drop_prob, lr))
    return losses


def finetune(
    e_theta: Denoiser,
    items: list[TrainItem],
    steps: int,
    lr: float,
    seed: int,
    sched: NoiseSchedule,
    frame_skip: int,
    batch: int = 8,
    drop_prob: float = 0.1,
) -> list[float]:
    """Finetune the in-domain model; an empty dataset is a defined no-op.

    Optimizer moments are reset so every finetuning phase starts fresh.
    """
    if e_theta.role != "in_domain":
        raise nn.ConfigError(f"only the in-domain model is finetuned, got {e_theta.role!r}")
    if steps < 1:
        raise nn.ConfigError("finetune steps must be >= 1")
    if not items:
        return []
    e_theta.params.moments_m.clear()
    e_theta.params.moments_v.clear()
    return train_denoiser_on_items(
        e_theta, items, steps, lr, batch, seed, sched, frame_skip, drop_prob
    )


def model_digest(den: Denoiser) -> str:
    """Stable hash of the parameter arrays (frozen-prior check)."""
    h = hashlib.sha256()
    for name in sorted(den.params.arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(den.params.arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()


def rollout_threads() -> int:
    try:
        return max(1, int(os.environ.get("SAIL_THREADS", "1")))
    except ValueError:
        return 1


def run_sail(
    cfg: SailConfig,
    e_theta: Denoiser,
    e_general: Denoiser | None,
    idm: IdmModel,
    sched: NoiseSchedule,
    d_ini: list[EpisodeRecord] | None = None,
    out_dir: str | Path | None = None,
    on_iteration=None,
) -> list[IterationReport]:
    """Iterate compose -> rollout -> filter -> accumulate -> finetune.

    Every episode owns a private RNG stream keyed by (iteration, task,
    episode index), so results do not depend on rollout scheduling order.
    Reports and metrics rows are flushed after every iteration, including
    when a later iteration raises.
    """
    guidance = cfg.guidance()
    if guidance.mode in ("ipa", "pa") and e_general is None:
        raise nn.ConfigError(f"adaptation mode {guidance.mode!r} requires the general model")
    ctrl = ControlMode(cfg.ctrl)
    frozen_digest = model_digest(e_general) if e_general is not None else ""

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        run_meta = {
            "config": asdict(cfg),
            "general_digest": frozen_digest,
            "finetune_resets_optimizer": True,
            "idm_frame_skip": idm.frame_skip,
        }
        (out_path / "run.json").write_text(json.dumps(run_meta, indent=2, default=list))
        (out_path / "metrics.csv").write_text(METRICS_HEADER + "\n")

    dataset: list[TrainItem] = demo_items(d_ini) if (cfg.include_initial_demos and d_ini) else []
    d_ini_size = len(dataset)
    reports: list[IterationReport] = []
    task_combos = {task: world.novel_eval_combos(task) for task in cfg.novel_tasks}

    def one_rollout(args):
        it, task_idx, task, j = args
        combos = task_combos[task]
        target, scene = combos[j % len(combos)]
        ep_seed = world.episode_seed(cfg.master_seed, it, task_idx, j)
        state = world.reset(TaskPrompt((target,)), scene, ep_seed)
        return plan_rollout(
            state,
            guidance,
            e_theta,
            e_general,
            idm,
            ctrl,
            sched,
            ep_seed,
            ddim_steps=cfg.ddim_steps,
        )

    try:
        for it in range(cfg.iterations):
            t_start = time.perf_counter()
            jobs = [
                (it, task_idx, task, j)
                for task_idx, task in enumerate(cfg.novel_tasks)
                for j in range(cfg.rollouts)
            ]
            workers = rollout_threads()
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    episodes = list(pool.map(one_rollout, jobs))
            else:
                episodes = [one_rollout(j) for j in jobs]

            task_results: dict[str, tuple[int, int]] = {}
            for task_idx, task in enumerate(cfg.novel_tasks):
                chunk = episodes[task_idx * cfg.rollouts : (task_idx + 1) * cfg.rollouts]
                task_results[task] = (sum(e.success for e in chunk), cfg.rollouts)

            if e_general is not None and model_digest(e_general) != frozen_digest:
                raise nn.TrainingError("general model changed during the loop")

            new_items = apply_filter(episodes, cfg.filter_mode)
            dataset.extend(new_items)

            finetune_skipped = not dataset
            finetune(
                e_theta,
                dataset,
                cfg.finetune_steps,
                cfg.finetune_lr,
                world.episode_seed(cfg.master_seed, it, 9999),
                sched,
                idm.frame_skip,
                batch=cfg.finetune_batch,
                drop_prob=cfg.drop_prob,
            )
            if cfg.finetune_idm and episodes:
                refreshed = train_idm(
                    episodes,
                    k=idm.frame_skip,
                    epochs=1,
                    seed=world.episode_seed(cfg.master_seed, it, 8888),
                    hidden=idm.cfg.hidden,
                )
                idm.params = refreshed.params

            report = IterationReport(
                iteration=it,
                task_results=task_results,
                d_ini_size=d_ini_size,
                d_self_size=len(dataset) - d_ini_size,
                d_size=len(dataset),
                mean_episode_length=float(np.mean([e.length for e in episodes])),
                wall_clock=time.perf_counter() - t_start,
                ckpt_id=model_digest(e_theta),
                finetune_skipped=finetune_skipped,
            )
            reports.append(report)
            if out_path is not None:
                _persist_iteration(out_path, cfg, it, episodes, e_theta, report)
            if on_iteration is not None:
                on_iteration(report)
    except Exception:
        # partial reports are already flushed incrementally
        raise
    return reports


def _persist_iteration(out_path: Path, cfg: SailConfig, it: int, episodes, e_theta, report):
    it_dir = out_path / f"iter_{it}"
    ep_dir = it_dir / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        world.save_episode(ep, ep_dir / f"ep_{i:05d}.ep")
    nn.save_checkpoint(e_theta.params, it_dir / "ckpt_theta")
    with open(out_path / "metrics.csv", "a") as f:
        for task, (ok, n) in report.task_results.items():
            task_eps = [e for e in episodes if e.task.tokens[-1] == task]
            row = MetricsRow(
                iteration=it,
                task=task,
                adaptation_mode=cfg.adaptation_mode,
                filter_mode=cfg.filter_mode,
                n_rollouts=n,
                n_success=ok,
                success_rate=ok / n,
                mean_episode_length=float(np.mean([e.length for e in task_eps])) if task_eps else 0.0,
                seed=cfg.master_seed,
            )
            f.write(row.to_csv() + "\n")
