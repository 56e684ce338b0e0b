"""Visual planning rollout: synthesize plans, translate to actions, execute.

A rollout alternates between sampling a 9-frame plan from the latest real
observation and executing IDM-translated actions for a control-mode-dependent
number of plan segments before replanning. Recorded episodes contain only
real environment frames; plans steer, the record documents reality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import world
from .diffusion import (
    CompositionError,
    GuidanceConfig,
    NoiseSchedule,
    NoisyVideo,
    TaskPrompt,
    VideoPlan,
    cfg_epsilon,
    ddim_sample,
    ipa_epsilon,
    pa_epsilon,
    DEFAULT_DDIM_STEPS,
)
from .idm import IdmModel, predict_action
from .world import EpisodeRecord, WorldState

CONTROL_STRIDES = {"open": 8, "semi_open": 4, "closed": 1}


@dataclass(frozen=True)
class ControlMode:
    """How many plan segments execute before replanning: all, half, or one."""

    name: str = "semi_open"

    def __post_init__(self):
        if self.name not in CONTROL_STRIDES:
            raise ValueError(f"unknown control mode {self.name!r}")

    @property
    def stride(self) -> int:
        return CONTROL_STRIDES[self.name]


def synthesize_plan(
    guidance: GuidanceConfig,
    e_theta,
    e_general,
    obs: np.ndarray,
    prompt: TaskPrompt,
    sched: NoiseSchedule,
    seed: int,
    steps: int = DEFAULT_DDIM_STEPS,
) -> VideoPlan:
    """Dispatch to the composition matching `guidance.mode` and run DDIM."""
    if guidance.mode == "in_domain_cfg":
        if e_theta is None:
            raise CompositionError("in_domain_cfg planning requires the in-domain model")

        def score_fn(x, t):
            return cfg_epsilon(e_theta, NoisyVideo(x, t, obs), prompt, guidance.alpha)

    elif guidance.mode in ("ipa", "pa"):
        if e_theta is None or e_general is None:
            raise CompositionError(f"{guidance.mode} planning requires both denoisers")
        compose = ipa_epsilon if guidance.mode == "ipa" else pa_epsilon

        def score_fn(x, t):
            return compose(e_theta, e_general, NoisyVideo(x, t, obs), prompt, guidance)

    else:  # pragma: no cover - GuidanceConfig validates modes
        raise CompositionError(f"unknown adaptation mode {guidance.mode!r}")

    frames = e_theta.geometry[2] if e_theta is not None else 8
    plan = ddim_sample(score_fn, obs, prompt, sched, steps, seed, frames=frames)
    plan.mode = guidance.mode
    return plan


def plan_rollout(
    state: WorldState,
    guidance: GuidanceConfig,
    e_theta,
    e_general,
    idm: IdmModel,
    ctrl: ControlMode,
    sched: NoiseSchedule,
    rng_seed: int,
    ddim_steps: int = DEFAULT_DDIM_STEPS,
    horizon: int = world.HORIZON,
) -> EpisodeRecord:
    """Plan-follow until success or horizon; record real frames and actions."""
    frames = [world.render(state)]
    actions: list[np.ndarray] = []
    replan_steps: list[int] = []
    plan_idx = 0

    while not world.success(state) and state.step_count < horizon:
        obs = frames[-1]
        plan_seed = world.episode_seed(rng_seed, plan_idx)
        plan = synthesize_plan(
            guidance, e_theta, e_general, obs, state.task, sched, plan_seed, steps=ddim_steps
        )
        replan_steps.append(state.step_count)
        plan_idx += 1

        done = False
        for seg in range(ctrl.stride):
            for a in predict_action(idm, plan.frames[seg], plan.frames[seg + 1]):
                state = world.step(state, a)
                frames.append(world.render(state))
                actions.append(a.as_array())
                if world.success(state) or state.step_count >= horizon:
                    done = True
                    break
            if done:
                break

    return EpisodeRecord(
        frames=np.stack(frames),
        actions=np.stack(actions) if actions else np.zeros((0, 2), dtype=np.float32),
        task=state.task,
        success=world.success(state),
        seed=rng_seed,
        replan_steps=tuple(replan_steps),
    )


def save_plan(plan: VideoPlan, path) -> None:
    """Dump a plan as a text header plus raw frames in the episode layout."""
    frames = np.ascontiguousarray(plan.frames, dtype="<f4")
    n, h, w, _ = frames.shape
    header = f"plan {plan.mode} prompt={plan.prompt.text()!r} seed={plan.seed} frames={n} hw={h}x{w}\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(frames.tobytes())
