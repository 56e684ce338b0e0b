"""ColorWorld: a deterministic 2-D tabletop push environment.

An effector and three distinctly colored objects live on the unit square.
The task is to push the prompted color past a goal line. Frames are 16x16
RGB renders; scripted expert and 70/30-suboptimal policies generate
demonstration episodes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .diffusion import TaskPrompt

EPISODE_MAGIC = b"SAILEP01"

FRAME_HW = 16
HORIZON = 40
ACTION_BOUND = 0.08
CONTACT_RADIUS = 0.09
GOAL_Y = 0.85
MIN_OBJECT_GAP = 0.12
EFFECTOR_START = (0.5, 0.05)
OBJECT_X_RANGE = (0.12, 0.88)
OBJECT_Y_BAND = (0.15, 0.5)
STAGING_OFFSET = 0.07
STAGING_TOLERANCE = 0.02
EXPERT_JITTER = 0.005
SUBOPTIMAL_RANDOM_PROB = 0.7

PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "pink": (1.0, 0.4, 0.7),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.8),
}
SEEN_COLORS = ("red", "green", "blue", "pink")
NOVEL_COLORS = ("orange", "purple")


class TaskError(ValueError):
    """Task color not present in the requested scene."""


class EpisodeError(RuntimeError):
    """Stepping past the horizon or other episode bookkeeping violations."""


@dataclass(frozen=True)
class Action:
    """Effector displacement, clipped componentwise to the action bound."""

    dx: float
    dy: float

    def __post_init__(self):
        object.__setattr__(self, "dx", float(np.clip(self.dx, -ACTION_BOUND, ACTION_BOUND)))
        object.__setattr__(self, "dy", float(np.clip(self.dy, -ACTION_BOUND, ACTION_BOUND)))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy], dtype=np.float32)


@dataclass(frozen=True)
class WorldState:
    effector: tuple[float, float]
    objects: tuple[tuple[str, tuple[float, float]], ...]
    step_count: int
    task: TaskPrompt
    seed: int

    def target_color(self) -> str:
        for tok in self.task.tokens:
            if tok in PALETTE:
                return tok
        raise TaskError(f"prompt {self.task.tokens} names no color")

    def target_position(self) -> tuple[float, float]:
        color = self.target_color()
        for c, pos in self.objects:
            if c == color:
                return pos
        raise TaskError(f"target color {color!r} not in scene")


def reset(
    task: TaskPrompt,
    scene_colors: tuple[str, str, str],
    seed: int,
    y_band: tuple[float, float] = OBJECT_Y_BAND,
) -> WorldState:
    """Seeded scene: effector at the start pad, objects in the placement band.

    Placement is rejection-sampled until all pairwise object distances are at
    least MIN_OBJECT_GAP.
    """
    if len(set(scene_colors)) != len(scene_colors):
        raise TaskError(f"scene colors must be distinct, got {scene_colors}")
    for c in scene_colors:
        if c not in PALETTE:
            raise TaskError(f"unknown color {c!r}")
    target = [t for t in task.tokens if t in PALETTE]
    if not target or target[0] not in scene_colors:
        raise TaskError(f"task {task.tokens} names no color in scene {scene_colors}")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    positions: list[np.ndarray] = []
    while len(positions) < len(scene_colors):
        cand = np.array(
            [
                rng.uniform(*OBJECT_X_RANGE),
                rng.uniform(*y_band),
            ]
        )
        if all(np.linalg.norm(cand - p) >= MIN_OBJECT_GAP for p in positions):
            positions.append(cand)
    objects = tuple(
        (c, (float(p[0]), float(p[1]))) for c, p in zip(scene_colors, positions)
    )
    return WorldState(
        effector=EFFECTOR_START,
        objects=objects,
        step_count=0,
        task=task,
        seed=seed,
    )


def step(s: WorldState, a: Action) -> WorldState:
    """Move the effector by the clipped action; drag the nearest contacted object.

    Contact is checked against the effector's NEW position; at most one object
    (the nearest within the contact radius) is displaced by the same action,
    then clipped to the arena.
    """
    if s.step_count >= HORIZON:
        raise EpisodeError(f"episode already at horizon {HORIZON}")
    move = a.as_array().astype(np.float64)
    eff = np.clip(np.array(s.effector) + move, 0.0, 1.0)

    nearest_idx = -1
    nearest_dist = CONTACT_RADIUS
    for i, (_, pos) in enumerate(s.objects):
        d = float(np.linalg.norm(np.array(pos) - eff))
        if d < nearest_dist:
            nearest_dist = d
            nearest_idx = i

    objects = list(s.objects)
    if nearest_idx >= 0:
        color, pos = objects[nearest_idx]
        new_pos = np.clip(np.array(pos) + move, 0.0, 1.0)
        objects[nearest_idx] = (color, (float(new_pos[0]), float(new_pos[1])))

    return replace(
        s,
        effector=(float(eff[0]), float(eff[1])),
        objects=tuple(objects),
        step_count=s.step_count + 1,
    )


def success(s: WorldState) -> bool:
    """Oracle predicate: the target object has crossed the goal line."""
    return s.target_position()[1] >= GOAL_Y


def _cell(p: float) -> int:
    return int(np.clip(np.floor(p * FRAME_HW), 0, FRAME_HW - 1))


def render(s: WorldState) -> np.ndarray:
    """16x16x3 frame: 3x3 object blocks, then a 2x2 white effector block on top."""
    img = np.zeros((FRAME_HW, FRAME_HW, 3), dtype=np.float32)
    for color, (x, y) in s.objects:
        cx, cy = _cell(x), _cell(y)
        img[max(cy - 1, 0) : cy + 2, max(cx - 1, 0) : cx + 2] = PALETTE[color]
    ex, ey = _cell(s.effector[0]), _cell(s.effector[1])
    img[ey : ey + 2, ex : ex + 2] = 1.0
    return img


def expert_action(s: WorldState, rng: np.random.Generator) -> Action:
    """Two-phase scripted controller with small Gaussian jitter.

    Phase 1 steers to a staging point just below the target; once within
    tolerance, phase 2 pushes straight up at full speed.
    """
    eff = np.array(s.effector)
    tx, ty = s.target_position()
    staging = np.array([tx, ty - STAGING_OFFSET])
    if np.linalg.norm(staging - eff) > STAGING_TOLERANCE:
        raw = staging - eff
    else:
        raw = np.array([0.0, ACTION_BOUND])
    raw = np.clip(raw, -ACTION_BOUND, ACTION_BOUND)
    raw = raw + rng.normal(0.0, EXPERT_JITTER, size=2)
    return Action(raw[0], raw[1])


def suboptimal_action(s: WorldState, rng: np.random.Generator) -> Action:
    """70% uniform random action, 30% the expert action."""
    if rng.random() < SUBOPTIMAL_RANDOM_PROB:
        d = rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=2)
        return Action(d[0], d[1])
    return expert_action(s, rng)


@dataclass
class EpisodeRecord:
    """One rollout: real frames, executed actions, prompt, oracle outcome."""

    frames: np.ndarray  # (n+1, H, W, 3)
    actions: np.ndarray  # (n, 2)
    task: TaskPrompt
    success: bool
    seed: int
    replan_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.frames) != len(self.actions) + 1:
            raise EpisodeError(
                f"frame/action mismatch: {len(self.frames)} frames, {len(self.actions)} actions"
            )

    @property
    def length(self) -> int:
        return len(self.actions)


def run_episode(
    state: WorldState,
    policy,
    rng: np.random.Generator,
    horizon: int = HORIZON,
) -> EpisodeRecord:
    """Drive `policy(state, rng)` until success or horizon, recording renders."""
    frames = [render(state)]
    actions: list[np.ndarray] = []
    while not success(state) and state.step_count < horizon:
        a = policy(state, rng)
        state = step(state, a)
        frames.append(render(state))
        actions.append(a.as_array())
    return EpisodeRecord(
        frames=np.stack(frames),
        actions=np.stack(actions) if actions else np.zeros((0, 2), dtype=np.float32),
        task=state.task,
        success=success(state),
        seed=state.seed,
    )


def seen_task_combos() -> list[tuple[str, tuple[str, str, str]]]:
    """All 12 (target, 3-color scene) combinations over the seen palette."""
    out = []
    for scene in combinations(SEEN_COLORS, 3):
        for target in scene:
            out.append((target, scene))
    return out


def all_task_combos() -> list[tuple[str, tuple[str, str, str]]]:
    """All 60 (target, scene) combinations over the full six-color palette."""
    out = []
    for scene in combinations(PALETTE.keys(), 3):
        for target in scene:
            out.append((target, scene))
    return out


def novel_eval_combos(novel_color: str) -> list[tuple[str, tuple[str, str, str]]]:
    """Evaluation scenes: the novel color plus every pair of seen colors."""
    return [
        (novel_color, (novel_color, a, b)) for a, b in combinations(SEEN_COLORS, 2)
    ]


def episode_seed(*key: int) -> int:
    """Stable 64-bit stream id for an episode keyed by run indices."""
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


def collect_demos(
    task_combos: list[tuple[str, tuple[str, str, str]]],
    n_per_task: int,
    policy_name: str,
    seed: int,
    y_band: tuple[float, float] = OBJECT_Y_BAND,
) -> list[EpisodeRecord]:
    """Seeded demonstration set; each record carries its oracle success flag."""
    if n_per_task < 1:
        raise ValueError(f"n_per_task must be >= 1, got {n_per_task}")
    policy = {"expert": expert_action, "suboptimal": suboptimal_action}[policy_name]
    records = []
    for combo_idx, (target, scene) in enumerate(task_combos):
        for j in range(n_per_task):
            ep_seed = episode_seed(seed, combo_idx, j)
            state = reset(TaskPrompt((target,)), scene, ep_seed, y_band=y_band)
            rng = np.random.default_rng(np.random.SeedSequence((ep_seed, 1)))
            records.append(run_episode(state, policy, rng))
    return records


def save_episode(rec: EpisodeRecord, path) -> None:
    """SAILEP01 layout: header, frames, actions, prompt, success byte, seed."""
    frames = np.ascontiguousarray(rec.frames, dtype="<f4")
    actions = np.ascontiguousarray(rec.actions, dtype="<f4")
    n_frames, h, w, _ = frames.shape
    prompt_raw = rec.task.text().encode("utf-8")
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<IIII", h, w, n_frames, len(actions)))
        f.write(frames.tobytes())
        f.write(actions.tobytes())
        f.write(struct.pack("<I", len(prompt_raw)))
        f.write(prompt_raw)
        f.write(struct.pack("<B", 1 if rec.success else 0))
        f.write(struct.pack("<Q", rec.seed & 0xFFFFFFFFFFFFFFFF))


def load_episode(path) -> EpisodeRecord:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != EPISODE_MAGIC:
        raise EpisodeError(f"{path}: bad magic {blob[:8]!r}")
    h, w, n_frames, n_actions = struct.unpack_from("<IIII", blob, 8)
    pos = 24
    fsize = n_frames * h * w * 3 * 4
    frames = np.frombuffer(blob[pos : pos + fsize], dtype="<f4").reshape(n_frames, h, w, 3).copy()
    pos += fsize
    asize = n_actions * 2 * 4
    actions = np.frombuffer(blob[pos : pos + asize], dtype="<f4").reshape(n_actions, 2).copy()
    pos += asize
    (plen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    prompt = TaskPrompt.parse(blob[pos : pos + plen].decode("utf-8"))
    pos += plen
    (ok,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    (seed,) = struct.unpack_from("<Q", blob, pos)
    return EpisodeRecord(
        frames=frames,
        actions=actions,
        task=prompt,
        success=bool(ok),
        seed=int(seed),
    )
