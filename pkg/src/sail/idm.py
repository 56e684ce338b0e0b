"""Inverse dynamics: frame pair -> the displacement that produced it.

One model is trained on general interaction data and shared across all tasks.
It predicts the cumulative effector displacement over a `frame_skip`-step gap
and splits it into equal per-step actions for execution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import NetConfig, ParamStore
from .world import ACTION_BOUND, Action, EpisodeRecord, FRAME_HW


class DataError(ValueError):
    """Dataset yields no usable training pairs."""


@dataclass
class IdmModel:
    cfg: NetConfig
    params: ParamStore
    frame_skip: int
    bound: float = ACTION_BOUND


def _pairs_from_episodes(dataset: list[EpisodeRecord], k: int):
    xs, ys = [], []
    for rec in dataset:
        n = len(rec.actions)
        for t in range(0, n - k + 1):
            a = rec.frames[t].reshape(-1)
            b = rec.frames[t + k].reshape(-1)
            xs.append(np.concatenate([a, b]))
            ys.append(rec.actions[t : t + k].sum(axis=0))
    if not xs:
        raise DataError(f"no (frame, frame+{k}) pairs in dataset")
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


def train_idm(
    dataset: list[EpisodeRecord],
    k: int = 4,
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    hidden: tuple[int, ...] = (256, 256),
    batch: int = 64,
) -> IdmModel:
    """MSE-regress cumulative displacement from flattened frame pairs."""
    x, y = _pairs_from_episodes(dataset, k)
    cfg = NetConfig(
        in_width=2 * FRAME_HW * FRAME_HW * 3,
        hidden=hidden,
        out_width=2,
        seed=seed,
    )
    params = nn.init_network(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    n = len(x)
    for epoch in range(epochs):
        # cosine decay to 1% of the base rate; the tail drives the pair
        # memorization below Adam's constant-rate noise floor
        lr_e = lr * (0.01 + 0.99 * 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs - 1, 1))))
        order = rng.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            xb, yb = x[idx], y[idx]
            out, cache = nn.forward_with_cache(params, xb)
            grad_out = (out - yb) * (2.0 / out.size)
            grads, _, _, _ = nn.backward(params, cache, grad_out)
            nn.adam_step(params, grads, lr_e)
    return IdmModel(cfg=cfg, params=params, frame_skip=k)


def idm_mse(model: IdmModel, dataset: list[EpisodeRecord]) -> float:
    """Mean squared displacement error over a dataset's pairs."""
    x, y = _pairs_from_episodes(dataset, model.frame_skip)
    out = nn.forward(model.params, x)
    return float(np.mean((out - y) ** 2))


def predict_action(model: IdmModel, f_a: np.ndarray, f_b: np.ndarray) -> list[Action]:
    """Total displacement between two frames, split into k bounded sub-actions."""
    if f_a.shape != f_b.shape:
        raise nn.DimensionError(f"frame shapes differ: {f_a.shape} vs {f_b.shape}")
    x = np.concatenate([f_a.reshape(-1), f_b.reshape(-1)]).astype(np.float32)
    total = nn.forward(model.params, x)
    k = model.frame_skip
    total = np.clip(total, -k * model.bound, k * model.bound)
    sub = total / k
    return [Action(sub[0], sub[1]) for _ in range(k)]
