"""Plan synthesis dispatch, control-loop accounting, rollout recording."""

import numpy as np
import pytest

from sail import idm as idm_mod
from sail import world
from sail.diffusion import (
    CompositionError,
    Denoiser,
    GuidanceConfig,
    TaskPrompt,
    cfg_epsilon,
    ddim_sample,
    make_schedule,
    NoisyVideo,
)
from sail.nn import NetConfig
from sail.planner import ControlMode, plan_rollout, save_plan, synthesize_plan


@pytest.fixture(scope="module")
def sched():
    return make_schedule(100, 1e-4, 0.02)


def small_denoiser(role, seed, sched):
    cfg = NetConfig(
        in_width=8 * 16 * 16 * 3 + 16 * 16 * 3,
        hidden=(24,),
        out_width=8 * 16 * 16 * 3,
        t_width=8,
        c_width=4,
        seed=seed,
    )
    return Denoiser(role, cfg, sched, geometry=(16, 16, 8))


@pytest.fixture(scope="module")
def models(sched):
    e_theta = small_denoiser("in_domain", 1, sched)
    e_general = small_denoiser("general", 2, sched)
    demos = world.collect_demos(world.seen_task_combos()[:2], 3, "expert", seed=5)
    idm = idm_mod.train_idm(demos, k=4, epochs=2, lr=1e-3, seed=0, hidden=(16,))
    return e_theta, e_general, idm


@pytest.fixture()
def obs():
    state = world.reset(TaskPrompt(("red",)), ("red", "green", "blue"), seed=11)
    return world.render(state)


def test_control_mode_strides():
    assert ControlMode("open").stride == 8
    assert ControlMode("semi_open").stride == 4
    assert ControlMode("closed").stride == 1
    with pytest.raises(ValueError):
        ControlMode("half_open")


def test_synthesize_plan_deterministic(models, sched, obs):
    e_theta, e_general, _ = models
    g = GuidanceConfig(2.5, 0.5, "ipa")
    a = synthesize_plan(g, e_theta, e_general, obs, TaskPrompt(("red",)), sched, seed=7)
    b = synthesize_plan(g, e_theta, e_general, obs, TaskPrompt(("red",)), sched, seed=7)
    assert np.array_equal(a.frames, b.frames)
    assert a.mode == "ipa"
    assert np.array_equal(a.frames[0], obs)


def test_ipa_gamma_zero_plan_matches_general_cfg(models, sched, obs):
    e_theta, e_general, _ = models
    prompt = TaskPrompt(("red",))
    plan_ipa = synthesize_plan(
        GuidanceConfig(2.5, 0.0, "ipa"), e_theta, e_general, obs, prompt, sched, seed=9
    )

    def general_score(x, t):
        return cfg_epsilon(e_general, NoisyVideo(x, t, obs), prompt, 2.5)

    plan_cfg = ddim_sample(general_score, obs, prompt, sched, 25, 9)
    assert np.array_equal(plan_ipa.frames, plan_cfg.frames)


def test_in_domain_dispatch_never_touches_general(models, sched, obs):
    e_theta, e_general, _ = models
    before = e_general.eval_count
    synthesize_plan(
        GuidanceConfig(2.5, 0.5, "in_domain_cfg"), e_theta, None, obs, TaskPrompt(("red",)), sched, seed=3
    )
    assert e_general.eval_count == before


def test_missing_general_model_rejected(models, sched, obs):
    e_theta, _, _ = models
    with pytest.raises(CompositionError):
        synthesize_plan(
            GuidanceConfig(2.5, 0.5, "ipa"), e_theta, None, obs, TaskPrompt(("red",)), sched, seed=3
        )


def test_plan_eval_budget_per_mode(models, sched, obs):
    e_theta, e_general, _ = models
    prompt = TaskPrompt(("red",))
    e_theta.eval_count = e_general.eval_count = 0
    synthesize_plan(GuidanceConfig(2.5, 0.5, "ipa"), e_theta, e_general, obs, prompt, sched, seed=1)
    assert e_general.eval_count == 2 * 25
    assert e_theta.eval_count == 1 * 25
    e_theta.eval_count = e_general.eval_count = 0
    synthesize_plan(GuidanceConfig(2.5, 0.5, "pa"), e_theta, e_general, obs, prompt, sched, seed=1)
    assert e_theta.eval_count == 2 * 25
    assert e_general.eval_count == 1 * 25
    e_theta.eval_count = e_general.eval_count = 0
    synthesize_plan(GuidanceConfig(2.5, 0.5, "in_domain_cfg"), e_theta, None, obs, prompt, sched, seed=1)
    assert e_theta.eval_count == 2 * 25


def rollout(models, sched, ctrl_name, seed=21, task="red"):
    e_theta, e_general, idm = models
    state = world.reset(TaskPrompt((task,)), (task, "green", "blue") if task != "green" else (task, "red", "blue"), seed=seed)
    return plan_rollout(
        state,
        GuidanceConfig(2.5, 0.5, "ipa"),
        e_theta,
        e_general,
        idm,
        ControlMode(ctrl_name),
        sched,
        rng_seed=seed,
    )


def test_open_loop_plan_count(models, sched):
    e_theta, e_general, _ = models
    rec = rollout(models, sched, "open")
    if not rec.success:  # full-length episode: exactly ceil(H / (8 * k)) plans
        expected = int(np.ceil(world.HORIZON / (8 * models[2].frame_skip)))
        assert len(rec.replan_steps) == expected
    assert rec.replan_steps[0] == 0


def test_replan_boundaries_strided(models, sched):
    for ctrl, stride in (("open", 8), ("semi_open", 4), ("closed", 1)):
        rec = rollout(models, sched, ctrl, seed=33)
        k = models[2].frame_skip
        assert all(b % (stride * k) == 0 for b in rec.replan_steps)
        assert list(rec.replan_steps) == sorted(set(rec.replan_steps))


def test_rollout_records_only_real_frames(models, sched):
    """Every recorded frame re-renders from replaying the recorded actions."""
    rec = rollout(models, sched, "semi_open", seed=44)
    state = world.reset(TaskPrompt(("red",)), ("red", "green", "blue"), seed=44)
    assert np.array_equal(rec.frames[0], world.render(state))
    for t in range(len(rec.actions)):
        state = world.step(state, world.Action(rec.actions[t][0], rec.actions[t][1]))
        assert np.array_equal(rec.frames[t + 1], world.render(state))
    assert rec.success == world.success(state)


def test_rollout_episode_accounting(models, sched):
    rec = rollout(models, sched, "closed", seed=55)
    assert len(rec.frames) == len(rec.actions) + 1
    assert len(rec.actions) <= world.HORIZON


def test_rollout_denoiser_eval_accounting(models, sched):
    e_theta, e_general, idm = models
    e_theta.eval_count = e_general.eval_count = 0
    rec = rollout(models, sched, "semi_open", seed=66)
    plans = len(rec.replan_steps)
    assert e_general.eval_count == plans * 25 * 2
    assert e_theta.eval_count == plans * 25 * 1


def test_save_plan(tmp_path, models, sched, obs):
    e_theta, e_general, _ = models
    plan = synthesize_plan(
        GuidanceConfig(2.5, 0.5, "ipa"), e_theta, e_general, obs, TaskPrompt(("red",)), sched, seed=2
    )
    p = tmp_path / "plan.bin"
    save_plan(plan, p)
    blob = p.read_bytes()
    header, rest = blob.split(b"\n", 1)
    assert b"ipa" in header and b"red" in header
    assert len(rest) == 9 * 16 * 16 * 3 * 4
