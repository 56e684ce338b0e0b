"""Schedule, noising, training step, CFG/IPA/PA algebra, and DDIM sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sail import nn, world
from sail.diffusion import (
    Denoiser,
    GuidanceConfig,
    NoisyVideo,
    NULL_PROMPT,
    SamplingError,
    TaskPrompt,
    cfg_epsilon,
    ddim_reverse,
    ddim_sample,
    ddim_timesteps,
    denoise_loss_and_grads,
    forward_noise,
    ipa_epsilon,
    make_schedule,
    pa_epsilon,
    train_step,
)
from sail.nn import ConfigError, NetConfig

GEOM = (4, 4, 8)  # small frames keep the algebra tests fast
STACK_SHAPE = (8, 4, 4, 3)
COND_SHAPE = (4, 4, 3)


def make_tiny_denoiser(role="in_domain", seed=0, sched=None, prior_var=None):
    sched = sched or make_schedule(100, 1e-4, 0.02)
    cfg = NetConfig(
        in_width=8 * 4 * 4 * 3 + 4 * 4 * 3,
        hidden=(16,),
        out_width=8 * 4 * 4 * 3,
        t_width=8,
        c_width=4,
        seed=seed,
    )
    kw = {} if prior_var is None else {"prior_var": prior_var}
    return Denoiser(role, cfg, sched, geometry=GEOM, **kw)


class ProbeDenoiser:
    """Analytic epsilon source for composition tests."""

    def __init__(self, fn, geometry=GEOM):
        self.fn = fn
        self.geometry = geometry
        self.eval_count = 0

    def epsilon_batch(self, data, ts, conds, prompts):
        self.eval_count += data.shape[0]
        return np.stack(
            [self.fn(data[i], int(ts[i]), prompts[i]) for i in range(data.shape[0])]
        )


def constant_probe(uncond_value, cond_value):
    def fn(data, t, prompt):
        v = uncond_value if prompt == NULL_PROMPT else cond_value
        return np.full_like(data, v, dtype=np.float64)

    return ProbeDenoiser(fn)


def random_nv(rng, t=50):
    return NoisyVideo(
        data=rng.standard_normal(STACK_SHAPE).astype(np.float32),
        t=t,
        cond_frame=rng.random(COND_SHAPE).astype(np.float32),
    )


# --- schedule -------------------------------------------------------------


def test_schedule_first_alpha_bar():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert sched.ab(1) == pytest.approx(1 - 1e-4, abs=1e-12)


def test_schedule_strictly_decreasing():
    sched = make_schedule(500, 1e-4, 0.02)
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_schedule_terminal_alpha_bar_small():
    sched = make_schedule(1000, 1e-4, 0.02)
    # independent oracle: explicit running product
    prod = 1.0
    for beta in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - beta
    assert sched.ab(1000) == pytest.approx(prod, rel=1e-10)
    assert sched.ab(1000) < 1e-4


def test_schedule_bounds_enforced():
    with pytest.raises(ConfigError):
        make_schedule(1, 1e-4, 0.02)
    with pytest.raises(ConfigError):
        make_schedule(100, 0.0, 0.02)
    with pytest.raises(ConfigError):
        make_schedule(100, 0.03, 0.02)


# --- forward noising ------------------------------------------------------


def test_forward_noise_zero_eps():
    sched = make_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x0 = rng.random(STACK_SHAPE).astype(np.float32)
    nv = forward_noise(x0, 40, np.zeros_like(x0), sched)
    assert np.allclose(nv.data, np.sqrt(sched.ab(40)) * x0, rtol=1e-6)


def test_forward_noise_zero_signal():
    sched = make_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(1)
    eps = rng.standard_normal(STACK_SHAPE).astype(np.float32)
    nv = forward_noise(np.zeros(STACK_SHAPE, dtype=np.float32), 70, eps, sched)
    assert np.allclose(nv.data, np.sqrt(1 - sched.ab(70)) * eps, rtol=1e-6)


def test_forward_noise_variance_monte_carlo():
    sched = make_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(2)
    x0 = np.full((4,), 0.5, dtype=np.float32)
    draws = np.stack(
        [
            forward_noise(x0, sched.T, rng.standard_normal(4).astype(np.float32), sched).data
            for _ in range(10_000)
        ]
    )
    target = 1 - sched.ab(sched.T)
    assert np.var(draws) == pytest.approx(target, rel=0.05)


def test_forward_noise_t_out_of_range():
    sched = make_schedule(100, 1e-4, 0.02)
    x0 = np.zeros(STACK_SHAPE, dtype=np.float32)
    from sail.diffusion import DomainError

    with pytest.raises(DomainError):
        forward_noise(x0, 0, x0, sched)
    with pytest.raises(DomainError):
        forward_noise(x0, 101, x0, sched)


# --- prompts ----------------------------------------------------------------


def test_prompt_validation():
    with pytest.raises(ConfigError):
        TaskPrompt(())
    with pytest.raises(ConfigError):
        TaskPrompt(("null", "red"))
    with pytest.raises(ConfigError):
        TaskPrompt(("cyan",))
    assert TaskPrompt.parse("not orange").tokens == ("not", "orange")


def test_prompt_embedding_mean_shares_vocabulary():
    den = make_tiny_denoiser()
    e_not_orange = den.prompt_embedding(TaskPrompt(("not", "orange")))
    e_not = den.prompt_embedding(TaskPrompt(("not",)))
    e_orange = den.prompt_embedding(TaskPrompt(("orange",)))
    assert np.allclose(e_not_orange, (e_not + e_orange) / 2, atol=1e-7)


# --- training step ----------------------------------------------------------


def test_train_step_perfect_predictor_zero_loss():
    """With no denoising baseline and a zeroed net, x0_hat = 0; on x0 = 0 items
    the derived epsilon is exactly the injected noise, so the loss vanishes."""
    den = make_tiny_denoiser(prior_var=0.0)
    for k in den.params.arrays:
        den.params.arrays[k][:] = 0.0
    batch = [
        (np.zeros(COND_SHAPE, np.float32), np.zeros(STACK_SHAPE, np.float32), TaskPrompt(("red",)))
    ] * 4
    rng = np.random.default_rng(3)
    loss = train_step(den, batch, den.sched, rng, drop_prob=0.0, lr=1e-3)
    assert loss == pytest.approx(0.0, abs=1e-10)


def test_train_step_drop_prob_one_trains_only_null_row():
    den = make_tiny_denoiser()
    embed_before = den.params["embed"].copy()
    rng = np.random.default_rng(4)
    batch = [
        (
            rng.random(COND_SHAPE).astype(np.float32),
            rng.random(STACK_SHAPE).astype(np.float32),
            TaskPrompt(("orange",)),
        )
        for _ in range(6)
    ]
    train_step(den, batch, den.sched, rng, drop_prob=1.0, lr=1e-2)
    null_idx = den.vocab.index("null")
    changed = np.any(den.params["embed"] != embed_before, axis=1)
    assert changed[null_idx]
    assert not np.any(np.delete(changed, null_idx))


def test_train_step_loss_decreases_on_toy_demos():
    """3,000 steps on a 40-demo set halves the early-phase loss."""
    demos = world.collect_demos(world.seen_task_combos()[:4], 10, "expert", seed=77)
    assert len(demos) == 40
    sched = make_schedule(1000, 1e-4, 0.02)
    cfg = NetConfig(
        in_width=9 * 16 * 16 * 3,
        hidden=(64,),
        out_width=8 * 16 * 16 * 3,
        t_width=16,
        c_width=8,
        seed=5,
    )
    den = Denoiser("in_domain", cfg, sched, geometry=(16, 16, 8))
    rng = np.random.default_rng(6)
    losses = []
    for _ in range(3000):
        picks = rng.integers(0, len(demos), size=8)
        batch = []
        for i in picks:
            rec = demos[i]
            t = int(rng.integers(0, max(len(rec.frames) - 1, 1)))
            idx = np.minimum(t + 4 * np.arange(1, 9), len(rec.frames) - 1)
            batch.append((rec.frames[t], rec.frames[idx], rec.task))
        losses.append(train_step(den, batch, sched, rng, drop_prob=0.1, lr=3e-4))
    first = float(np.mean(losses[:100]))
    last = float(np.mean(losses[-100:]))
    assert last <= 0.5 * first, (first, last)


def test_embed_gradient_matches_finite_differences():
    den = make_tiny_denoiser()
    den.params = den.params.astype(np.float64)
    rng = np.random.default_rng(7)
    conds = rng.random((2,) + COND_SHAPE)
    x0 = rng.random((2,) + STACK_SHAPE)
    ts = np.array([10, 60])
    eps = rng.standard_normal((2,) + STACK_SHAPE)
    prompts = [TaskPrompt(("red",)), TaskPrompt(("not", "blue"))]
    _, grads = denoise_loss_and_grads(den, conds, x0, ts, eps, prompts)
    h = 1e-5
    table = den.params["embed"]
    for row, col in [(2, 0), (1, 3), (5, 2)]:
        orig = table[row, col]
        table[row, col] = orig + h
        lp, _ = denoise_loss_and_grads(den, conds, x0, ts, eps, prompts)
        table[row, col] = orig - h
        lm, _ = denoise_loss_and_grads(den, conds, x0, ts, eps, prompts)
        table[row, col] = orig
        fd = (lp - lm) / (2 * h)
        assert grads["embed"][row, col] == pytest.approx(fd, rel=1e-3, abs=1e-9)


# --- composition algebra -----------------------------------------------------


def test_cfg_epsilon_alpha_zero_and_one():
    probe = constant_probe(0.2, 0.6)
    rng = np.random.default_rng(8)
    nv = random_nv(rng)
    out0 = cfg_epsilon(probe, nv, TaskPrompt(("red",)), alpha=0.0)
    assert np.array_equal(out0, np.full(STACK_SHAPE, 0.2))
    out1 = cfg_epsilon(probe, nv, TaskPrompt(("red",)), alpha=1.0)
    assert np.allclose(out1, 0.6, atol=1e-12)


def test_cfg_epsilon_scalar_probe():
    probe = constant_probe(0.2, 0.6)
    rng = np.random.default_rng(9)
    out = cfg_epsilon(probe, random_nv(rng), TaskPrompt(("red",)), alpha=2.5)
    assert np.allclose(out, 1.2, atol=1e-12)


def test_ipa_scalar_probe():
    e_general = constant_probe(0.1, 0.3)
    e_theta = constant_probe(0.0, 0.5)
    g = GuidanceConfig(alpha=2.5, gamma=0.5, mode="ipa")
    rng = np.random.default_rng(10)
    out = ipa_epsilon(e_theta, e_general, random_nv(rng), TaskPrompt(("red",)), g)
    assert np.allclose(out, 1.225, atol=1e-12)


def test_pa_scalar_probe():
    e_theta = constant_probe(0.1, 0.3)
    e_general = constant_probe(0.0, 0.5)
    g = GuidanceConfig(alpha=2.5, gamma=0.5, mode="pa")
    rng = np.random.default_rng(11)
    out = pa_epsilon(e_theta, e_general, random_nv(rng), TaskPrompt(("red",)), g)
    assert np.allclose(out, 1.225, atol=1e-12)


def test_ipa_gamma_zero_equals_general_cfg_exactly():
    e_general = make_tiny_denoiser("general", seed=20)
    e_theta = make_tiny_denoiser("in_domain", seed=21, sched=e_general.sched)
    rng = np.random.default_rng(12)
    prompt = TaskPrompt(("pink",))
    for _ in range(20):
        nv = random_nv(rng, t=int(rng.integers(1, 100)))
        a = ipa_epsilon(e_theta, e_general, nv, prompt, GuidanceConfig(2.5, 0.0, "ipa"))
        b = cfg_epsilon(e_general, nv, prompt, 2.5)
        assert np.array_equal(a, b)


def test_pa_gamma_zero_equals_in_domain_cfg_exactly():
    e_general = make_tiny_denoiser("general", seed=22)
    e_theta = make_tiny_denoiser("in_domain", seed=23, sched=e_general.sched)
    rng = np.random.default_rng(13)
    prompt = TaskPrompt(("green",))
    for _ in range(20):
        nv = random_nv(rng, t=int(rng.integers(1, 100)))
        a = pa_epsilon(e_theta, e_general, nv, prompt, GuidanceConfig(2.5, 0.0, "pa"))
        b = cfg_epsilon(e_theta, nv, prompt, 2.5)
        assert np.array_equal(a, b)


def test_pa_is_ipa_with_roles_swapped():
    rng = np.random.default_rng(14)
    a_probe = constant_probe(0.11, 0.37)
    b_probe = constant_probe(0.05, 0.61)
    nv = random_nv(rng)
    prompt = TaskPrompt(("blue",))
    out_pa = pa_epsilon(a_probe, b_probe, nv, prompt, GuidanceConfig(1.7, 0.4, "pa"))
    out_ipa = ipa_epsilon(b_probe, a_probe, nv, prompt, GuidanceConfig(1.7, 0.4, "ipa"))
    assert np.allclose(out_pa, out_ipa, atol=1e-12)


@given(
    alpha=st.floats(0.0, 8.0, allow_nan=False),
    gammas=st.tuples(st.floats(0.0, 2.0), st.floats(0.25, 2.5)),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=40, deadline=None)
def test_ipa_affine_in_gamma(alpha, gammas, seed):
    """ipa output is affine in gamma with slope alpha * e_theta(cond)."""
    rng = np.random.default_rng(seed)
    e_gu, e_gc, e_tc = rng.standard_normal((3, 2, 2))

    class FixedProbe:
        geometry = (2, 2, 1)
        eval_count = 0

        def __init__(self, u, c):
            self.u, self.c = u, c

        def epsilon_batch(self, data, ts, conds, prompts):
            return np.stack([self.u if p == NULL_PROMPT else self.c for p in prompts])

    gen = FixedProbe(e_gu, e_gc)
    theta = FixedProbe(np.zeros_like(e_tc), e_tc)
    nv = NoisyVideo(np.zeros((1, 2, 2)), 5, np.zeros((2, 2)))
    g1, g2 = gammas
    sched_free = lambda gamma: ipa_epsilon(
        theta, gen, nv, TaskPrompt(("red",)), GuidanceConfig(alpha, gamma, "ipa")
    )
    out1, out2 = sched_free(g1), sched_free(g2)
    slope = (out2 - out1) / (g2 - g1) if g2 != g1 else None
    if slope is not None:
        assert np.allclose(slope, alpha * e_tc, rtol=1e-6, atol=1e-9)


def test_composition_mode_and_geometry_checks():
    from sail.diffusion import CompositionError

    e_general = make_tiny_denoiser("general", seed=24)
    e_theta = make_tiny_denoiser("in_domain", seed=25, sched=e_general.sched)
    rng = np.random.default_rng(15)
    nv = random_nv(rng)
    with pytest.raises(CompositionError):
        ipa_epsilon(e_theta, e_general, nv, TaskPrompt(("red",)), GuidanceConfig(1, 1, "pa"))
    with pytest.raises(CompositionError):
        pa_epsilon(e_theta, e_general, nv, TaskPrompt(("red",)), GuidanceConfig(1, 1, "ipa"))
    mismatched = ProbeDenoiser(lambda d, t, p: d, geometry=(8, 8, 4))
    with pytest.raises(CompositionError):
        ipa_epsilon(mismatched, e_general, nv, TaskPrompt(("red",)), GuidanceConfig(1, 1, "ipa"))


def test_evaluation_budget_per_composition():
    e_general = constant_probe(0.1, 0.3)
    e_theta = constant_probe(0.0, 0.5)
    rng = np.random.default_rng(16)
    nv = random_nv(rng)
    ipa_epsilon(e_theta, e_general, nv, TaskPrompt(("red",)), GuidanceConfig(2.5, 0.5, "ipa"))
    assert e_general.eval_count == 2
    assert e_theta.eval_count == 1
    e_general.eval_count = e_theta.eval_count = 0
    pa_epsilon(e_theta, e_general, nv, TaskPrompt(("red",)), GuidanceConfig(2.5, 0.5, "pa"))
    assert e_theta.eval_count == 2
    assert e_general.eval_count == 1


# --- DDIM -------------------------------------------------------------------


def gaussian_expert(sched, mu, s2):
    """Closed-form optimal epsilon for scalar data ~ N(mu, s2)."""

    def fn(x, t):
        ab = sched.ab(t)
        return (x - np.sqrt(ab) * mu) * np.sqrt(1 - ab) / (ab * s2 + 1 - ab)

    return fn


def test_ddim_deterministic_given_seed():
    sched = make_schedule(100, 1e-4, 0.02)
    score = gaussian_expert(sched, 0.5, 0.04)
    a = ddim_reverse(score, (3,), sched, 25, seed=42)
    b = ddim_reverse(score, (3,), sched, 25, seed=42)
    assert np.array_equal(a, b)
    c = ddim_reverse(score, (3,), sched, 25, seed=43)
    assert not np.array_equal(a, c)


def test_ddim_scalar_gaussian_oracle():
    sched = make_schedule(1000, 1e-4, 0.02)
    score = gaussian_expert(sched, 0.7, 0.01)
    samples = np.array([ddim_reverse(score, (), sched, 25, seed) for seed in range(1000)])
    assert abs(samples.mean() - 0.7) < 0.02


def test_ddim_invocation_count():
    sched = make_schedule(1000, 1e-4, 0.02)
    calls = []

    def counting_score(x, t):
        calls.append(t)
        return gaussian_expert(sched, 0.5, 0.01)(x, t)

    ddim_reverse(counting_score, (2,), sched, 25, seed=0)
    assert len(calls) == 25
    assert calls[0] == 1000 and calls[-1] == 40
    assert all(a - b == 40 for a, b in zip(calls, calls[1:]))


def test_ddim_steps_must_divide_horizon():
    sched = make_schedule(1000, 1e-4, 0.02)
    with pytest.raises(ConfigError):
        ddim_timesteps(1000, 26)


def test_ddim_nonfinite_reports_step_index():
    sched = make_schedule(100, 1e-4, 0.02)

    def broken(x, t):
        return np.full_like(x, np.nan) if t <= 60 else np.zeros_like(x)

    with pytest.raises(SamplingError) as exc:
        ddim_reverse(broken, (2,), sched, 25, seed=1)
    assert exc.value.step_index == 10  # t walks 100, 96, ... 60 at index 10


def test_ddim_sample_packages_observation():
    sched = make_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(17)
    cond = rng.random(COND_SHAPE).astype(np.float32)

    def score(x, t):
        ab = sched.ab(t)
        return x * np.sqrt(1 - ab)  # contracts toward zero

    plan = ddim_sample(score, cond, TaskPrompt(("red",)), sched, 25, rng_seed=5)
    assert plan.frames.shape == (9, 4, 4, 3)
    assert np.array_equal(plan.frames[0], cond)
    assert plan.frames.min() >= 0.0 and plan.frames.max() <= 1.0
