"""Diffusion core: noise schedule, conditioned denoisers, score composition, DDIM.

Two denoiser roles share one schedule and one token vocabulary: the small
`in_domain` model that gets finetuned, and the frozen `general` model that
stands in for a broadly pretrained video model. Composition happens purely in
epsilon space, so any object with an `epsilon_batch` method can participate
(tests use analytic probes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import ConfigError, DimensionError, NetConfig, ParamStore, TrainingError

VOCAB = ("null", "not", "red", "green", "blue", "pink", "orange", "purple")
NULL_TOKEN = "null"

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_DDIM_STEPS = 25
DEFAULT_ALPHA = 2.5
DEFAULT_GAMMA = 0.5
ALPHA_STRONG = 7.0  # high-guidance preset
DEFAULT_PRIOR_VAR = 0.005


class DomainError(ValueError):
    """Value outside the schedule or frame domain."""


class CompositionError(ValueError):
    """Denoisers cannot be composed (geometry or mode mismatch)."""


class SamplingError(RuntimeError):
    """Non-finite state encountered during reverse diffusion."""

    def __init__(self, msg: str, step_index: int):
        super().__init__(msg)
        self.step_index = step_index


@dataclass(frozen=True)
class TaskPrompt:
    """Ordered tokens from the fixed vocabulary; the null token appears only alone."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ConfigError("prompt must be non-empty")
        unknown = [t for t in self.tokens if t not in VOCAB]
        if unknown:
            raise ConfigError(f"unknown tokens {unknown}; vocabulary is {VOCAB}")
        if NULL_TOKEN in self.tokens and len(self.tokens) > 1:
            raise ConfigError("the null token may only appear alone")

    def text(self) -> str:
        return " ".join(self.tokens)

    @staticmethod
    def parse(text: str) -> "TaskPrompt":
        return TaskPrompt(tuple(text.split()))


NULL_PROMPT = TaskPrompt((NULL_TOKEN,))


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; `alpha_bar` is the running product of (1 - beta)."""

    T: int
    betas: np.ndarray  # (T,), betas[t-1] is beta at timestep t
    alpha_bar: np.ndarray  # (T,)

    def ab(self, t: int) -> float:
        """alpha_bar at timestep t, with ab(0) = 1 for the clean endpoint."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise DomainError(f"timestep {t} outside 1..{self.T}")
        return float(self.alpha_bar[t - 1])


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


@dataclass
class NoisyVideo:
    """A noised stack of future frames plus the clean conditioning frame."""

    data: np.ndarray  # (F, H, W, 3)
    t: int
    cond_frame: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        if self.t < 1:
            raise DomainError(f"timestep {self.t} must be >= 1")


@dataclass(frozen=True)
class GuidanceConfig:
    """Text-guidance scale, prior strength, and which composition to use."""

    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    mode: str = "ipa"

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be >= 0")
        if self.mode not in ("in_domain_cfg", "ipa", "pa"):
            raise ConfigError(f"unknown adaptation mode {self.mode!r}")


@dataclass
class VideoPlan:
    """One real observation followed by synthesized future frames."""

    frames: np.ndarray  # (F+1, H, W, 3), frames[0] is the observation
    prompt: TaskPrompt
    seed: int
    mode: str = "raw"


class Denoiser:
    """Epsilon-prediction model over flattened frame stacks.

    The clean-stack estimate combines an analytic linear-denoising baseline
    with a scale-normalized learned correction:

        x0_hat = c(t) * x_t + (1 - c(t) * sqrt(ab)) * net(x_t, cond, t, prompt)
        c(t)   = sqrt(ab) * prior_var / (ab * prior_var + 1 - ab)

    and epsilon is recovered through the forward-noise identity. The baseline
    carries the full-rank x_t passthrough the net's hidden bottleneck cannot,
    and the (1 - c sqrt(ab)) factor keeps the net's regression target at clean
    -frame scale for every timestep, so the fit is uniformly sharp and no
    single low-timestep draw dominates training.
    """

    def __init__(
        self,
        role: str,
        cfg: NetConfig,
        sched: NoiseSchedule,
        geometry: tuple[int, int, int] = (16, 16, 8),
        params: ParamStore | None = None,
        vocab: tuple[str, ...] = VOCAB,
        prior_var: float = DEFAULT_PRIOR_VAR,
    ):
        if role not in ("in_domain", "general"):
            raise ConfigError(f"unknown denoiser role {role!r}")
        h, w, f = geometry
        if cfg.in_width != f * h * w * 3 + h * w * 3:
            raise ConfigError(
                f"cfg.in_width {cfg.in_width} != stack+cond width {f * h * w * 3 + h * w * 3}"
            )
        if cfg.out_width != f * h * w * 3:
            raise ConfigError(f"cfg.out_width {cfg.out_width} != stack width {f * h * w * 3}")
        if prior_var < 0:
            raise ConfigError(f"prior_var must be >= 0, got {prior_var}")
        self.role = role
        self.cfg = cfg
        self.sched = sched
        self.geometry = geometry
        self.vocab = vocab
        self.prior_var = prior_var
        self.params = params if params is not None else init_denoiser_params(cfg, vocab)
        self.eval_count = 0

    def prompt_embedding(self, prompt: TaskPrompt) -> np.ndarray:
        """Mean of the token-embedding rows, so `not X` shares X's vocabulary row."""
        table = self.params["embed"]
        idx = [self.vocab.index(tok) for tok in prompt.tokens]
        return table[idx].mean(axis=0)

    def _net_inputs(self, data: np.ndarray, ts: np.ndarray, conds: np.ndarray, prompts):
        b = data.shape[0]
        dtype = self.params["w0"].dtype  # float32 in production, float64 in gradient checks
        x = np.concatenate(
            [data.reshape(b, -1), conds.reshape(b, -1)], axis=1, dtype=dtype
        )
        t_emb = np.stack([nn.sinusoidal_embed(int(t), self.cfg.t_width) for t in ts]).astype(dtype)
        c_emb = np.stack([self.prompt_embedding(p) for p in prompts])
        return x, t_emb, c_emb

    def _ab_coeffs(self, ts: np.ndarray, dtype):
        """Per-row (sqrt_ab, sqrt_1mab, baseline c, net scale) columns."""
        ab = np.array([self.sched.ab(int(t)) for t in ts], dtype=dtype)[:, None]
        sqrt_ab = np.sqrt(ab)
        sqrt_1mab = np.sqrt(1.0 - ab)
        c = sqrt_ab * self.prior_var / (ab * self.prior_var + 1.0 - ab)
        net_scale = 1.0 - c * sqrt_ab
        return sqrt_ab, sqrt_1mab, c, net_scale

    def _x0_hat(self, noisy_flat: np.ndarray, net_out: np.ndarray, ts: np.ndarray):
        _, _, c, net_scale = self._ab_coeffs(ts, net_out.dtype)
        return c * noisy_flat + net_scale * net_out

    def epsilon_batch(
        self,
        data: np.ndarray,
        ts: np.ndarray,
        conds: np.ndarray,
        prompts: list[TaskPrompt],
    ) -> np.ndarray:
        """Predict epsilon for a batch of noisy stacks; shape in == shape out."""
        x, t_emb, c_emb = self._net_inputs(data, ts, conds, prompts)
        net_out = nn.forward(self.params, x, t_emb, c_emb)
        self.eval_count += data.shape[0]
        noisy_flat = x[:, : self.cfg.out_width]
        sqrt_ab, sqrt_1mab, _, _ = self._ab_coeffs(ts, net_out.dtype)
        x0_hat = self._x0_hat(noisy_flat, net_out, ts)
        eps = (noisy_flat - sqrt_ab * x0_hat) / sqrt_1mab
        return eps.reshape(data.shape)

    def epsilon(self, nv: NoisyVideo, prompt: TaskPrompt | None) -> np.ndarray:
        p = prompt if prompt is not None else NULL_PROMPT
        return self.epsilon_batch(
            nv.data[None], np.array([nv.t]), nv.cond_frame[None], [p]
        )[0]


def init_denoiser_params(cfg: NetConfig, vocab: tuple[str, ...] = VOCAB) -> ParamStore:
    """Network layers plus a trainable token-embedding table named `embed`."""
    store = nn.init_network(cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, len(vocab))))
    bound = 1.0 / np.sqrt(cfg.c_width)
    store.register(
        "embed", rng.uniform(-bound, bound, size=(len(vocab), cfg.c_width)).astype(np.float32)
    )
    return store


def forward_noise(
    x0: np.ndarray,
    t: int,
    eps: np.ndarray,
    sched: NoiseSchedule,
    cond_frame: np.ndarray | None = None,
) -> NoisyVideo:
    """Blend clean frames with unit Gaussian noise at timestep t."""
    if not 1 <= t <= sched.T:
        raise DomainError(f"timestep {t} outside 1..{sched.T}")
    if eps.shape != x0.shape:
        raise DimensionError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    ab = sched.ab(t)
    data = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    if cond_frame is None:
        cond_frame = np.zeros(x0.shape[1:], dtype=np.float32)
    return NoisyVideo(data=data, t=t, cond_frame=cond_frame)


def train_step(
    den: Denoiser,
    batch: list[tuple[np.ndarray, np.ndarray, TaskPrompt]],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    drop_prob: float,
    lr: float,
) -> float:
    """One denoising step: sample (t, eps) per item, CFG prompt dropout, MSE, Adam.

    Batch items are (cond_frame, x0 future stack, prompt). Returns the mean
    squared error between predicted and true epsilon.
    """
    if not batch:
        raise TrainingError("empty training batch")
    b = len(batch)
    conds = np.stack([item[0] for item in batch]).astype(np.float32)
    x0 = np.stack([item[1] for item in batch]).astype(np.float32)
    ts = _stratified_timesteps(sched.T, b, rng)
    eps = rng.standard_normal(size=x0.shape).astype(np.float32)
    prompts = [
        NULL_PROMPT if rng.random() < drop_prob else item[2] for item in batch
    ]

    loss, grads = denoise_loss_and_grads(den, conds, x0, ts, eps, prompts)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss}")
    nn.adam_step(den.params, grads, lr)
    den.eval_count += b
    return loss


def _stratified_timesteps(T: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-marginal timesteps, one per equal stratum of 1..T, shuffled.

    Each item's timestep is still uniform on 1..T; stratification only removes
    the batch-to-batch variance of the noise-level mix, which keeps windowed
    loss averages comparable across training.
    """
    edges = np.linspace(0, T, b + 1)
    lows = np.floor(edges[:-1]).astype(int) + 1
    highs = np.maximum(np.floor(edges[1:]).astype(int), lows)
    ts = np.array([rng.integers(lo, hi + 1) for lo, hi in zip(lows, highs)])
    return rng.permutation(ts)


def denoise_loss_and_grads(
    den: Denoiser,
    conds: np.ndarray,
    x0: np.ndarray,
    ts: np.ndarray,
    eps: np.ndarray,
    prompts: list[TaskPrompt],
):
    """Epsilon-MSE loss and exact parameter gradients for a fixed noising draw.

    The returned loss is the epsilon-space MSE. Gradients are taken on the
    clean-frame residual (the SNR-normalized form of the same objective):
    plain epsilon-MSE weights a timestep by ab/(1-ab), which starves the
    high-noise regime where the conditional generation actually lives, while
    the clean-frame weighting trains it uniformly.
    """
    b = x0.shape[0]
    dtype = den.params["w0"].dtype
    ab = np.array([den.sched.ab(int(t)) for t in ts], dtype=dtype).reshape(
        (b,) + (1,) * (x0.ndim - 1)
    )
    noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    x, t_emb, c_emb = den._net_inputs(noisy, ts, conds, prompts)
    noisy_flat = x[:, : den.cfg.out_width]
    x0_flat = x0.reshape(b, -1).astype(dtype)
    eps_flat = eps.reshape(b, -1)

    net_out, cache = nn.forward_with_cache(den.params, x, t_emb, c_emb)
    sqrt_ab, sqrt_1mab, _, net_scale = den._ab_coeffs(ts, net_out.dtype)
    x0_hat = den._x0_hat(noisy_flat, net_out, ts)
    eps_hat = (noisy_flat - sqrt_ab * x0_hat) / sqrt_1mab
    resid_eps = eps_hat - eps_flat
    loss = float(np.mean(resid_eps.astype(np.float64) ** 2))

    resid_x0 = x0_hat - x0_flat
    grad_out = resid_x0 * (2.0 / resid_x0.size) * net_scale
    grads, _, _, grad_c = nn.backward(den.params, cache, grad_out)
    _accumulate_embed_grad(den, prompts, grad_c, grads)
    return loss, grads


def _accumulate_embed_grad(den, prompts, grad_c, grads):
    if grad_c is None:
        return
    table = den.params["embed"]
    g_embed = np.zeros_like(table)
    for row, prompt in enumerate(prompts):
        idx = [den.vocab.index(tok) for tok in prompt.tokens]
        share = grad_c[row] / len(idx)
        for i in idx:
            g_embed[i] += share
    grads["embed"] = g_embed


def cfg_epsilon(den, nv: NoisyVideo, prompt: TaskPrompt, alpha: float) -> np.ndarray:
    """Classifier-free guidance: e_u + alpha * (e_c - e_u)."""
    pair = den.epsilon_batch(
        np.stack([nv.data, nv.data]),
        np.array([nv.t, nv.t]),
        np.stack([nv.cond_frame, nv.cond_frame]),
        [NULL_PROMPT, prompt],
    )
    e_u, e_c = pair[0], pair[1]
    return e_u + alpha * (e_c - e_u)


def _check_composable(e_theta, e_general):
    gt = getattr(e_theta, "geometry", None)
    gg = getattr(e_general, "geometry", None)
    if gt is not None and gg is not None and gt != gg:
        raise CompositionError(f"geometry mismatch: in-domain {gt} vs general {gg}")


def ipa_epsilon(e_theta, e_general, nv: NoisyVideo, prompt: TaskPrompt, g: GuidanceConfig) -> np.ndarray:
    """Compose with the general model as main denoiser and the in-domain model
    as a gamma-weighted conditional prior:

        e_gen(u) + alpha * (e_gen(c) + gamma * e_theta(c) - e_gen(u))

    Exactly two general evaluations and one in-domain evaluation per call.
    """
    if g.mode != "ipa":
        raise CompositionError(f"guidance mode {g.mode!r} passed to ipa_epsilon")
    _check_composable(e_theta, e_general)
    pair = e_general.epsilon_batch(
        np.stack([nv.data, nv.data]),
        np.array([nv.t, nv.t]),
        np.stack([nv.cond_frame, nv.cond_frame]),
        [NULL_PROMPT, prompt],
    )
    e_gu, e_gc = pair[0], pair[1]
    e_tc = e_theta.epsilon_batch(
        nv.data[None], np.array([nv.t]), nv.cond_frame[None], [prompt]
    )[0]
    # gamma == 0 keeps the arithmetic identical to plain CFG of the general model
    cond_term = e_gc if g.gamma == 0.0 else e_gc + g.gamma * e_tc
    return e_gu + g.alpha * (cond_term - e_gu)


def pa_epsilon(e_theta, e_general, nv: NoisyVideo, prompt: TaskPrompt, g: GuidanceConfig) -> np.ndarray:
    """Mirror composition: the in-domain model is main, the general model is
    the gamma-weighted conditional prior:

        e_theta(u) + alpha * (e_theta(c) + gamma * e_gen(c) - e_theta(u))
    """
    if g.mode != "pa":
        raise CompositionError(f"guidance mode {g.mode!r} passed to pa_epsilon")
    _check_composable(e_theta, e_general)
    pair = e_theta.epsilon_batch(
        np.stack([nv.data, nv.data]),
        np.array([nv.t, nv.t]),
        np.stack([nv.cond_frame, nv.cond_frame]),
        [NULL_PROMPT, prompt],
    )
    e_tu, e_tc = pair[0], pair[1]
    e_gc = e_general.epsilon_batch(
        nv.data[None], np.array([nv.t]), nv.cond_frame[None], [prompt]
    )[0]
    cond_term = e_tc if g.gamma == 0.0 else e_tc + g.gamma * e_gc
    return e_tu + g.alpha * (cond_term - e_tu)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1 or T % steps != 0:
        raise ConfigError(f"steps {steps} must divide T {T} into an even stride")
    stride = T // steps
    return list(range(T, 0, -stride))


def ddim_reverse(
    score_fn,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    clip: tuple[float, float] | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) strided reverse diffusion from seeded Gaussian noise.

    `score_fn(x, t)` must return the composed epsilon for state `x`. The
    terminal array is optionally clipped (after the final step only).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.standard_normal(shape).astype(np.float32)
    ts = ddim_timesteps(sched.T, steps)
    stride = sched.T // steps
    for i, t in enumerate(ts):
        eps = np.asarray(score_fn(x, t))
        if not np.all(np.isfinite(eps)):
            raise SamplingError(f"non-finite epsilon at step {i} (t={t})", i)
        ab_t = sched.ab(t)
        ab_n = sched.ab(t - stride)
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        x = (np.sqrt(ab_n) * x0 + np.sqrt(1.0 - ab_n) * eps).astype(np.float32)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at step {i} (t={t})", i)
    if clip is not None:
        x = np.clip(x, clip[0], clip[1])
    return x


def ddim_sample(
    score_fn,
    cond_frame: np.ndarray,
    prompt: TaskPrompt,
    sched: NoiseSchedule,
    steps: int,
    rng_seed: int,
    frames: int = 8,
) -> VideoPlan:
    """Synthesize a video plan: sample the future stack, prepend the observation."""
    h, w, c = cond_frame.shape
    stack = ddim_reverse(score_fn, (frames, h, w, c), sched, steps, rng_seed, clip=(0.0, 1.0))
    out = np.concatenate([cond_frame[None].astype(np.float32), stack], axis=0)
    return VideoPlan(frames=out, prompt=prompt, seed=rng_seed)
