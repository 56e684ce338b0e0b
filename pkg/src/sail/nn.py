"""Minimal dense-array numerics: seeded MLPs, exact gradients, Adam, checkpoints.

Everything here is plain numpy. Networks are described by a `NetConfig` and
stored as a `ParamStore` of named float32 arrays, so the same machinery backs
the two denoisers and the inverse dynamics model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"SAILCK01"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Invalid architecture or schedule configuration."""


class DimensionError(ValueError):
    """Array shape does not match the network's configuration."""


class TrainingError(RuntimeError):
    """Non-finite values encountered during an update."""


class CheckpointError(RuntimeError):
    """Malformed or truncated checkpoint file."""


@dataclass(frozen=True)
class NetConfig:
    """Shape of a feed-forward net with optional time/prompt feature inputs.

    `t_width` and `c_width` may be zero when a net takes no time or prompt
    features (the inverse dynamics model); `in_width`, `hidden` entries and
    `out_width` must all be >= 1.
    """

    in_width: int
    hidden: tuple[int, ...]
    out_width: int
    activation: str = "silu"
    t_width: int = 0
    c_width: int = 0
    seed: int = 0

    def __post_init__(self):
        widths = (self.in_width, *self.hidden, self.out_width)
        if any(w < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.t_width < 0 or self.c_width < 0:
            raise ConfigError("embedding widths must be >= 0")
        if self.activation != "silu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def total_in(self) -> int:
        return self.in_width + self.t_width + self.c_width

    def layer_sizes(self) -> list[tuple[int, int]]:
        dims = (self.total_in, *self.hidden, self.out_width)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_sizes())


class ParamStore:
    """Named float32 arrays plus Adam moment state and a step counter.

    Array shapes are frozen after registration. Optimizer state lives under
    reserved names (`opt/step`, `opt/m/*`, `opt/v/*`) so a checkpoint is one
    flat collection of named arrays.
    """

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}
        self.moments_m: dict[str, np.ndarray] = {}
        self.moments_v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def register(self, name: str, value: np.ndarray) -> None:
        if name in self.arrays:
            raise ConfigError(f"array {name!r} already registered")
        self.arrays[name] = np.ascontiguousarray(value, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.arrays = {k: v.copy() for k, v in self.arrays.items()}
        out.moments_m = {k: v.copy() for k, v in self.moments_m.items()}
        out.moments_v = {k: v.copy() for k, v in self.moments_v.items()}
        out.step = self.step
        return out

    def astype(self, dtype) -> "ParamStore":
        """Copy with arrays cast to `dtype` (float64 copies back the gradient checks)."""
        out = self.copy()
        out.arrays = {k: v.astype(dtype) for k, v in out.arrays.items()}
        return out

    def n_layers(self) -> int:
        return sum(1 for k in self.arrays if k.startswith("w"))


def init_network(cfg: NetConfig) -> ParamStore:
    """Seeded init: weights uniform on +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    store = ParamStore()
    for i, (fan_in, fan_out) in enumerate(cfg.layer_sizes()):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
        store.register(f"w{i}", w)
        store.register(f"b{i}", np.zeros(fan_out, dtype=np.float32))
    return store


def sinusoidal_embed(t: int, width: int) -> np.ndarray:
    """Interleaved sin/cos of `t` at `width`/2 geometrically spaced frequencies."""
    if width % 2 != 0 or width < 2:
        raise ConfigError(f"embedding width must be even and >= 2, got {width}")
    if t < 0:
        raise ConfigError(f"timestep must be >= 0, got {t}")
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs
    out = np.empty(width, dtype=np.float32)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def _silu(z: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig


def _silu_grad(z: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def _assemble_input(
    store: ParamStore,
    x: np.ndarray,
    t_embed: np.ndarray | None,
    c_embed: np.ndarray | None,
) -> np.ndarray:
    x = np.atleast_2d(x)
    parts = [x]
    for extra in (t_embed, c_embed):
        if extra is None:
            continue
        extra = np.atleast_2d(extra)
        if extra.shape[0] == 1 and x.shape[0] > 1:
            extra = np.broadcast_to(extra, (x.shape[0], extra.shape[1]))
        parts.append(extra)
    h = np.concatenate(parts, axis=1) if len(parts) > 1 else x
    expected = store["w0"].shape[0]
    if h.shape[1] != expected:
        raise DimensionError(
            f"concatenated input width {h.shape[1]} != first layer fan-in {expected}"
        )
    return h


def _forward_cached(store: ParamStore, h: np.ndarray):
    n = store.n_layers()
    pre: list[np.ndarray] = []
    post: list[np.ndarray] = [h]
    for i in range(n):
        z = post[-1] @ store[f"w{i}"] + store[f"b{i}"]
        pre.append(z)
        post.append(_silu(z) if i < n - 1 else z)
    return pre, post


def forward(
    store: ParamStore,
    x: np.ndarray,
    t_embed: np.ndarray | None = None,
    c_embed: np.ndarray | None = None,
) -> np.ndarray:
    """Run the MLP. `x` may be a single vector or a (batch, width) matrix."""
    single = np.asarray(x).ndim == 1
    h = _assemble_input(store, x, t_embed, c_embed)
    _, post = _forward_cached(store, h)
    out = post[-1]
    return out[0] if single else out


def forward_with_cache(
    store: ParamStore,
    x: np.ndarray,
    t_embed: np.ndarray | None = None,
    c_embed: np.ndarray | None = None,
):
    """Forward pass that keeps layer activations for a later `backward` call."""
    x2 = np.atleast_2d(x)
    h = _assemble_input(store, x, t_embed, c_embed)
    pre, post = _forward_cached(store, h)
    t_w = 0 if t_embed is None else np.atleast_2d(t_embed).shape[1]
    cache = (pre, post, x2.shape[1], t_w)
    return post[-1], cache


def backward(store: ParamStore, cache, grad_out: np.ndarray):
    """Exact reverse-mode gradients from a cached forward pass.

    Returns (grads, grad_x, grad_t, grad_c): dL/dparam for every weight and
    bias, plus gradients w.r.t. the three input blocks.
    """
    pre, post, x_w, t_w = cache
    n = store.n_layers()
    g = np.atleast_2d(grad_out)
    grads: dict[str, np.ndarray] = {}
    for i in range(n - 1, -1, -1):
        grads[f"w{i}"] = post[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ store[f"w{i}"].T
        if i > 0:
            g = g * _silu_grad(pre[i - 1])

    grad_x = g[:, :x_w]
    grad_t = g[:, x_w : x_w + t_w] if t_w else None
    grad_c = g[:, x_w + t_w :] if g.shape[1] > x_w + t_w else None
    return grads, grad_x, grad_t, grad_c


def forward_backward(
    store: ParamStore,
    x: np.ndarray,
    t_embed: np.ndarray | None,
    c_embed: np.ndarray | None,
    grad_out: np.ndarray,
):
    """Convenience wrapper: forward plus gradients in one call."""
    out, cache = forward_with_cache(store, x, t_embed, c_embed)
    grads, grad_x, grad_t, grad_c = backward(store, cache, grad_out)
    return out, grads, grad_x, grad_t, grad_c


def _adam_update_numpy(p, m, v, g, lr, bc1, bc2):
    b1 = np.float32(ADAM_BETA1)
    c1 = np.float32(1.0 - ADAM_BETA1)
    b2 = np.float32(ADAM_BETA2)
    c2 = np.float32(1.0 - ADAM_BETA2)
    m *= b1
    m += c1 * g
    v *= b2
    v += c2 * np.square(g)
    denom = v * np.float32(1.0 / bc2)
    np.sqrt(denom, out=denom)
    denom += np.float32(ADAM_EPS)
    np.divide(m, denom, out=denom)
    denom *= np.float32(lr / bc1)
    p -= denom


try:  # fused kernel: Adam is memory-bound, one pass beats ~14 numpy passes
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _adam_update_fused(p, m, v, g, lr, bc1, bc2):  # pragma: no cover - jit
        b1 = np.float32(ADAM_BETA1)
        c1 = np.float32(1.0 - ADAM_BETA1)
        b2 = np.float32(ADAM_BETA2)
        c2 = np.float32(1.0 - ADAM_BETA2)
        eps = np.float32(ADAM_EPS)
        inv_bc2 = np.float32(1.0 / bc2)
        scale = np.float32(lr / bc1)
        for i in range(p.size):
            gi = g[i]
            m[i] = b1 * m[i] + c1 * gi
            v[i] = b2 * v[i] + c2 * (gi * gi)
            p[i] -= scale * (m[i] / (np.sqrt(v[i] * inv_bc2) + eps))

    def _adam_update(p, m, v, g, lr, bc1, bc2):
        _adam_update_fused(
            p.reshape(-1), m.reshape(-1), v.reshape(-1), g.reshape(-1),
            np.float32(lr), np.float32(bc1), np.float32(bc2),
        )

except ImportError:  # pragma: no cover - numba is an optional speedup
    _adam_update = _adam_update_numpy


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
    """One Adam update (decoupled weight decay zero), with bias correction."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    for name, g in grads.items():
        if name not in store.arrays:
            raise DimensionError(f"gradient for unknown array {name!r}")
        if g.shape != store.arrays[name].shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {store.arrays[name].shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for array {name!r}")

    store.step += 1
    t = store.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, g in grads.items():
        g = np.ascontiguousarray(g, dtype=np.float32)
        if name not in store.moments_m:
            store.moments_m[name] = np.zeros_like(store.arrays[name])
            store.moments_v[name] = np.zeros_like(store.arrays[name])
        _adam_update(store.arrays[name], store.moments_m[name], store.moments_v[name], g, lr, bc1, bc2)


def _checkpoint_items(store: ParamStore) -> list[tuple[str, np.ndarray]]:
    items = dict(store.arrays)
    items["opt/step"] = np.array(store.step, dtype=np.float32)
    for name, m in store.moments_m.items():
        items[f"opt/m/{name}"] = m
        items[f"opt/v/{name}"] = store.moments_v[name]
    return sorted(items.items())


def save_checkpoint(store: ParamStore, path) -> None:
    """Write magic, a (name, shape, offset) manifest, then raw LE float32 payloads."""
    items = _checkpoint_items(store)
    manifest = bytearray()
    manifest += struct.pack("<I", len(items))
    offset = 0
    for name, arr in items:
        raw = name.encode("utf-8")
        manifest += struct.pack("<I", len(raw)) + raw
        manifest += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            manifest += struct.pack("<Q", d)
        manifest += struct.pack("<Q", offset)
        offset += arr.size * 4
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes(manifest))
        for _, arr in items:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    pos = 8
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos) if ndim else ()
        pos += 8 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, shape, offset))
    payload = blob[pos:]

    store = ParamStore()
    for name, shape, offset in entries:
        size = int(np.prod(shape)) if shape else 1
        end = offset + size * 4
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).copy()
        if name == "opt/step":
            store.step = int(arr)
        elif name.startswith("opt/m/"):
            store.moments_m[name[len("opt/m/") :]] = arr
        elif name.startswith("opt/v/"):
            store.moments_v[name[len("opt/v/") :]] = arr
        else:
            store.register(name, arr)
    return store
