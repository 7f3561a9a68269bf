"""Three interchangeable policy classes behind one surface.

Every policy can (a) sample k actions in [-1,1]^d at a state and (b) produce a
supervised distillation loss with parameter gradients on (state, action)
pairs. Kinds:

  tanh_gaussian           MLP -> (mean, log_std); samples squashed by tanh
  diffusion_ddpm          MLP noise predictor, iterative reverse denoising
  autoregressive_categorical
                          per-dimension 128-bin tokens predicted sequentially;
                          the backbone is an MLP over (state, one-hot prefix,
                          one-hot dimension index)

Sampling is pure given an rng stream; ``sample_calls`` is instrumentation
only.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Array,
    MlpParams,
    mlp_backward_from_cache,
    mlp_forward,
    mlp_forward_with_cache,
    mlp_init,
    mlp_records,
    mlp_from_records,
    _read_records,
    _write_records,
)

POLICY_KINDS = ("tanh_gaussian", "diffusion_ddpm", "autoregressive_categorical")

POLICY_MAGIC = b"PRLP"
POLICY_VERSION = 1

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ATANH_CLIP = 1e-6


class PolicyKindError(TypeError):
    """Operation applied to the wrong policy kind."""


class TokenizationError(ValueError):
    """Action outside [-1, 1] cannot be tokenized."""


@dataclass
class DiffusionSchedule:
    """Forward-process variance schedule; alpha_bar must fall strictly."""

    betas: Array

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.betas)


def cosine_schedule(n_steps: int, offset: float = 0.008,
                    max_beta: float = 0.999) -> DiffusionSchedule:
    """Standard cosine construction: alpha_bar(t) = cos^2(((t/K)+o)/(1+o) * pi/2)."""
    t = np.arange(n_steps + 1, dtype=np.float64) / n_steps
    f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return DiffusionSchedule(np.clip(betas, 1e-8, max_beta))


@dataclass
class TokenizerSpec:
    """Uniform per-dimension bins over [-1, 1]."""

    n_bins: int = 128

    @property
    def bin_width(self) -> float:
        return 2.0 / self.n_bins

    def centers(self) -> Array:
        return -1.0 + (np.arange(self.n_bins) + 0.5) * self.bin_width


def tokenize(spec: TokenizerSpec, actions: Array) -> Array:
    """Map actions in [-1,1] to integer bins, clamped at the edges."""
    actions = np.asarray(actions, dtype=np.float64)
    if np.any(np.abs(actions) > 1.0 + 1e-9):
        raise TokenizationError("action outside [-1, 1]")
    tokens = np.floor((actions + 1.0) / 2.0 * spec.n_bins).astype(np.int64)
    return np.clip(tokens, 0, spec.n_bins - 1)


def detokenize(spec: TokenizerSpec, tokens: Array) -> Array:
    return -1.0 + (np.asarray(tokens, dtype=np.float64) + 0.5) * spec.bin_width


@dataclass
class PolicyHandle:
    kind: str
    params: MlpParams
    state_dim: int
    d_action: int
    schedule: DiffusionSchedule | None = None
    tokenizer: TokenizerSpec | None = None
    version: int = 0
    sample_calls: int = 0    # instrumentation: how often sampling was queried

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise PolicyKindError(f"unknown policy kind {self.kind!r}")
        if self.kind == "diffusion_ddpm" and self.schedule is None:
            raise ValueError("diffusion policy needs a schedule")
        if self.kind == "autoregressive_categorical" and self.tokenizer is None:
            raise ValueError("autoregressive policy needs a tokenizer")


def make_policy(kind: str, state_dim: int, d_action: int,
                rng: np.random.Generator, hidden: tuple[int, ...] = (64, 64),
                n_diffusion_steps: int = 5, n_bins: int = 128,
                activation: str = "relu") -> PolicyHandle:
    schedule = tokenizer = None
    if kind == "tanh_gaussian":
        sizes = [state_dim, *hidden, 2 * d_action]
    elif kind == "diffusion_ddpm":
        schedule = cosine_schedule(n_diffusion_steps)
        sizes = [d_action + state_dim + n_diffusion_steps, *hidden, d_action]
    elif kind == "autoregressive_categorical":
        tokenizer = TokenizerSpec(n_bins)
        sizes = [state_dim + d_action * n_bins + d_action, *hidden, n_bins]
    else:
        raise PolicyKindError(f"unknown policy kind {kind!r}")
    params = mlp_init(sizes, rng, activation)
    return PolicyHandle(kind, params, state_dim, d_action, schedule, tokenizer)


# -- sampling ------------------------------------------------------------------

def _gaussian_heads(policy: PolicyHandle, states: Array) -> tuple[Array, Array]:
    out = mlp_forward(policy.params, states)
    mean, log_std = out[:, :policy.d_action], out[:, policy.d_action:]
    return mean, np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def _diffusion_input(policy: PolicyHandle, noisy: Array, states: Array,
                     t: Array) -> Array:
    onehot = np.zeros((len(noisy), policy.schedule.n_steps))
    onehot[np.arange(len(noisy)), t - 1] = 1.0
    return np.concatenate([noisy, states, onehot], axis=1)


def _ddpm_sample_rows(policy: PolicyHandle, states: Array,
                      rng: np.random.Generator) -> Array:
    """Reverse denoising chain for a (rows, state_dim) batch of states."""
    sched = policy.schedule
    n = len(states)
    a = rng.standard_normal((n, policy.d_action))
    for t in range(sched.n_steps, 0, -1):
        alpha = sched.alphas[t - 1]
        alpha_bar = sched.alpha_bars[t - 1]
        beta = sched.betas[t - 1]
        eps = mlp_forward(policy.params,
                          _diffusion_input(policy, a, states, np.full(n, t)))
        a = (a - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha)
        if t > 1:
            a = a + np.sqrt(beta) * rng.standard_normal((n, policy.d_action))
    return np.clip(a, -1.0, 1.0)


def _ar_input(policy: PolicyHandle, states: Array, prefix_onehots: Array,
              dim_index: int) -> Array:
    n = len(states)
    dim_onehot = np.zeros((n, policy.d_action))
    dim_onehot[:, dim_index] = 1.0
    return np.concatenate([states, prefix_onehots, dim_onehot], axis=1)


def _softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ar_sample_rows(policy: PolicyHandle, states: Array,
                    rng: np.random.Generator, mode: str) -> Array:
    tok = policy.tokenizer
    n = len(states)
    prefix = np.zeros((n, policy.d_action * tok.n_bins))
    actions = np.zeros((n, policy.d_action))
    for i in range(policy.d_action):
        logits = mlp_forward(policy.params, _ar_input(policy, states, prefix, i))
        if mode == "greedy":
            tokens = logits.argmax(axis=1)
        else:
            probs = _softmax(logits)
            u = rng.random((n, 1))
            tokens = (np.cumsum(probs, axis=1) < u).sum(axis=1)
            tokens = np.minimum(tokens, tok.n_bins - 1)
        actions[:, i] = detokenize(tok, tokens)
        prefix[np.arange(n), i * tok.n_bins + tokens] = 1.0
    return actions


def policy_sample_batch(policy: PolicyHandle, states: Array, k: int,
                        rng: np.random.Generator, mode: str = "sample") -> Array:
    """(B, state_dim) states -> (B, k, d_action) i.i.d. action samples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2:
        raise ValueError("states must be (batch, state_dim)")
    policy.sample_calls += 1
    b = len(states)
    rows = np.repeat(states, k, axis=0)
    if policy.kind == "tanh_gaussian":
        mean, log_std = _gaussian_heads(policy, rows)
        noise = rng.standard_normal(mean.shape)
        flat = np.tanh(mean + np.exp(log_std) * noise)
    elif policy.kind == "diffusion_ddpm":
        flat = _ddpm_sample_rows(policy, rows, rng)
    else:
        flat = _ar_sample_rows(policy, rows, rng, mode)
    return flat.reshape(b, k, policy.d_action)


def policy_sample(policy: PolicyHandle, state: Array, k: int,
                  rng: np.random.Generator) -> Array:
    """k i.i.d. samples at one state, each in [-1,1]^d."""
    state = np.asarray(state, dtype=np.float64)
    return policy_sample_batch(policy, state[None, :], k, rng)[0]


def noise_template(policy: PolicyHandle, k: int) -> list[tuple[str, tuple, str]]:
    """(name, shape, draw-kind) triples describing one state's sampling noise.

    Lets callers pre-draw noise from per-state rng streams and run the
    expensive network passes batched across many states.
    """
    d = policy.d_action
    if policy.kind == "tanh_gaussian":
        return [("eps", (k, d), "normal")]
    if policy.kind == "diffusion_ddpm":
        tmpl = [("init", (k, d), "normal")]
        for t in range(policy.schedule.n_steps, 1, -1):
            tmpl.append((f"z{t}", (k, d), "normal"))
        return tmpl
    return [("u", (k, d), "uniform")]


def draw_noise(policy: PolicyHandle, k: int,
               rng: np.random.Generator) -> dict[str, Array]:
    out = {}
    for name, shape, kind in noise_template(policy, k):
        out[name] = rng.standard_normal(shape) if kind == "normal" \
            else rng.random(shape)
    return out


def sample_from_noise(policy: PolicyHandle, states: Array,
                      noise: dict[str, Array]) -> Array:
    """Deterministic sampling from pre-drawn noise: (B, state_dim) states and
    noise arrays of shape (B, k, ...) produce (B, k, d_action) actions."""
    states = np.asarray(states, dtype=np.float64)
    policy.sample_calls += 1
    b = len(states)
    first = next(iter(noise.values()))
    k = first.shape[1]
    rows = np.repeat(states, k, axis=0)
    d = policy.d_action
    if policy.kind == "tanh_gaussian":
        mean, log_std = _gaussian_heads(policy, rows)
        flat = np.tanh(mean + np.exp(log_std) * noise["eps"].reshape(b * k, d))
    elif policy.kind == "diffusion_ddpm":
        sched = policy.schedule
        a = noise["init"].reshape(b * k, d)
        n = len(rows)
        for t in range(sched.n_steps, 0, -1):
            alpha = sched.alphas[t - 1]
            alpha_bar = sched.alpha_bars[t - 1]
            beta = sched.betas[t - 1]
            eps = mlp_forward(policy.params,
                              _diffusion_input(policy, a, rows, np.full(n, t)))
            a = (a - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha)
            if t > 1:
                a = a + np.sqrt(beta) * noise[f"z{t}"].reshape(b * k, d)
        flat = np.clip(a, -1.0, 1.0)
    else:
        tok = policy.tokenizer
        n = len(rows)
        prefix = np.zeros((n, d * tok.n_bins))
        flat = np.zeros((n, d))
        u_rows = noise["u"].reshape(b * k, d)
        for i in range(d):
            logits = mlp_forward(policy.params, _ar_input(policy, rows, prefix, i))
            probs = _softmax(logits)
            tokens = (np.cumsum(probs, axis=1) < u_rows[:, i:i + 1]).sum(axis=1)
            tokens = np.minimum(tokens, tok.n_bins - 1)
            flat[:, i] = detokenize(tok, tokens)
            prefix[np.arange(n), i * tok.n_bins + tokens] = 1.0
    return flat.reshape(b, k, d)


def ddpm_sample(policy: PolicyHandle, state: Array,
                rng: np.random.Generator) -> Array:
    """One action via the full reverse denoising chain."""
    if policy.kind != "diffusion_ddpm":
        raise PolicyKindError("ddpm_sample needs a diffusion policy")
    state = np.asarray(state, dtype=np.float64)
    return _ddpm_sample_rows(policy, state[None, :], rng)[0]


def ar_sample(policy: PolicyHandle, state: Array, rng: np.random.Generator,
              mode: str = "sample") -> Array:
    """Draw (or argmax) each dimension's token sequentially, then detokenize."""
    if policy.kind != "autoregressive_categorical":
        raise PolicyKindError("ar_sample needs an autoregressive policy")
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    state = np.asarray(state, dtype=np.float64)
    return _ar_sample_rows(policy, state[None, :], rng, mode)[0]


# -- supervised losses ---------------------------------------------------------

def _normalize_weights(weights, n: int) -> Array:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must have positive sum")
    return w / total


def ddpm_loss(policy: PolicyHandle, states: Array, actions: Array,
              rng: np.random.Generator,
              weights: Array | None = None) -> tuple[float, MlpParams]:
    """Noise-prediction loss: E ||eps - eps_hat|| over uniform t and Gaussian eps."""
    if policy.kind != "diffusion_ddpm":
        raise PolicyKindError("ddpm_loss needs a diffusion policy")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    n = len(states)
    w = _normalize_weights(weights, n)
    sched = policy.schedule
    t = rng.integers(1, sched.n_steps + 1, size=n)
    eps = rng.standard_normal(actions.shape)
    ab = sched.alpha_bars[t - 1][:, None]
    noisy = np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * eps
    x = _diffusion_input(policy, noisy, states, t)
    pred, cache = mlp_forward_with_cache(policy.params, x)
    resid = eps - pred
    norms = np.linalg.norm(resid, axis=1)
    loss = float(np.dot(w, norms))
    safe = np.where(norms > 1e-12, norms, 1.0)
    out_grad = -(w / safe)[:, None] * resid
    out_grad[norms <= 1e-12] = 0.0
    grads, _ = mlp_backward_from_cache(policy.params, cache, out_grad)
    return loss, grads


def ar_loss(policy: PolicyHandle, states: Array, actions: Array,
            weights: Array | None = None) -> tuple[float, MlpParams]:
    """Teacher-forced cross-entropy, averaged over action dimensions."""
    if policy.kind != "autoregressive_categorical":
        raise PolicyKindError("ar_loss needs an autoregressive policy")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    tok = policy.tokenizer
    n, d = actions.shape
    w = _normalize_weights(weights, n)
    tokens = tokenize(tok, actions)

    # Rows for every (example, dim) pair share one forward/backward pass.
    xs, targets, row_w = [], [], []
    for i in range(d):
        prefix = np.zeros((n, d * tok.n_bins))
        for j in range(i):
            prefix[np.arange(n), j * tok.n_bins + tokens[:, j]] = 1.0
        xs.append(_ar_input(policy, states, prefix, i))
        targets.append(tokens[:, i])
        row_w.append(w / d)
    x = np.concatenate(xs, axis=0)
    target = np.concatenate(targets)
    rw = np.concatenate(row_w)

    logits, cache = mlp_forward_with_cache(policy.params, x)
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = log_probs[np.arange(len(target)), target]
    loss = float(-np.dot(rw, picked))
    out_grad = np.exp(log_probs) * rw[:, None]
    out_grad[np.arange(len(target)), target] -= rw
    grads, _ = mlp_backward_from_cache(policy.params, cache, out_grad)
    return loss, grads


def gaussian_loss(policy: PolicyHandle, states: Array, actions: Array,
                  weights: Array | None = None) -> tuple[float, MlpParams]:
    """Negative log likelihood under the tanh-squashed diagonal Gaussian."""
    if policy.kind != "tanh_gaussian":
        raise PolicyKindError("gaussian_loss needs a tanh-Gaussian policy")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if np.any(np.abs(actions) > 1.0):
        raise ValueError("actions must lie in [-1, 1]")
    n = len(states)
    w = _normalize_weights(weights, n)
    a = np.clip(actions, -1.0 + ATANH_CLIP, 1.0 - ATANH_CLIP)
    u = np.arctanh(a)
    out, cache = mlp_forward_with_cache(policy.params, states)
    mean = out[:, :policy.d_action]
    raw_log_std = out[:, policy.d_action:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * log_std)
    diff = u - mean
    per_dim = 0.5 * np.log(2.0 * np.pi) + log_std + 0.5 * diff * diff * inv_var \
        + np.log(1.0 - a * a)
    loss = float(np.dot(w, per_dim.sum(axis=1)))
    dmean = -diff * inv_var * w[:, None]
    dlog_std = (1.0 - diff * diff * inv_var) * w[:, None]
    dlog_std *= (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
    grads, _ = mlp_backward_from_cache(
        policy.params, cache, np.concatenate([dmean, dlog_std], axis=1))
    return loss, grads


def policy_loss(policy: PolicyHandle, states: Array, actions: Array,
                rng: np.random.Generator | None = None,
                weights: Array | None = None) -> tuple[float, MlpParams]:
    """Kind-appropriate distillation loss on (state, action) pairs."""
    if policy.kind == "diffusion_ddpm":
        if rng is None:
            raise ValueError("diffusion loss needs an rng stream")
        return ddpm_loss(policy, states, actions, rng, weights)
    if policy.kind == "autoregressive_categorical":
        return ar_loss(policy, states, actions, weights)
    return gaussian_loss(policy, states, actions, weights)


# -- checkpointing -------------------------------------------------------------

def save_policy(path, policy: PolicyHandle) -> None:
    meta = {
        "kind": policy.kind,
        "state_dim": policy.state_dim,
        "d_action": policy.d_action,
        "activation": policy.params.activation,
        "version": policy.version,
        "n_bins": policy.tokenizer.n_bins if policy.tokenizer else None,
    }
    records = mlp_records("net", policy.params)
    if policy.schedule is not None:
        records.append(("schedule/betas", policy.schedule.betas))
    payload = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(POLICY_MAGIC)
        fh.write(struct.pack("<B", POLICY_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        _write_records(fh, records)


def load_policy(path) -> PolicyHandle:
    with open(path, "rb") as fh:
        if fh.read(4) != POLICY_MAGIC:
            raise ValueError("not a policy checkpoint")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != POLICY_VERSION:
            raise ValueError(f"unsupported policy checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        records = _read_records(fh)
    params = mlp_from_records("net", records, meta["activation"])
    schedule = None
    by_name = dict(records)
    if "schedule/betas" in by_name:
        schedule = DiffusionSchedule(np.array(by_name["schedule/betas"]))
    tokenizer = TokenizerSpec(meta["n_bins"]) if meta["n_bins"] else None
    handle = PolicyHandle(meta["kind"], params, meta["state_dim"],
                          meta["d_action"], schedule, tokenizer)
    handle.version = meta["version"]
    return handle
