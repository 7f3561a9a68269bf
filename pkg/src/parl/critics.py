"""Q-function learning under three loss regimes, with target networks and an
optional distributional head.

  calql   conservative TD: penalize Q on policy/optimized actions unless they
          fall below the observed Monte-Carlo return, reward Q on dataset
          actions, plus a Bellman term whose targets use optimized candidates
  iql     expectile regression of a state-value net against Q, then Bellman
          regression against V; never queries policy samples
  hybrid  plain Bellman regression with ensemble-min targets over candidate
          actions, for the randomly-initialized online critic

The ``hl_gauss`` head turns regression into classification over value bins:
targets are Gaussian mass integrated per bin, and predicted values are softmax
expectations, bounded in [v_min, v_max] by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .numerics import (
    ACTIVATIONS,
    Array,
    MlpParams,
    load_checkpoint,
    mlp_backward_from_cache,
    mlp_forward,
    mlp_forward_with_cache,
    mlp_from_records,
    mlp_init,
    mlp_records,
    save_checkpoint,
)

CRITIC_HEADS = ("scalar", "hl_gauss")


class ContractError(ValueError):
    """A required input (e.g. candidate actions) was not supplied."""


@dataclass
class CriticHead:
    kind: str = "scalar"
    n_bins: int = 51
    v_min: float = -100.0
    v_max: float = 0.0
    sigma: float | None = None      # defaults to 0.75 * bin width
    clamp_warnings: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CRITIC_HEADS:
            raise ValueError(f"unknown critic head {self.kind!r}")
        if self.kind == "hl_gauss" and not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")

    @property
    def out_dim(self) -> int:
        return 1 if self.kind == "scalar" else self.n_bins

    @property
    def bin_width(self) -> float:
        return (self.v_max - self.v_min) / self.n_bins

    @property
    def sigma_value(self) -> float:
        return self.sigma if self.sigma is not None else 0.75 * self.bin_width

    def bin_centers(self) -> Array:
        return self.v_min + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def bin_edges(self) -> Array:
        return self.v_min + np.arange(self.n_bins + 1) * self.bin_width


@dataclass
class CriticEnsemble:
    members: list[MlpParams]
    targets: list[MlpParams]
    ensemble_size: int
    subsample_size: int
    head: CriticHead
    polyak_tau: float = 0.005

    def __post_init__(self) -> None:
        if not (1 <= self.subsample_size <= self.ensemble_size):
            raise ValueError("need 1 <= subsample_size <= ensemble_size")
        if len(self.members) != self.ensemble_size or \
                len(self.targets) != self.ensemble_size:
            raise ValueError("member/target count must equal ensemble_size")


@dataclass
class ValueNet:
    params: MlpParams
    expectile_tau: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.expectile_tau < 1.0:
            raise ValueError("expectile tau must be in (0, 1)")


@dataclass
class CalQlConfig:
    cql_alpha: float = 0.005
    backup_mode: str = "expectation"     # or "max"
    discount: float = 0.99
    bellman_actions: str = "optimized"   # or "base": ablation switch

    def __post_init__(self) -> None:
        if self.cql_alpha < 0:
            raise ValueError("cql_alpha must be >= 0")
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if self.backup_mode not in ("expectation", "max"):
            raise ValueError(f"unknown backup mode {self.backup_mode!r}")
        if self.bellman_actions not in ("optimized", "base"):
            raise ValueError(f"unknown bellman_actions {self.bellman_actions!r}")


@dataclass
class TransitionBatch:
    states: Array
    actions: Array
    rewards: Array
    next_states: Array
    dones: Array            # float 0/1
    mc_returns: Array

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class CandidateBatch:
    """Stacked per-state candidate actions with their current Q-values."""

    actions: Array          # (batch, m, d_action)
    q_values: Array         # (batch, m)


def make_critic(state_dim: int, action_dim: int, rng: np.random.Generator,
                hidden: tuple[int, ...] = (64, 64), ensemble_size: int = 2,
                subsample_size: int = 2, head: CriticHead | None = None,
                polyak_tau: float = 0.005,
                activation: str = "relu") -> CriticEnsemble:
    head = head or CriticHead()
    sizes = [state_dim + action_dim, *hidden, head.out_dim]
    members = [mlp_init(sizes, rng, activation) for _ in range(ensemble_size)]
    targets = [m.copy() for m in members]
    return CriticEnsemble(members, targets, ensemble_size, subsample_size,
                          head, polyak_tau)


def make_value_net(state_dim: int, rng: np.random.Generator,
                   hidden: tuple[int, ...] = (64, 64), expectile_tau: float = 0.7,
                   activation: str = "relu") -> ValueNet:
    return ValueNet(mlp_init([state_dim, *hidden, 1], rng, activation),
                    expectile_tau)


# -- head plumbing --------------------------------------------------------------

def _head_values(head: CriticHead, raw: Array) -> tuple[Array, Array | None]:
    """Network output rows -> scalar values (plus softmax probs for hl_gauss)."""
    if head.kind == "scalar":
        return raw[:, 0], None
    z = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs @ head.bin_centers(), probs


def _head_value_grad(head: CriticHead, probs: Array | None, values: Array,
                     dvalues: Array) -> Array:
    """Chain dL/d(value) back to dL/d(network output)."""
    if head.kind == "scalar":
        return dvalues[:, None]
    centers = head.bin_centers()
    return dvalues[:, None] * probs * (centers[None, :] - values[:, None])


def _member_indices(critic: CriticEnsemble,
                    rng: np.random.Generator | None) -> Array:
    if critic.subsample_size >= critic.ensemble_size:
        return np.arange(critic.ensemble_size)
    if rng is None:
        return np.arange(critic.ensemble_size)
    return rng.choice(critic.ensemble_size, size=critic.subsample_size,
                      replace=False)


def _member_values(critic: CriticEnsemble, x: Array, use_targets: bool,
                   indices: Array) -> tuple[Array, list[Array | None]]:
    nets = critic.targets if use_targets else critic.members
    values = np.empty((len(x), len(indices)))
    probs: list[Array | None] = []
    for col, idx in enumerate(indices):
        raw = mlp_forward(nets[idx], x)
        v, p = _head_values(critic.head, raw)
        values[:, col] = v
        probs.append(p)
    return values, probs


def q_value(critic: CriticEnsemble, state: Array, action: Array,
            rng: np.random.Generator | None = None,
            use_targets: bool = False):
    """Min over a member subsample; scalar for single (state, action), else
    a vector over the batch."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    single = state.ndim == 1
    if single:
        state, action = state[None, :], action[None, :]
    x = np.concatenate([state, action], axis=1)
    indices = _member_indices(critic, rng)
    values, _ = _member_values(critic, x, use_targets, indices)
    out = values.min(axis=1)
    return float(out[0]) if single else out


def q_value_and_action_grad(critic: CriticEnsemble, states: Array,
                            actions: Array,
                            rng: np.random.Generator | None = None,
                            use_targets: bool = False) -> tuple[Array, Array]:
    """Reduced Q plus its gradient w.r.t. the action (argmin member's grad)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    x = np.concatenate([states, actions], axis=1)
    indices = _member_indices(critic, rng)
    nets = critic.targets if use_targets else critic.members
    head = critic.head
    values = np.empty((len(x), len(indices)))
    probs, caches = [], []
    for col, idx in enumerate(indices):
        raw, cache = mlp_forward_with_cache(nets[idx], x)
        v, p = _head_values(head, raw)
        values[:, col] = v
        probs.append(p)
        caches.append(cache)
    winner = values.argmin(axis=1)
    q = values[np.arange(len(x)), winner]
    grad = np.zeros_like(actions)
    for col, idx in enumerate(indices):
        mask = winner == col
        if not mask.any():
            continue
        dvalues = mask.astype(np.float64)
        out_grad = _head_value_grad(head, probs[col], values[:, col], dvalues)
        _, input_grad = mlp_backward_from_cache(nets[idx], caches[col], out_grad)
        grad[mask] = input_grad[mask, states.shape[1]:]
    return q, grad


def hl_gauss_targets(value, head: CriticHead) -> Array:
    """Per-bin Gaussian mass for scalar targets, renormalized over the support."""
    if head.kind != "hl_gauss":
        raise ValueError("hl_gauss_targets needs an hl_gauss head")
    values = np.atleast_1d(np.asarray(value, dtype=np.float64))
    outside = (values < head.v_min) | (values > head.v_max)
    if outside.any():
        head.clamp_warnings += int(outside.sum())
        values = np.clip(values, head.v_min, head.v_max)
    edges = head.bin_edges()
    sigma = head.sigma_value
    cdf = ndtr((edges[None, :] - values[:, None]) / sigma)
    mass = np.diff(cdf, axis=1)
    mass /= mass.sum(axis=1, keepdims=True)
    return mass[0] if np.isscalar(value) or np.ndim(value) == 0 else mass


def _coerce_candidates(candidates, what: str) -> CandidateBatch:
    if candidates is None:
        raise ContractError(f"{what} candidate sets are required")
    if isinstance(candidates, CandidateBatch):
        return candidates
    actions = np.stack([np.asarray(c.actions, dtype=np.float64)
                        for c in candidates])
    q_values = np.stack([np.asarray(c.q_values, dtype=np.float64)
                         for c in candidates])
    return CandidateBatch(actions, q_values)


def _softmax_rows(q: Array) -> Array:
    z = q - q.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _bootstrap_values(critic: CriticEnsemble, batch: TransitionBatch,
                      candidates: CandidateBatch, mode: str,
                      rng: np.random.Generator | None, discount: float) -> Array:
    """r + gamma * (1-done) * aggregate of target-min Q over the candidates."""
    b, m, d = candidates.actions.shape
    rows_s = np.repeat(batch.next_states, m, axis=0)
    rows_a = candidates.actions.reshape(b * m, d)
    x = np.concatenate([rows_s, rows_a], axis=1)
    indices = _member_indices(critic, rng)
    values, _ = _member_values(critic, x, True, indices)
    target_q = values.min(axis=1).reshape(b, m)
    if mode == "max":
        agg = target_q.max(axis=1)
    else:
        weights = _softmax_rows(candidates.q_values)
        agg = (weights * target_q).sum(axis=1)
    return batch.rewards + discount * (1.0 - batch.dones) * agg


def calql_critic_loss(critic: CriticEnsemble, config: CalQlConfig,
                      batch: TransitionBatch, optimized_actions,
                      policy_actions_next,
                      rng: np.random.Generator | None = None):
    """Conservative + calibrated + TD loss; candidates supply the policy
    samples in both the regularizer and the Bellman target."""
    cand_s = _coerce_candidates(optimized_actions, "current-state")
    cand_next = _coerce_candidates(policy_actions_next, "next-state")
    if np.any(np.isnan(batch.mc_returns)):
        raise ContractError("batch transitions must carry mc_return")
    b = len(batch)
    m = cand_s.actions.shape[1]
    y = _bootstrap_values(critic, batch, cand_next, config.backup_mode, rng,
                          config.discount)
    pi_weights = _softmax_rows(cand_s.q_values)

    x_data = np.concatenate([batch.states, batch.actions], axis=1)
    x_cand = np.concatenate([
        np.repeat(batch.states, m, axis=0),
        cand_s.actions.reshape(b * m, -1),
    ], axis=1)
    x = np.concatenate([x_data, x_cand], axis=0)

    head = critic.head
    y_probs = hl_gauss_targets(y, head) if head.kind == "hl_gauss" else None
    alpha = config.cql_alpha

    grads: list[MlpParams] = []
    td_terms, cons_terms, mean_qs = [], [], []
    for params in critic.members:
        raw, cache = mlp_forward_with_cache(params, x)
        values, probs = _head_values(head, raw)
        q_data, q_cand = values[:b], values[b:].reshape(b, m)
        calibrated = np.maximum(q_cand, batch.mc_returns[:, None])
        conservative = float(np.mean((pi_weights * calibrated).sum(axis=1)
                                     - q_data))
        dval = np.zeros(b + b * m)
        if head.kind == "scalar":
            td = 0.5 * float(np.mean((q_data - y) ** 2))
            dval[:b] = (q_data - y) / b
            out_grad = None
        else:
            logits = raw[:b]
            z = logits - logits.max(axis=1, keepdims=True)
            log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            td = float(-np.mean((y_probs * log_probs).sum(axis=1)))
            ce_grad = (np.exp(log_probs) - y_probs) / b
            out_grad = np.zeros_like(raw)
            out_grad[:b] = ce_grad
        # conservative gradient wrt scalar q values
        dval[:b] += -alpha / b
        keep = (q_cand > batch.mc_returns[:, None]).astype(np.float64)
        dval[b:] = (alpha * pi_weights * keep / b).reshape(-1)
        chained = _head_value_grad(head, probs, values, dval)
        if out_grad is None:
            out_grad = chained
        else:
            out_grad += chained
        g, _ = mlp_backward_from_cache(params, cache, out_grad)
        grads.append(g)
        td_terms.append(td)
        cons_terms.append(conservative)
        mean_qs.append(float(q_data.mean()))

    loss = float(np.mean([alpha * c + t for c, t in zip(cons_terms, td_terms)]))
    stats = {
        "td_term": float(np.mean(td_terms)),
        "conservative_term": float(np.mean(cons_terms)),
        "mean_q": float(np.mean(mean_qs)),
        "mean_target": float(y.mean()),
    }
    return loss, grads, stats


def expectile_loss(u: Array, tau: float) -> Array:
    """L(u) = |tau - 1(u < 0)| * u^2, elementwise."""
    return np.abs(tau - (u < 0.0)) * u * u


def iql_losses(critic: CriticEnsemble, valuenet: ValueNet,
               batch: TransitionBatch, rng: np.random.Generator | None = None,
               discount: float = 0.99):
    """Expectile value regression plus Bellman regression; dataset actions only.

    Returns (value_loss, critic_loss, grads) with grads = (value net grads,
    list of member grads).
    """
    b = len(batch)
    tau = valuenet.expectile_tau
    x_data = np.concatenate([batch.states, batch.actions], axis=1)
    indices = _member_indices(critic, rng)
    target_vals, _ = _member_values(critic, x_data, True, indices)
    q_target = target_vals.min(axis=1)

    v_raw, v_cache = mlp_forward_with_cache(valuenet.params, batch.states)
    v = v_raw[:, 0]
    u = q_target - v
    value_loss = float(np.mean(expectile_loss(u, tau)))
    dv = (-2.0 * np.abs(tau - (u < 0.0)) * u / b)[:, None]
    value_grads, _ = mlp_backward_from_cache(valuenet.params, v_cache, dv)

    v_next = mlp_forward(valuenet.params, batch.next_states)[:, 0]
    y = batch.rewards + (1.0 - batch.dones) * discount * v_next
    head = critic.head
    y_probs = hl_gauss_targets(y, head) if head.kind == "hl_gauss" else None
    critic_grads: list[MlpParams] = []
    critic_losses = []
    for params in critic.members:
        raw, cache = mlp_forward_with_cache(params, x_data)
        values, probs = _head_values(head, raw)
        if head.kind == "scalar":
            critic_losses.append(float(np.mean((values - y) ** 2)))
            out_grad = _head_value_grad(head, probs, values,
                                        2.0 * (values - y) / b)
        else:
            z = raw - raw.max(axis=1, keepdims=True)
            log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            critic_losses.append(float(-np.mean((y_probs * log_probs).sum(axis=1))))
            out_grad = (np.exp(log_probs) - y_probs) / b
        g, _ = mlp_backward_from_cache(params, cache, out_grad)
        critic_grads.append(g)
    critic_loss = float(np.mean(critic_losses))
    return value_loss, critic_loss, (value_grads, critic_grads)


def td_loss_hybrid(critic: CriticEnsemble, batch: TransitionBatch,
                   policy_actions_next, rng: np.random.Generator | None = None,
                   discount: float = 0.99):
    """Plain Bellman regression; targets are ensemble-min over candidates."""
    cand_next = _coerce_candidates(policy_actions_next, "next-state")
    b = len(batch)
    y = _bootstrap_values(critic, batch, cand_next, "expectation", rng, discount)
    x_data = np.concatenate([batch.states, batch.actions], axis=1)
    head = critic.head
    y_probs = hl_gauss_targets(y, head) if head.kind == "hl_gauss" else None
    grads: list[MlpParams] = []
    losses, mean_qs = [], []
    for params in critic.members:
        raw, cache = mlp_forward_with_cache(params, x_data)
        values, probs = _head_values(head, raw)
        if head.kind == "scalar":
            losses.append(float(np.mean((values - y) ** 2)))
            out_grad = _head_value_grad(head, probs, values,
                                        2.0 * (values - y) / b)
        else:
            z = raw - raw.max(axis=1, keepdims=True)
            log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            losses.append(float(-np.mean((y_probs * log_probs).sum(axis=1))))
            out_grad = (np.exp(log_probs) - y_probs) / b
        g, _ = mlp_backward_from_cache(params, cache, out_grad)
        grads.append(g)
        mean_qs.append(float(values.mean()))
    loss = float(np.mean(losses))
    stats = {"mean_q": float(np.mean(mean_qs)), "mean_target": float(y.mean())}
    return loss, grads, stats


def polyak_update(critic: CriticEnsemble, tau: float | None = None) -> CriticEnsemble:
    """targets <- (1 - tau) * targets + tau * members, in place."""
    tau = critic.polyak_tau if tau is None else tau
    for member, target in zip(critic.members, critic.targets):
        for tw, mw in zip(target.layer_weights, member.layer_weights):
            tw *= 1.0 - tau
            tw += tau * mw
        for tb, mb in zip(target.layer_biases, member.layer_biases):
            tb *= 1.0 - tau
            tb += tau * mb
    return critic


# -- checkpointing ----------------------------------------------------------------

def save_critic(path, critic: CriticEnsemble,
                valuenet: ValueNet | None = None) -> None:
    """All ensemble members, targets, and numeric metadata as flat records."""
    head = critic.head
    records = [
        ("meta/ensemble", np.array([critic.ensemble_size, critic.subsample_size,
                                    critic.polyak_tau,
                                    ACTIVATIONS.index(critic.members[0].activation)])),
        ("meta/head", np.array([CRITIC_HEADS.index(head.kind), head.n_bins,
                                head.v_min, head.v_max, head.sigma_value])),
    ]
    for i, (member, target) in enumerate(zip(critic.members, critic.targets)):
        records.extend(mlp_records(f"member{i}", member))
        records.extend(mlp_records(f"target{i}", target))
    if valuenet is not None:
        records.append(("meta/value", np.array([valuenet.expectile_tau])))
        records.extend(mlp_records("value", valuenet.params))
    save_checkpoint(path, records)


def load_critic(path) -> tuple[CriticEnsemble, ValueNet | None]:
    records = load_checkpoint(path)
    by_name = dict(records)
    size, subsample, tau, act_idx = by_name["meta/ensemble"]
    head_kind, n_bins, v_min, v_max, sigma = by_name["meta/head"]
    activation = ACTIVATIONS[int(act_idx)]
    head = CriticHead(CRITIC_HEADS[int(head_kind)], int(n_bins),
                      float(v_min), float(v_max), float(sigma))
    members = [mlp_from_records(f"member{i}", records, activation)
               for i in range(int(size))]
    targets = [mlp_from_records(f"target{i}", records, activation)
               for i in range(int(size))]
    critic = CriticEnsemble(members, targets, int(size), int(subsample),
                            head, float(tau))
    valuenet = None
    if "meta/value" in by_name:
        valuenet = ValueNet(mlp_from_records("value", records, activation),
                            float(by_name["meta/value"][0]))
    return critic, valuenet
