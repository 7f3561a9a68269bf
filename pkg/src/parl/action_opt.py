"""Two-stage action optimization against a learned Q-function.

Global stage: sample k actions from the base policy, keep the top m under the
critic. Local stage: push each survivor uphill with T gradient-ascent steps on
the action itself, keeping a step only if it strictly increases Q (one
rejected step ends that candidate's ascent). The optimized set defines a
categorical policy: p(a) proportional to exp(Q(s,a)) over the candidates,
selected by argmax or sampling, or automatically based on the Q-value spread.

Any object with ``action_values(states, actions)`` and
``action_value_grads(states, actions)`` methods can stand in for the critic;
a :class:`CriticEnsemble` is adapted automatically.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .critics import CriticEnsemble, q_value, q_value_and_action_grad
from .numerics import Array
from .policies import PolicyHandle, policy_sample_batch

SELECTION_MODES = ("argmax", "softmax_sample", "auto")


@dataclass
class OptCounters:
    """Instrumentation shared by all local-optimization calls."""

    grad_errors: int = 0

    def reset(self) -> None:
        self.grad_errors = 0


counters = OptCounters()


@dataclass
class ActionOptConfig:
    n_samples: int = 32
    top_m: int = 10
    n_grad_steps: int = 10
    step_size: float = 3e-4
    include_dataset_action: bool = True
    selection: str = "auto"
    selection_threshold: float = 0.1
    accept_test: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.top_m <= self.n_samples:
            raise ValueError("need 1 <= top_m <= n_samples")
        if self.n_grad_steps < 0:
            raise ValueError("n_grad_steps must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")


@dataclass
class ActionCandidateSet:
    """Q-ranked candidate actions for one state, best first."""

    state: Array
    actions: Array                  # (n, d), descending Q
    q_values: Array                 # (n,)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.provenance:
            self.provenance = ["policy_sample"] * len(self.actions)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def best_action(self) -> Array:
        return self.actions[0]


class FunctionQ:
    """Adapter turning plain callables into the critic protocol (handy for
    analytic test critics)."""

    def __init__(self, value_fn, grad_fn=None):
        self._value_fn = value_fn
        self._grad_fn = grad_fn

    def action_values(self, states: Array, actions: Array,
                      rng=None) -> Array:
        return np.asarray(self._value_fn(states, actions), dtype=np.float64)

    def action_value_grads(self, states: Array, actions: Array,
                           rng=None) -> tuple[Array, Array]:
        values = self.action_values(states, actions)
        if self._grad_fn is None:
            raise NotImplementedError("no gradient function supplied")
        return values, np.asarray(self._grad_fn(states, actions),
                                  dtype=np.float64)


def _q_batch(critic, states: Array, actions: Array, rng=None) -> Array:
    if isinstance(critic, CriticEnsemble):
        return q_value(critic, states, actions, rng=rng)
    return critic.action_values(states, actions, rng=rng)


def _q_grad_batch(critic, states: Array, actions: Array,
                  rng=None) -> tuple[Array, Array]:
    if isinstance(critic, CriticEnsemble):
        return q_value_and_action_grad(critic, states, actions, rng=rng)
    return critic.action_value_grads(states, actions, rng=rng)


def _rank_descending(q: Array) -> Array:
    """Indices sorting q descending; ties resolved by earlier index."""
    return np.argsort(-q, kind="stable")


def global_optimize(policy: PolicyHandle | None, critic, state: Array,
                    config: ActionOptConfig, rng: np.random.Generator,
                    dataset_action: Array | None = None,
                    presampled: Array | None = None) -> ActionCandidateSet:
    """Sample k actions, keep the Q-ranked top m; the dataset action, when
    included, bypasses the filter and joins the ranked set."""
    state = np.asarray(state, dtype=np.float64)
    if presampled is not None:
        samples = np.asarray(presampled, dtype=np.float64)
    else:
        samples = policy_sample_batch(policy, state[None, :],
                                      config.n_samples, rng)[0]
    states_rows = np.repeat(state[None, :], len(samples), axis=0)
    q = _q_batch(critic, states_rows, samples, rng=rng)
    order = _rank_descending(q)[:config.top_m]
    actions = samples[order]
    q_vals = q[order]
    provenance = ["policy_sample"] * len(actions)
    if dataset_action is not None and config.include_dataset_action:
        dataset_action = np.asarray(dataset_action, dtype=np.float64)
        q_data = _q_batch(critic, state[None, :], dataset_action[None, :],
                          rng=rng)
        actions = np.concatenate([actions, dataset_action[None, :]], axis=0)
        q_vals = np.concatenate([q_vals, q_data])
        provenance.append("dataset_action")
        order = _rank_descending(q_vals)
        actions, q_vals = actions[order], q_vals[order]
        provenance = [provenance[i] for i in order]
    return ActionCandidateSet(state, actions, q_vals, provenance)


def _local_optimize_rows(critic, states_rows: Array, actions: Array,
                         q_init: Array, config: ActionOptConfig,
                         rng=None) -> tuple[Array, Array]:
    """Vectorized accepted-ascent over stacked (state, action) rows."""
    actions = actions.copy()
    q = q_init.copy()
    active = np.ones(len(actions), dtype=bool)
    for _ in range(config.n_grad_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        _, grad = _q_grad_batch(critic, states_rows[idx], actions[idx], rng=rng)
        finite = np.isfinite(grad).all(axis=1)
        if not finite.all():
            counters.grad_errors += int((~finite).sum())
            active[idx[~finite]] = False
            idx = idx[finite]
            grad = grad[finite]
            if len(idx) == 0:
                break
        proposed = np.clip(actions[idx] + config.step_size * grad, -1.0, 1.0)
        q_new = _q_batch(critic, states_rows[idx], proposed, rng=rng)
        if config.accept_test:
            better = q_new > q[idx]
            take = idx[better]
            actions[take] = proposed[better]
            q[take] = q_new[better]
            active[idx[~better]] = False
        else:
            actions[idx] = proposed
            q[idx] = q_new
    return actions, q


def local_optimize(critic, candidates: ActionCandidateSet,
                   config: ActionOptConfig, rng=None) -> ActionCandidateSet:
    """Accepted gradient-ascent on each candidate independently, then re-rank."""
    if config.n_grad_steps == 0:
        return candidates
    n = len(candidates)
    states_rows = np.repeat(candidates.state[None, :], n, axis=0)
    actions, q = _local_optimize_rows(critic, states_rows, candidates.actions,
                                      candidates.q_values, config, rng=rng)
    order = _rank_descending(q)
    return ActionCandidateSet(candidates.state, actions[order], q[order],
                              [candidates.provenance[i] for i in order])


def optimized_policy(candidates: ActionCandidateSet, critic=None,
                     selection: str = "argmax",
                     rng: np.random.Generator | None = None,
                     threshold: float = 0.1) -> tuple[Array, Array]:
    """Softmax-over-Q distribution on the candidate set plus a chosen action.

    auto mode takes the argmax when the Q-value spread is below ``threshold``
    and samples otherwise.
    """
    if len(candidates) == 0:
        raise ValueError("candidate set is empty")
    q = candidates.q_values
    z = q - q.max()
    e = np.exp(z)
    probs = e / e.sum()
    mode = selection
    if selection == "auto":
        mode = "argmax" if float(np.std(q)) < threshold else "softmax_sample"
    if mode == "argmax":
        chosen = candidates.actions[int(np.argmax(q))]
    else:
        if rng is None:
            raise ValueError("softmax sampling needs an rng")
        chosen = candidates.actions[rng.choice(len(probs), p=probs)]
    return probs, chosen


def optimize_actions(policy: PolicyHandle | None, critic, state: Array,
                     config: ActionOptConfig, rng: np.random.Generator,
                     dataset_action: Array | None = None,
                     presampled: Array | None = None) -> ActionCandidateSet:
    """Global then local optimization; the full two-stage procedure."""
    candidates = global_optimize(policy, critic, state, config, rng,
                                 dataset_action, presampled)
    return local_optimize(critic, candidates, config, rng=rng)


def optimize_actions_batch(policy: PolicyHandle | None, critic, states: Array,
                           config: ActionOptConfig, rng: np.random.Generator,
                           dataset_actions: Array | None = None,
                           presampled: Array | None = None
                           ) -> list[ActionCandidateSet]:
    """Vectorized two-stage optimization over a batch of states.

    ``presampled`` is (batch, k, d) raw policy samples (e.g. from the action
    cache); ``dataset_actions`` is (batch, d).
    """
    states = np.asarray(states, dtype=np.float64)
    b = len(states)
    if presampled is not None:
        samples = np.asarray(presampled, dtype=np.float64)
    else:
        samples = policy_sample_batch(policy, states, config.n_samples, rng)
    k = samples.shape[1]
    d = samples.shape[2]
    rows_s = np.repeat(states, k, axis=0)
    q = _q_batch(critic, rows_s, samples.reshape(b * k, d), rng=rng).reshape(b, k)
    order = np.argsort(-q, axis=1, kind="stable")[:, :config.top_m]
    row_idx = np.arange(b)[:, None]
    top_actions = samples[row_idx, order]          # (b, m, d)
    top_q = q[row_idx, order]                      # (b, m)
    prov = [["policy_sample"] * config.top_m for _ in range(b)]
    if dataset_actions is not None and config.include_dataset_action:
        dataset_actions = np.asarray(dataset_actions, dtype=np.float64)
        q_data = _q_batch(critic, states, dataset_actions, rng=rng)
        top_actions = np.concatenate([top_actions, dataset_actions[:, None, :]],
                                     axis=1)
        top_q = np.concatenate([top_q, q_data[:, None]], axis=1)
        for p in prov:
            p.append("dataset_action")
    m = top_actions.shape[1]
    flat_states = np.repeat(states, m, axis=0)
    flat_actions = top_actions.reshape(b * m, d)
    flat_q = top_q.reshape(b * m)
    if config.n_grad_steps > 0:
        flat_actions, flat_q = _local_optimize_rows(
            critic, flat_states, flat_actions, flat_q, config, rng=rng)
    actions = flat_actions.reshape(b, m, d)
    q_vals = flat_q.reshape(b, m)
    out = []
    for i in range(b):
        order_i = _rank_descending(q_vals[i])
        out.append(ActionCandidateSet(states[i], actions[i][order_i],
                                      q_vals[i][order_i],
                                      [prov[i][j] for j in order_i]))
    return out
