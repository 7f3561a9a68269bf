"""Comparison arms and diagnostics: cross-entropy-method action search (from
random init or seeded by a frozen policy), self-imitation distillation on
dataset actions, the no-global / no-local ablation switches, and the
Q-overestimation probe contrasting predicted values with realized returns.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import action_opt as ao
from . import critics as cr
from . import env as envmod
from . import numerics as nm
from . import policies as po
from . import training as tr

CEM_STD_FLOOR = 1e-3


@dataclass
class CemConfig:
    population: int = 64
    elites: int = 6
    iterations: int = 4
    init: str = "uniform_random"        # or "frozen_policy"
    init_std: float = 0.5

    def __post_init__(self) -> None:
        if self.elites > self.population:
            raise ValueError("elites must not exceed population")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init not in ("uniform_random", "frozen_policy"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class OverestimationRecord:
    step: int
    q_predicted: float
    mc_return: float

    @property
    def gap(self) -> float:
        return self.q_predicted - self.mc_return


def cem_optimize(critic, state: np.ndarray, config: CemConfig,
                 rng: np.random.Generator,
                 seed_policy: po.PolicyHandle | None = None,
                 d_action: int | None = None,
                 return_population: bool = False):
    """Iteratively refit a diagonal Gaussian to the top elites under the
    critic, resampling each round; returns the final best action."""
    state = np.asarray(state, dtype=np.float64)
    if config.init == "frozen_policy":
        if seed_policy is None:
            raise ValueError("frozen_policy init needs a seed policy")
        population = po.policy_sample(seed_policy, state, config.population, rng)
        d = population.shape[1]
    else:
        if d_action is not None:
            d = d_action
        elif isinstance(critic, cr.CriticEnsemble):
            d = critic.members[0].input_dim - len(state)
        elif seed_policy is not None:
            d = seed_policy.d_action
        else:
            raise ValueError("cannot infer action dimension; pass d_action")
        population = rng.uniform(-1.0, 1.0, size=(config.population, d))
    states_rows = np.repeat(state[None, :], config.population, axis=0)
    best_action = None
    best_q = -np.inf
    for _ in range(config.iterations):
        q = ao._q_batch(critic, states_rows, population, rng=rng)
        order = np.argsort(-q, kind="stable")
        elites = population[order[:config.elites]]
        if q[order[0]] > best_q:
            best_q = float(q[order[0]])
            best_action = population[order[0]].copy()
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), CEM_STD_FLOOR)
        population = np.clip(
            mean + std * rng.standard_normal((config.population, d)),
            -1.0, 1.0)
    if return_population:
        return best_action, population
    return best_action


@dataclass
class SilConfig:
    weighting: str = "relu"             # or "exp"
    exp_temperature: float = 1.0
    epochs: int = 1
    lr: float = 5e-5
    batch_size: int = 256

    def __post_init__(self) -> None:
        if self.weighting not in ("relu", "exp"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


def sil_distill(policy: po.PolicyHandle, critic: cr.CriticEnsemble,
                valuenet: cr.ValueNet | None, dataset, config: SilConfig,
                spec: envmod.PointMazeSpec | None = None,
                rng: np.random.Generator | None = None,
                adam_state: nm.AdamState | None = None):
    """Advantage-weighted imitation of dataset actions; never samples fresh
    actions from the policy.

    ``dataset`` may be an env Dataset or a replay buffer. Advantages are
    Q(s, a) minus the value net (when given) or the recorded Monte-Carlo
    return. Returns (policy, stats) with stats recording the sampling-counter
    delta (always zero) and the mean loss.
    """
    rng = rng or np.random.default_rng(0)
    samples_before = policy.sample_calls
    if hasattr(dataset, "all_states"):
        states, actions, mc = dataset._off[0], dataset._off[1], dataset._off[5]
        on = dataset._online_arrays()
        if on is not None:
            states = np.concatenate([states, on[0]])
            actions = np.concatenate([actions, on[1]])
            mc = np.concatenate([mc, on[5]])
    else:
        arrays = tr._transitions_to_arrays(dataset.transitions)
        states, actions, mc = arrays[0], arrays[1], arrays[5]
    obs = envmod.normalize_state(spec, states) if spec is not None else states
    q = cr.q_value(critic, obs, actions)
    if valuenet is not None:
        v = nm.mlp_forward(valuenet.params, obs)[:, 0]
    else:
        v = mc
    adv = q - v
    if config.weighting == "relu":
        weights = np.maximum(adv, 0.0)
    else:
        weights = np.exp(np.clip(adv / config.exp_temperature, -20.0, 5.0))
    total = weights.sum()
    stats = {"policy_sample_calls": 0, "mean_loss": 0.0,
             "positive_fraction": float((weights > 0).mean())}
    if total <= 0.0:
        stats["policy_sample_calls"] = policy.sample_calls - samples_before
        return policy, stats
    if adam_state is None:
        adam_state = nm.adam_init(policy.params, learning_rate=config.lr)
    adam_state.learning_rate = config.lr
    keep = weights > 0
    states_k, actions_k, weights_k = obs[keep], actions[keep], weights[keep]
    n = len(states_k)
    losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss, grads = po.policy_loss(policy, states_k[idx], actions_k[idx],
                                         rng, weights=weights_k[idx])
            nm.adam_step(adam_state, policy.params, grads)
            losses.append(loss)
    policy.version += 1
    stats["mean_loss"] = float(np.mean(losses))
    stats["policy_sample_calls"] = policy.sample_calls - samples_before
    return policy, stats


def overestimation_probe(critic, action_source: str,
                         spec: envmod.PointMazeSpec, n_rollouts: int,
                         discount: float,
                         policy: po.PolicyHandle | None = None,
                         action_cfg: ao.ActionOptConfig | None = None,
                         cem_cfg: CemConfig | None = None,
                         seed: int = 0) -> list[OverestimationRecord]:
    """Roll out with the chosen action source and compare the critic's
    prediction at the initial (state, action) against the realized
    discounted return."""
    if action_source not in ("cem", "parl", "base_policy"):
        raise ValueError(f"unknown action source {action_source!r}")
    action_cfg = action_cfg or ao.ActionOptConfig()
    cem_cfg = cem_cfg or CemConfig()

    def actor(state, rng):
        obs = envmod.normalize_state(spec, state)
        if action_source == "cem":
            return cem_optimize(critic, obs, cem_cfg, rng,
                                seed_policy=policy)
        if action_source == "parl":
            cands = ao.optimize_actions(policy, critic, obs, action_cfg, rng)
            _, action = ao.optimized_policy(cands, critic,
                                            action_cfg.selection, rng,
                                            action_cfg.selection_threshold)
            return action
        return po.policy_sample(policy, obs, 1, rng)[0]

    records = []
    for i in range(n_rollouts):
        rng = tr.stream(seed, "probe", action_source, i)
        start = envmod.env_reset(spec, rng)
        first_action = actor(start, rng)
        obs = envmod.normalize_state(spec, start)
        q_pred = cr.q_value(critic, obs, first_action)

        transitions = []
        state, action = start, first_action
        for t in range(spec.max_episode_steps):
            next_state, reward, done = envmod.env_step(spec, state, action,
                                                       steps_taken=t)
            transitions.append(reward)
            state = next_state
            if done:
                break
            action = actor(state, rng)
        realized = 0.0
        for reward in reversed(transitions):
            realized = reward + discount * realized
        records.append(OverestimationRecord(i, float(q_pred), float(realized)))
    return records


def ablation_config(base: ao.ActionOptConfig,
                    which: str) -> ao.ActionOptConfig:
    """no_global: a single policy sample; no_local: zero gradient steps."""
    if which == "no_global":
        return replace(base, n_samples=1, top_m=1)
    if which == "no_local":
        return replace(base, n_grad_steps=0)
    if which == "full":
        return base
    raise ValueError(f"unknown ablation {which!r}")
