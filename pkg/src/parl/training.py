"""Training orchestration: offline pretraining, online fine-tuning, the
optimized-action distillation cycle, versioned action caching, replay
mixing, and evaluation.

The loop structure: the critic trains on mixed offline/online batches whose
policy actions come from the two-stage action optimizer (base-policy samples
served through a versioned cache); every distillation epoch re-fits the policy
to freshly optimized actions, bumps the policy version, and recomputes the
cache. Acting online and during evaluation runs the same optimizer at the
current state.

Determinism: every stochastic unit of work derives its own rng stream from
(seed, named tags), so results are independent of batching and worker count.
"""
from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import action_opt as ao
from . import critics as cr
from . import env as envmod
from . import numerics as nm
from . import policies as po

logger = logging.getLogger("parl.training")

ALGORITHMS = ("calql_parl", "iql_parl", "hybrid_parl")

METRIC_COLUMNS = ("step", "episodes", "success_rate", "mean_return",
                  "critic_loss", "conservative_term", "distill_loss",
                  "mean_q", "cache_hit_rate")

_QUANTUM = 1e-9


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the caller should keep the last checkpoint."""


def stream(seed: int, *tags) -> np.random.Generator:
    """Deterministic named rng stream; independent of call order elsewhere."""
    ints = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            ints.append(int(tag) & 0xFFFFFFFF)
        else:
            digest = hashlib.blake2b(str(tag).encode(), digest_size=4).digest()
            ints.append(int.from_bytes(digest, "little"))
    return np.random.default_rng(ints)


# -- replay buffer ---------------------------------------------------------------

@dataclass
class ReplayBuffer:
    offline: envmod.Dataset
    mixing_ratio: float = 0.5
    capacity: int = 200_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ValueError("mixing_ratio must be in [0, 1]")
        self._off = _transitions_to_arrays(self.offline.transitions)
        self.online: list[envmod.Transition] = []
        self._on = None        # rebuilt lazily after appends

    def __len__(self) -> int:
        return len(self.offline.transitions) + len(self.online)

    def append_episode(self, transitions: list[envmod.Transition]) -> None:
        self.online.extend(transitions)
        if len(self.online) > self.capacity:
            self.online = self.online[-self.capacity:]
        self._on = None

    def _online_arrays(self):
        if self._on is None and self.online:
            self._on = _transitions_to_arrays(self.online)
        return self._on

    def sample(self, rng: np.random.Generator,
               batch_size: int) -> cr.TransitionBatch:
        """round(mixing_ratio * batch) offline rows, the rest online; all
        offline while the online buffer is empty."""
        on = self._online_arrays()
        n_off = batch_size if on is None else \
            int(round(self.mixing_ratio * batch_size))
        idx_off = rng.integers(len(self._off[0]), size=n_off)
        parts = [tuple(a[idx_off] for a in self._off)]
        if batch_size - n_off > 0 and on is not None:
            idx_on = rng.integers(len(on[0]), size=batch_size - n_off)
            parts.append(tuple(a[idx_on] for a in on))
        stacked = tuple(np.concatenate(cols) for cols in zip(*parts))
        return cr.TransitionBatch(*stacked)

    def all_states(self) -> np.ndarray:
        states = [self._off[0]]
        on = self._online_arrays()
        if on is not None:
            states.append(on[0])
        return np.concatenate(states)


def _transitions_to_arrays(transitions: list[envmod.Transition]):
    return (
        np.stack([t.state for t in transitions]),
        np.stack([t.action for t in transitions]),
        np.array([t.reward for t in transitions]),
        np.stack([t.next_state for t in transitions]),
        np.array([1.0 if t.done else 0.0 for t in transitions]),
        np.array([t.mc_return for t in transitions]),
    )


# -- optimized-action dataset ------------------------------------------------------

@dataclass
class OptimizedActionDataset:
    states: np.ndarray     # (n, state_dim)
    actions: np.ndarray    # (n, d_action)
    weights: np.ndarray    # (n,)
    source_policy_version: int

    def __len__(self) -> int:
        return len(self.states)


# -- versioned action cache --------------------------------------------------------

@dataclass
class ActionCache:
    seed: int = 0
    n_samples: int = 32
    hits: int = 0
    misses: int = 0

    def __post_init__(self) -> None:
        self.entries: dict[bytes, tuple[int, np.ndarray]] = {}

    @staticmethod
    def key_of(state: np.ndarray) -> bytes:
        q = np.round(np.asarray(state, dtype=np.float64) / _QUANTUM)
        return q.astype(np.int64).tobytes()

    def state_stream(self, key: bytes, version: int) -> np.random.Generator:
        digest = hashlib.blake2b(key, digest_size=8).digest()
        return np.random.default_rng(
            [self.seed, version, int.from_bytes(digest, "little")])

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def reset_counters(self) -> None:
        self.hits = 0
        self.misses = 0


def cache_lookup_or_fill(cache: ActionCache, policy: po.PolicyHandle,
                         state: np.ndarray, k: int,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Serve cached base-policy samples for this state unless the policy
    version moved on; a miss triggers exactly one sampling call."""
    key = cache.key_of(state)
    entry = cache.entries.get(key)
    if entry is not None and entry[0] == policy.version and len(entry[1]) == k:
        cache.hits += 1
        return entry[1]
    cache.misses += 1
    if rng is None:
        rng = cache.state_stream(key, policy.version)
    samples = po.policy_sample(policy, state, k, rng)
    cache.entries[key] = (policy.version, samples)
    return samples


def cache_gather(cache: ActionCache, policy: po.PolicyHandle,
                 states: np.ndarray, k: int) -> np.ndarray:
    """(B, k, d) samples for a batch of states via the cache."""
    out = np.empty((len(states), k, policy.d_action))
    for i, s in enumerate(states):
        out[i] = cache_lookup_or_fill(cache, policy, s, k)
    return out


def recompute_cache(cache: ActionCache, policy: po.PolicyHandle,
                    states: np.ndarray, k: int | None = None,
                    workers: int = 1) -> None:
    """Rebuild the cache for every given state at the current policy version.

    Noise is drawn from each state's own stream, so cache content is
    independent of batching, ordering, and worker count.
    """
    k = k or cache.n_samples
    version = policy.version
    # drop leftovers from earlier policy versions (e.g. episode-final states)
    stale = [key for key, (v, _) in cache.entries.items() if v != version]
    for key in stale:
        del cache.entries[key]
    keys = [cache.key_of(s) for s in states]
    fresh = [i for i, key in enumerate(keys) if key not in cache.entries]
    if not fresh:
        return

    def fill_chunk(chunk: list[int]) -> list[tuple[int, np.ndarray]]:
        sub_states = states[chunk]
        noise_stack: dict[str, list[np.ndarray]] = {}
        for i in chunk:
            noise = po.draw_noise(policy, k, cache.state_stream(keys[i], version))
            for name, arr in noise.items():
                noise_stack.setdefault(name, []).append(arr)
        stacked = {name: np.stack(arrs) for name, arrs in noise_stack.items()}
        samples = po.sample_from_noise(policy, sub_states, stacked)
        return [(i, samples[j]) for j, i in enumerate(chunk)]

    chunk_size = 512
    chunks = [fresh[i:i + chunk_size] for i in range(0, len(fresh), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fill_chunk, chunks))
    else:
        results = [fill_chunk(c) for c in chunks]
    for group in results:
        for i, sample in group:
            cache.entries[keys[i]] = (version, sample)


# -- train loop config ---------------------------------------------------------------

@dataclass
class TrainLoopConfig:
    algorithm: str = "calql_parl"
    offline_grad_steps: int = 2000
    bc_grad_steps: int = 2000
    online_env_episodes: int = 200
    warmup_episodes: int = 20
    utd_ratio: int | None = None       # resolved: 1, or 10 for hybrid
    eval_every: int = 25
    eval_episodes: int = 32
    distill_lr: float = 5e-5
    critic_lr: float = 3e-4
    batch_size: int = 256
    mixing_ratio: float = 0.5
    distill_every_episodes: int = 10
    distill_every_steps: int = 10_000
    distill_epochs: int = 1
    distill_batch_size: int = 256
    distill_max_states: int = 0        # 0 = annotate every known state
    iql_expectile: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        for name in ("offline_grad_steps", "bc_grad_steps",
                     "online_env_episodes", "warmup_episodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def resolved_utd(self) -> int:
        if self.utd_ratio is not None:
            return self.utd_ratio
        return 10 if self.algorithm == "hybrid_parl" else 1


# -- acting ------------------------------------------------------------------------

def act(policy: po.PolicyHandle, critic: cr.CriticEnsemble, spec,
        state: np.ndarray, action_cfg: ao.ActionOptConfig,
        rng: np.random.Generator,
        cache: ActionCache | None = None) -> np.ndarray:
    """One environment action from the optimized candidate policy."""
    obs = envmod.normalize_state(spec, state)
    presampled = None
    if cache is not None:
        presampled = cache_lookup_or_fill(cache, policy, obs,
                                          action_cfg.n_samples)
    cands = ao.optimize_actions(policy, critic, obs, action_cfg, rng,
                                presampled=presampled)
    _, action = ao.optimized_policy(cands, critic, action_cfg.selection, rng,
                                    action_cfg.selection_threshold)
    return action


def rollout_episode(spec, actor, rng: np.random.Generator,
                    discount: float) -> tuple[list[envmod.Transition], bool, float]:
    """Roll one episode with ``actor(state, rng) -> action``; transitions come
    back annotated with Monte-Carlo returns."""
    state = envmod.env_reset(spec, rng)
    transitions: list[envmod.Transition] = []
    success = False
    for t in range(spec.max_episode_steps):
        action = actor(state, rng)
        next_state, reward, done = envmod.env_step(spec, state, action,
                                                   steps_taken=t)
        # recorded done marks true termination; truncations keep bootstrapping
        transitions.append(envmod.Transition(state, action, reward,
                                             next_state, reward == 0.0))
        state = next_state
        if done:
            success = reward == 0.0
            break
    running = 0.0
    for i in range(len(transitions) - 1, -1, -1):
        running = transitions[i].reward + discount * running
        transitions[i].mc_return = running
    ret = transitions[0].mc_return if transitions else 0.0
    return transitions, success, ret


def evaluate(policy: po.PolicyHandle, critic: cr.CriticEnsemble | None, spec,
             n_episodes: int, seed: int,
             action_cfg: ao.ActionOptConfig | None = None,
             discount: float = 0.99, workers: int = 1,
             actor=None) -> tuple[float, float]:
    """Greedy-config rollouts without touching any buffer; returns
    (success fraction, mean discounted return)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    action_cfg = action_cfg or ao.ActionOptConfig()

    def default_actor(state, rng):
        return act(policy, critic, spec, state, action_cfg, rng)

    actor = actor or default_actor

    def run_one(ep: int) -> tuple[bool, float]:
        rng = stream(seed, "eval", ep)
        _, success, ret = rollout_episode(spec, actor, rng, discount)
        return success, ret

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, range(n_episodes)))
    else:
        results = [run_one(ep) for ep in range(n_episodes)]
    successes = [s for s, _ in results]
    returns = [r for _, r in results]
    return float(np.mean(successes)), float(np.mean(returns))


# -- distillation --------------------------------------------------------------------

def build_distill_dataset(states: np.ndarray, policy: po.PolicyHandle,
                          critic: cr.CriticEnsemble,
                          config: ao.ActionOptConfig,
                          rng: np.random.Generator | None = None,
                          cache: ActionCache | None = None
                          ) -> OptimizedActionDataset:
    """Annotate states with optimized actions: either the argmax candidate
    (weight 1) or every candidate weighted by its softmax-over-Q probability,
    per the selection rule."""
    rng = rng or np.random.default_rng(0)
    states = np.asarray(states, dtype=np.float64)
    presampled = None
    if cache is not None:
        presampled = cache_gather(cache, policy, states, config.n_samples)
    cand_sets = ao.optimize_actions_batch(policy, critic, states, config, rng,
                                          presampled=presampled)
    out_s, out_a, out_w = [], [], []
    for cands in cand_sets:
        probs, _ = ao.optimized_policy(cands, critic, "argmax")
        use_argmax = config.selection == "argmax" or (
            config.selection == "auto"
            and float(np.std(cands.q_values)) < config.selection_threshold)
        if use_argmax:
            out_s.append(cands.state)
            out_a.append(cands.best_action)
            out_w.append(1.0)
        else:
            for action, p in zip(cands.actions, probs):
                out_s.append(cands.state)
                out_a.append(action)
                out_w.append(float(p))
    return OptimizedActionDataset(np.stack(out_s), np.stack(out_a),
                                  np.array(out_w), policy.version)


def distill_policy(policy: po.PolicyHandle,
                   distill_dataset: OptimizedActionDataset, epochs: int,
                   lr: float, rng: np.random.Generator | None = None,
                   batch_size: int = 256,
                   adam_state: nm.AdamState | None = None) -> tuple[po.PolicyHandle, float]:
    """Weighted supervised training on optimized actions. Bumps the policy
    version (invalidating caches) even when epochs == 0."""
    if len(distill_dataset) == 0:
        raise ValueError("distillation dataset is empty")
    rng = rng or np.random.default_rng(0)
    if adam_state is None:
        adam_state = nm.adam_init(policy.params, learning_rate=lr)
    adam_state.learning_rate = lr
    n = len(distill_dataset)
    last_loss = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            loss, grads = po.policy_loss(
                policy, distill_dataset.states[idx],
                distill_dataset.actions[idx], rng,
                weights=distill_dataset.weights[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged("distillation loss went non-finite")
            nm.adam_step(adam_state, policy.params, grads)
            losses.append(loss)
        last_loss = float(np.mean(losses))
    policy.version += 1
    return policy, last_loss


# -- critic update machinery -----------------------------------------------------------

@dataclass
class _CriticState:
    """Mutable optimizer state bundled with counters for one training run."""

    adam: list[nm.AdamState]
    value_adam: nm.AdamState | None = None
    steps: int = 0
    loss_sum: float = 0.0
    cons_sum: float = 0.0
    q_sum: float = 0.0
    since_rows: int = 0

    def note(self, loss: float, cons: float, mean_q: float) -> None:
        self.steps += 1
        self.loss_sum += loss
        self.cons_sum += cons
        self.q_sum += mean_q
        self.since_rows += 1

    def flush(self) -> tuple[float, float, float]:
        n = max(1, self.since_rows)
        out = (self.loss_sum / n, self.cons_sum / n, self.q_sum / n)
        self.loss_sum = self.cons_sum = self.q_sum = 0.0
        self.since_rows = 0
        return out


def _normalized_batch(spec, batch: cr.TransitionBatch) -> cr.TransitionBatch:
    return cr.TransitionBatch(
        envmod.normalize_state(spec, batch.states), batch.actions,
        batch.rewards, envmod.normalize_state(spec, batch.next_states),
        batch.dones, batch.mc_returns)


def _candidate_sets(policy, critic, states, action_cfg, rng, cache,
                    dataset_actions=None):
    presampled = None
    if cache is not None:
        presampled = cache_gather(cache, policy, states, action_cfg.n_samples)
    return ao.optimize_actions_batch(policy, critic, states, action_cfg, rng,
                                     dataset_actions=dataset_actions,
                                     presampled=presampled)


def critic_update(policy: po.PolicyHandle, critic: cr.CriticEnsemble,
                  valuenet: cr.ValueNet | None, batch: cr.TransitionBatch,
                  algorithm: str, action_cfg: ao.ActionOptConfig,
                  calql_cfg: cr.CalQlConfig, state: _CriticState,
                  rng: np.random.Generator, spec,
                  cache: ActionCache | None = None) -> None:
    """One gradient step on the critic (and value net for IQL)."""
    nb = _normalized_batch(spec, batch)
    if algorithm == "iql_parl":
        v_loss, c_loss, (v_grads, c_grads) = cr.iql_losses(
            critic, valuenet, nb, rng=rng, discount=calql_cfg.discount)
        if not (np.isfinite(v_loss) and np.isfinite(c_loss)):
            raise TrainingDiverged("IQL loss went non-finite")
        nm.adam_step(state.value_adam, valuenet.params, v_grads)
        for grads, adam, params in zip(c_grads, state.adam, critic.members):
            nm.adam_step(adam, params, grads)
        x = np.concatenate([nb.states, nb.actions], axis=1)
        vals, _ = cr._member_values(critic, x, False,
                                    np.arange(critic.ensemble_size))
        state.note(c_loss + v_loss, 0.0, float(vals.min(axis=1).mean()))
    else:
        if action_cfg.include_dataset_action:
            cand_all = _candidate_sets(
                policy, critic, nb.states, action_cfg, rng, cache,
                dataset_actions=nb.actions)
            cand_next = _candidate_sets(
                policy, critic, nb.next_states, action_cfg, rng, cache)
        else:
            b = len(nb.states)
            both_states = np.concatenate([nb.states, nb.next_states])
            cand_both = _candidate_sets(policy, critic, both_states,
                                        action_cfg, rng, cache)
            cand_all, cand_next = cand_both[:b], cand_both[b:]
        if algorithm == "calql_parl":
            loss, grads, stats = cr.calql_critic_loss(
                critic, calql_cfg, nb, cand_all, cand_next, rng=rng)
        else:
            loss, grads, stats = cr.td_loss_hybrid(
                critic, nb, cand_next, rng=rng, discount=calql_cfg.discount)
            stats.setdefault("conservative_term", 0.0)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"{algorithm} critic loss went non-finite")
        for g, adam, params in zip(grads, state.adam, critic.members):
            nm.adam_step(adam, params, g)
        state.note(loss, stats.get("conservative_term", 0.0), stats["mean_q"])
    cr.polyak_update(critic)


# -- metrics ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV with shortest-roundtrip float formatting."""

    def __init__(self, path=None, columns=METRIC_COLUMNS):
        self.path = path
        self.columns = columns
        self.rows: list[dict] = []
        if path is not None:
            with open(path, "w") as fh:
                fh.write(",".join(columns) + "\n")

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, (bool, np.bool_)):
            return str(int(value))
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return repr(float(value))

    def write(self, **values) -> dict:
        row = {c: values[c] for c in self.columns}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(",".join(self._fmt(row[c]) for c in self.columns) + "\n")
        return row


# -- offline pretraining -----------------------------------------------------------------

def _distill_round(policy, critic, buffer, config, action_cfg, cache, tag,
                   distill_adam, spec, counter: int) -> float:
    states = buffer.all_states()
    rng = stream(config.seed, "distill", tag, counter)
    if config.distill_max_states and len(states) > config.distill_max_states:
        pick = rng.choice(len(states), size=config.distill_max_states,
                          replace=False)
        states = states[pick]
    obs = envmod.normalize_state(spec, states)
    dataset = build_distill_dataset(obs, policy, critic, action_cfg, rng,
                                    cache=cache)
    _, loss = distill_policy(policy, dataset, config.distill_epochs,
                             config.distill_lr, rng,
                             batch_size=config.distill_batch_size,
                             adam_state=distill_adam)
    if cache is not None:
        recompute_cache(cache, policy,
                        envmod.normalize_state(spec, buffer.all_states()))
    return loss


def pretrain_offline(config: TrainLoopConfig, dataset: envmod.Dataset,
                     policy: po.PolicyHandle, critic: cr.CriticEnsemble,
                     valuenet: cr.ValueNet | None = None,
                     action_cfg: ao.ActionOptConfig | None = None,
                     calql_cfg: cr.CalQlConfig | None = None,
                     spec: envmod.PointMazeSpec | None = None,
                     cache: ActionCache | None = None,
                     workers: int = 1):
    """Phase 1: behavior-clone the policy on dataset actions. Phase 2: train
    the critic per the chosen algorithm with optimized candidate actions,
    interleaving distillation epochs.

    Returns (policy, critic, state) where ``state`` carries optimizer moments
    and counters for a subsequent online phase.
    """
    action_cfg = action_cfg or ao.ActionOptConfig()
    calql_cfg = calql_cfg or cr.CalQlConfig()
    if np.any(np.isnan([t.mc_return for t in dataset.transitions])):
        raise ValueError("dataset must be annotated with mc returns")
    if max(t.reward for t in dataset.transitions) > 0:
        raise ValueError("dataset rewards must be biased non-positive")
    buffer = ReplayBuffer(dataset, mixing_ratio=config.mixing_ratio)

    # Phase 1: behavior cloning.
    bc_adam = nm.adam_init(policy.params, learning_rate=config.distill_lr)
    states_all, actions_all = buffer._off[0], buffer._off[1]
    obs_all = envmod.normalize_state(spec, states_all)
    bc_loss = 0.0
    for step in range(config.bc_grad_steps):
        rng = stream(config.seed, "bc", step)
        idx = rng.integers(len(obs_all), size=config.batch_size)
        loss, grads = po.policy_loss(policy, obs_all[idx], actions_all[idx], rng)
        if not np.isfinite(loss):
            raise TrainingDiverged("BC loss went non-finite")
        nm.adam_step(bc_adam, policy.params, grads)
        bc_loss = loss
    if config.bc_grad_steps:
        policy.version += 1
        logger.info("BC done: final loss %.4f", bc_loss)

    # Phase 2: critic training with interleaved distillation.
    cstate = _CriticState(
        adam=[nm.adam_init(m, learning_rate=config.critic_lr)
              for m in critic.members],
        value_adam=(nm.adam_init(valuenet.params, learning_rate=config.critic_lr)
                    if valuenet is not None else None))
    distill_adam = nm.adam_init(policy.params, learning_rate=config.distill_lr)
    needs_candidates = config.algorithm != "iql_parl"
    if cache is not None and needs_candidates and config.offline_grad_steps:
        recompute_cache(cache, policy,
                        envmod.normalize_state(spec, buffer.all_states()),
                        workers=workers)
    distill_loss = 0.0
    distill_rounds = 0
    for step in range(config.offline_grad_steps):
        rng = stream(config.seed, "critic_off", step)
        batch = buffer.sample(rng, config.batch_size)
        critic_update(policy, critic, valuenet, batch, config.algorithm,
                      action_cfg, calql_cfg, cstate, rng, spec, cache)
        if config.distill_every_steps and (step + 1) % config.distill_every_steps == 0:
            distill_rounds += 1
            distill_loss = _distill_round(policy, critic, buffer, config,
                                          action_cfg, cache, "offline",
                                          distill_adam, spec, distill_rounds)
    return policy, critic, {
        "critic_state": cstate,
        "distill_adam": distill_adam,
        "buffer": buffer,
        "distill_loss": distill_loss,
        "bc_loss": bc_loss,
    }


# -- online fine-tuning ---------------------------------------------------------------

def finetune_online(config: TrainLoopConfig, spec: envmod.PointMazeSpec,
                    policy: po.PolicyHandle, critic: cr.CriticEnsemble,
                    buffer: ReplayBuffer,
                    valuenet: cr.ValueNet | None = None,
                    action_cfg: ao.ActionOptConfig | None = None,
                    calql_cfg: cr.CalQlConfig | None = None,
                    cache: ActionCache | None = None,
                    metrics: MetricsWriter | None = None,
                    workers: int = 1,
                    carry: dict | None = None,
                    actor=None,
                    on_policy_update=None,
                    checkpoint_fn=None) -> list[dict]:
    """Alternate rollout collection with the optimized policy, critic updates
    on mixed batches, periodic distillation, and evaluation.

    ``actor`` overrides acting (baseline arms); ``on_policy_update`` overrides
    the distillation step (e.g. self-imitation); warm-up episodes train only
    the critic.
    """
    action_cfg = action_cfg or ao.ActionOptConfig()
    calql_cfg = calql_cfg or cr.CalQlConfig()
    metrics = metrics or MetricsWriter()
    carry = carry or {}
    cstate = carry.get("critic_state") or _CriticState(
        adam=[nm.adam_init(m, learning_rate=config.critic_lr)
              for m in critic.members],
        value_adam=(nm.adam_init(valuenet.params, learning_rate=config.critic_lr)
                    if valuenet is not None else None))
    distill_adam = carry.get("distill_adam") or \
        nm.adam_init(policy.params, learning_rate=config.distill_lr)
    distill_loss = carry.get("distill_loss", 0.0)
    utd = config.resolved_utd()
    needs_candidates = config.algorithm != "iql_parl"
    if cache is not None and needs_candidates:
        recompute_cache(cache, policy,
                        envmod.normalize_state(spec, buffer.all_states()),
                        workers=workers)
    if cache is not None:
        cache.reset_counters()

    def default_actor(state, rng):
        return act(policy, critic, spec, state, action_cfg, rng, cache=cache)

    act_fn = actor or default_actor

    def eval_row(episodes: int) -> dict:
        success, mean_ret = evaluate(
            policy, critic, spec, config.eval_episodes,
            seed=config.seed * 1_000_003 + episodes,
            action_cfg=action_cfg, discount=calql_cfg.discount,
            workers=workers, actor=actor)
        loss_avg, cons_avg, q_avg = cstate.flush()
        row = metrics.write(
            step=cstate.steps, episodes=episodes, success_rate=success,
            mean_return=mean_ret, critic_loss=loss_avg,
            conservative_term=cons_avg, distill_loss=distill_loss,
            mean_q=q_avg,
            cache_hit_rate=cache.hit_rate() if cache is not None else 0.0)
        logger.info("episodes=%d success=%.3f return=%.2f", episodes, success,
                    mean_ret)
        if checkpoint_fn is not None:
            checkpoint_fn(episodes)
        return row

    eval_row(0)
    distill_rounds = 0
    for episode in range(config.online_env_episodes):
        ep_rng = stream(config.seed, "episode", episode)
        transitions, _, _ = rollout_episode(spec, act_fn, ep_rng,
                                            calql_cfg.discount)
        buffer.append_episode(transitions)
        for t_idx in range(len(transitions)):
            for u in range(utd):
                rng = stream(config.seed, "critic_on", episode, t_idx, u)
                batch = buffer.sample(rng, config.batch_size)
                critic_update(policy, critic, valuenet, batch,
                              config.algorithm, action_cfg, calql_cfg,
                              cstate, rng, spec, cache)
        past_warmup = episode + 1 > config.warmup_episodes
        if past_warmup and config.distill_every_episodes and \
                (episode + 1) % config.distill_every_episodes == 0:
            distill_rounds += 1
            if on_policy_update is not None:
                distill_loss = on_policy_update(buffer, distill_rounds)
            else:
                distill_loss = _distill_round(policy, critic, buffer, config,
                                              action_cfg, cache, "online",
                                              distill_adam, spec,
                                              distill_rounds)
        if (episode + 1) % config.eval_every == 0 or \
                episode + 1 == config.online_env_episodes:
            eval_row(episode + 1)
    return metrics.rows
