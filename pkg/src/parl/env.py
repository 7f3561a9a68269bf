"""Desk-scale continuous point maze plus offline dataset generation.

A point mass lives in continuous coordinates over a boolean wall grid; the
action is a displacement direction in [-1,1]^2 scaled by ``action_scale`` and
clipped at walls. Reward is sparse and already biased: -1 per step, 0 on
reaching the goal region. Two dataset regimes are provided: ``diverse``
(random starts and navigation targets, heavy action noise, broad action
coverage) and ``play`` (a few fixed scripted routes, light noise, narrow
multimodal actions).
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

Array = np.ndarray

WALL_MARGIN = 1e-6  # clipped positions stop this far short of a wall face

# Fraction of diverse-regime episodes that wander to a random cell instead of
# heading for the goal; tuned so a noisy controller lands near 60% success.
DIVERSE_EXPLORE_FRAC = 0.4

DATASET_MAGIC = b"PRLD"
DATASET_VERSION = 1
_COVERAGE_TAGS = ("diverse", "play")


class MazeDomainError(ValueError):
    """State fell outside the maze or inside a wall."""


class GenerationError(RuntimeError):
    """Dataset generation hit an unreachable waypoint."""


@dataclass(frozen=True)
class PointMazeSpec:
    grid: Array                      # bool (rows, cols), True = wall cell
    start_region: tuple[float, float, float, float]   # xmin, ymin, xmax, ymax
    goal_region: tuple[float, float, float, float]
    max_episode_steps: int
    action_scale: float = 0.3

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=bool)
        object.__setattr__(self, "grid", grid)
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        for name, region in (("start", self.start_region), ("goal", self.goal_region)):
            xmin, ymin, xmax, ymax = region
            if not (xmin < xmax and ymin < ymax):
                raise ValueError(f"{name}_region is degenerate")
            for x, y in ((xmin, ymin), (xmax - 1e-9, ymax - 1e-9)):
                if self._cell_blocked(x, y):
                    raise ValueError(f"{name}_region overlaps a wall")

    @property
    def width(self) -> float:
        return float(self.grid.shape[1])

    @property
    def height(self) -> float:
        return float(self.grid.shape[0])

    def _cell_blocked(self, x: float, y: float) -> bool:
        col, row = int(np.floor(x)), int(np.floor(y))
        if not (0 <= col < self.grid.shape[1] and 0 <= row < self.grid.shape[0]):
            return True
        return bool(self.grid[row, col])

    def in_goal(self, state: Array) -> bool:
        xmin, ymin, xmax, ymax = self.goal_region
        return bool(xmin <= state[0] <= xmax and ymin <= state[1] <= ymax)

    def goal_center(self) -> Array:
        xmin, ymin, xmax, ymax = self.goal_region
        return np.array([(xmin + xmax) / 2.0, (ymin + ymax) / 2.0])


@dataclass
class Transition:
    state: Array
    action: Array
    reward: float
    next_state: Array
    done: bool
    mc_return: float = np.nan


@dataclass
class Dataset:
    transitions: list[Transition]
    episodes: list[tuple[int, int]]       # half-open [start, end) index ranges
    coverage_tag: str = "diverse"

    def __post_init__(self) -> None:
        if self.coverage_tag not in _COVERAGE_TAGS:
            raise ValueError(f"unknown coverage tag {self.coverage_tag!r}")

    def __len__(self) -> int:
        return len(self.transitions)

    def states(self) -> Array:
        return np.stack([t.state for t in self.transitions])

    def actions(self) -> Array:
        return np.stack([t.action for t in self.transitions])


def _maze(rows: list[str]) -> Array:
    """Walls from ASCII art; '#' blocks, rows listed top-down."""
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)[::-1]


# 5x5 "medium" analog: a center block splits two routes around it.
MEDIUM_MAZE = PointMazeSpec(
    grid=_maze([
        ".....",
        ".##..",
        "..#..",
        "..#..",
        ".....",
    ]),
    start_region=(0.2, 0.2, 1.2, 1.2),
    goal_region=(3.9, 3.9, 4.9, 4.9),
    max_episode_steps=60,
    action_scale=0.3,
)

# 8x8 "large" analog: outer ring plus an inner loop reached through two doors,
# giving three distinct routes from the bottom-left start to the top-right goal.
LARGE_MAZE = PointMazeSpec(
    grid=_maze([
        "........",
        ".###.##.",
        ".#....#.",
        ".#.##.#.",
        ".#.##.#.",
        ".#....#.",
        ".##.###.",
        "........",
    ]),
    start_region=(0.1, 0.1, 0.9, 0.9),
    goal_region=(7.05, 7.05, 7.95, 7.95),
    max_episode_steps=120,
    action_scale=0.3,
)

MAZES = {"medium": MEDIUM_MAZE, "large": LARGE_MAZE}


def normalize_state(spec: PointMazeSpec, states: Array) -> Array:
    """Map maze coordinates onto [-1, 1]^2 for network consumption."""
    states = np.asarray(states, dtype=np.float64)
    extent = np.array([spec.width, spec.height])
    return 2.0 * states / extent - 1.0


def _move_axis(spec: PointMazeSpec, x: float, y: float, delta: float,
               horizontal: bool) -> float:
    """Slide along one axis, stopping a margin short of the first wall face."""
    grid = spec.grid
    if horizontal:
        limit = spec.width
        fixed_idx = int(np.floor(y))
        blocked = lambda c: grid[fixed_idx, c]
        n_cells = grid.shape[1]
        pos = x
    else:
        limit = spec.height
        fixed_idx = int(np.floor(x))
        blocked = lambda c: grid[c, fixed_idx]
        n_cells = grid.shape[0]
        pos = y
    target = pos + delta
    if delta > 0:
        target = min(target, limit - WALL_MARGIN)
        cell = int(np.floor(pos))
        stop = int(np.floor(target))
        for c in range(cell + 1, min(stop, n_cells - 1) + 1):
            if blocked(c):
                return c - WALL_MARGIN
        return target
    if delta < 0:
        target = max(target, WALL_MARGIN)
        cell = int(np.floor(pos))
        stop = int(np.floor(target))
        for c in range(cell - 1, max(stop, 0) - 1, -1):
            if blocked(c):
                return c + 1 + WALL_MARGIN
        return target
    return pos


def env_step(spec: PointMazeSpec, state: Array, action: Array,
             steps_taken: int = 0) -> tuple[Array, float, bool]:
    """Advance the point mass one step.

    ``steps_taken`` is how many steps the episode already used; the episode
    terminates when the goal is reached or the step limit is hit.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (2,):
        raise MazeDomainError(f"state must be 2-d, got shape {state.shape}")
    if spec._cell_blocked(state[0], state[1]):
        raise MazeDomainError(f"state {state} is outside the free space")
    if np.any(np.abs(action) > 1.0 + 1e-9):
        raise ValueError(f"action {action} outside [-1,1]^2")
    action = np.clip(action, -1.0, 1.0)
    dx, dy = spec.action_scale * action
    x = _move_axis(spec, state[0], state[1], dx, horizontal=True)
    y = _move_axis(spec, x, state[1], dy, horizontal=False)
    next_state = np.array([x, y])
    at_goal = spec.in_goal(next_state)
    reward = 0.0 if at_goal else -1.0
    done = at_goal or (steps_taken + 1 >= spec.max_episode_steps)
    return next_state, reward, done


def env_reset(spec: PointMazeSpec, rng: np.random.Generator) -> Array:
    xmin, ymin, xmax, ymax = spec.start_region
    return np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])


# -- scripted behavior controller ---------------------------------------------

def _free_cells(spec: PointMazeSpec) -> list[tuple[int, int]]:
    rows, cols = spec.grid.shape
    return [(r, c) for r in range(rows) for c in range(cols) if not spec.grid[r, c]]


def _bfs_path(spec: PointMazeSpec, start: tuple[int, int],
              goal: tuple[int, int]) -> list[tuple[int, int]]:
    """Shortest cell path (4-connected) from start to goal, inclusive."""
    rows, cols = spec.grid.shape
    prev: dict[tuple[int, int], tuple[int, int] | None] = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            path = [cell]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])  # type: ignore[arg-type]
            return path[::-1]
        r, c = cell
        for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= nr < rows and 0 <= nc < cols and not spec.grid[nr, nc] \
                    and (nr, nc) not in prev:
                prev[(nr, nc)] = cell
                queue.append((nr, nc))
    raise GenerationError(f"no path from {start} to {goal}")


def _cell_of(state: Array) -> tuple[int, int]:
    return int(np.floor(state[1])), int(np.floor(state[0]))


def _cell_center(cell: tuple[int, int]) -> Array:
    return np.array([cell[1] + 0.5, cell[0] + 0.5])


def _controller_action(spec: PointMazeSpec, state: Array, target_cell: tuple[int, int],
                       noise_level: float, rng: np.random.Generator) -> Array:
    """Head toward the next waypoint on the shortest path, plus uniform noise."""
    here = _cell_of(state)
    if here == target_cell:
        aim = _cell_center(target_cell)
    else:
        path = _bfs_path(spec, here, target_cell)
        aim = _cell_center(path[1]) if len(path) > 1 else _cell_center(target_cell)
    direction = aim - state
    norm = np.linalg.norm(direction)
    if norm > 1e-9:
        direction = direction / norm * min(1.0, norm / spec.action_scale)
    action = direction + rng.uniform(-noise_level, noise_level, size=2)
    return np.clip(action, -1.0, 1.0)


# Fixed scripted routes for the "play" regime: (start cell, via cells) per maze
# shape; every route ends at the goal cell.
_PLAY_ROUTES = {
    (5, 5): [((0, 0), [(4, 0)]), ((0, 0), [(0, 4)]),
             ((4, 0), []), ((0, 4), [])],
    (8, 8): [((0, 0), [(7, 0)]), ((0, 0), [(0, 7)]),
             ((0, 0), [(1, 3), (6, 4)]), ((0, 4), [(0, 7)])],
}


def _play_routes(spec: PointMazeSpec) -> list[tuple[tuple[int, int], list[tuple[int, int]]]]:
    routes = _PLAY_ROUTES.get(spec.grid.shape)
    if routes is None:
        free = _free_cells(spec)
        routes = [(free[0], []), (free[-1], [])]
    return routes


def generate_dataset(spec: PointMazeSpec, regime: str, n_episodes: int,
                     noise_level: float, seed: int) -> Dataset:
    """Roll the scripted controller through the real environment.

    diverse: random start cells; most episodes head for the task goal, a
    fraction wander to random cells first, and actions carry heavy uniform
    noise so the pooled action histogram covers most of [-1,1]^2.
    play: a small fixed set of waypoint routes with light noise.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if regime not in _COVERAGE_TAGS:
        raise ValueError(f"unknown regime {regime!r}")
    goal_cell = _cell_of(spec.goal_center())
    free = _free_cells(spec)
    transitions: list[Transition] = []
    episodes: list[tuple[int, int]] = []
    routes = _play_routes(spec)
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep])
        if regime == "diverse":
            start_cell = free[rng.integers(len(free))]
            state = _cell_center(start_cell) + rng.uniform(-0.35, 0.35, size=2)
            if rng.uniform() < DIVERSE_EXPLORE_FRAC:
                waypoints = [free[rng.integers(len(free))]]
            else:
                waypoints = [goal_cell]
            noise = noise_level
        else:
            start_cell, via = routes[ep % len(routes)]
            state = _cell_center(start_cell) + rng.uniform(-0.1, 0.1, size=2)
            waypoints = list(via) + [goal_cell]
            noise = noise_level
        ep_start = len(transitions)
        target_idx = 0
        for t in range(spec.max_episode_steps):
            target = waypoints[min(target_idx, len(waypoints) - 1)]
            action = _controller_action(spec, state, target, noise, rng)
            next_state, reward, done = env_step(spec, state, action, steps_taken=t)
            # recorded done marks true termination (goal); step-limit
            # truncations end the episode but still bootstrap in TD targets
            transitions.append(Transition(state, action, reward, next_state,
                                          reward == 0.0))
            state = next_state
            if _cell_of(state) == target and target_idx < len(waypoints) - 1:
                target_idx += 1
            if done:
                break
        episodes.append((ep_start, len(transitions)))
    return Dataset(transitions, episodes, coverage_tag=regime)


def annotate_mc_returns(dataset: Dataset, discount: float) -> Dataset:
    """Fill per-transition discounted return-to-go within each episode."""
    new_transitions = list(dataset.transitions)
    for start, end in dataset.episodes:
        running = 0.0
        for i in range(end - 1, start - 1, -1):
            t = new_transitions[i]
            running = t.reward + discount * running
            new_transitions[i] = replace(t, mc_return=running)
    return Dataset(new_transitions, list(dataset.episodes), dataset.coverage_tag)


def bias_rewards(dataset: Dataset, bias: float) -> Dataset:
    """Shift every reward by ``bias``; the result must be non-positive."""
    shifted = [replace(t, reward=t.reward + bias) for t in dataset.transitions]
    if shifted and max(t.reward for t in shifted) > 0:
        raise ValueError(f"rewards remain positive after bias {bias}")
    return Dataset(shifted, list(dataset.episodes), dataset.coverage_tag)


def action_coverage(dataset: Dataset, bins: int = 10) -> float:
    """Fraction of a bins x bins grid over [-1,1]^2 occupied by actions."""
    acts = dataset.actions()
    hist, _, _ = np.histogram2d(acts[:, 0], acts[:, 1], bins=bins,
                                range=[[-1, 1], [-1, 1]])
    return float((hist > 0).sum()) / (bins * bins)


def dataset_success_rate(dataset: Dataset) -> float:
    """Fraction of episodes whose final reward is the goal reward (zero)."""
    successes = sum(1 for s, e in dataset.episodes
                    if e > s and dataset.transitions[e - 1].reward == 0.0)
    return successes / max(1, len(dataset.episodes))


# -- binary dataset file -------------------------------------------------------

def save_dataset(path, dataset: Dataset, discount: float) -> None:
    """Header, flat little-endian float64 transition records, episode table."""
    transitions = dataset.transitions
    d_state = len(transitions[0].state) if transitions else 2
    d_action = len(transitions[0].action) if transitions else 2
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<B", DATASET_VERSION))
        fh.write(struct.pack("<II", d_state, d_action))
        fh.write(struct.pack("<d", discount))
        fh.write(struct.pack("<B", _COVERAGE_TAGS.index(dataset.coverage_tag)))
        fh.write(struct.pack("<Q", len(transitions)))
        rows = np.empty((len(transitions), 2 * d_state + d_action + 3))
        for i, t in enumerate(transitions):
            rows[i] = np.concatenate([
                t.state, t.action, [t.reward], t.next_state,
                [1.0 if t.done else 0.0], [t.mc_return]])
        fh.write(rows.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<Q", len(dataset.episodes)))
        for s, e in dataset.episodes:
            fh.write(struct.pack("<QQ", s, e))


def load_dataset(path) -> tuple[Dataset, float]:
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError("not a dataset file")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        d_state, d_action = struct.unpack("<II", fh.read(8))
        (discount,) = struct.unpack("<d", fh.read(8))
        (tag_idx,) = struct.unpack("<B", fh.read(1))
        (n,) = struct.unpack("<Q", fh.read(8))
        width = 2 * d_state + d_action + 3
        rows = np.frombuffer(fh.read(8 * n * width), dtype="<f8").reshape(n, width)
        transitions = []
        for row in rows:
            s = row[:d_state]
            a = row[d_state:d_state + d_action]
            r = row[d_state + d_action]
            s2 = row[d_state + d_action + 1:2 * d_state + d_action + 1]
            done = bool(row[2 * d_state + d_action + 1])
            mc = row[2 * d_state + d_action + 2]
            transitions.append(Transition(s.copy(), a.copy(), float(r), s2.copy(),
                                          done, float(mc)))
        (n_eps,) = struct.unpack("<Q", fh.read(8))
        episodes = [struct.unpack("<QQ", fh.read(16)) for _ in range(n_eps)]
        dataset = Dataset(transitions, [(int(s), int(e)) for s, e in episodes],
                          _COVERAGE_TAGS[tag_idx])
    return dataset, discount
