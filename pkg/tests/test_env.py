import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parl import env as envmod


def corridor_spec():
    """1x3 open corridor with walls above/below and at both ends."""
    grid = envmod._maze([
        "#####",
        "#...#",
        "#####",
    ])
    return envmod.PointMazeSpec(grid=grid, start_region=(1.1, 1.1, 1.9, 1.9),
                                goal_region=(3.1, 1.1, 3.9, 1.9),
                                max_episode_steps=10, action_scale=0.5)


class TestEnvStep:
    def test_zero_action_keeps_state(self):
        spec = envmod.MEDIUM_MAZE
        state = np.array([0.5, 0.5])
        nxt, reward, done = envmod.env_step(spec, state, np.zeros(2))
        np.testing.assert_array_equal(nxt, state)
        assert reward == -1.0 and not done

    def test_goal_absorbing(self):
        spec = envmod.MEDIUM_MAZE
        state = spec.goal_center()
        for action in (np.array([1.0, 1.0]), np.array([-1.0, 0.3])):
            _, reward, done = envmod.env_step(spec, state, action)
            assert done and reward == 0.0

    def test_wall_clipping_matches_geometry(self):
        spec = corridor_spec()
        state = np.array([3.5, 1.5])
        # pushing right: wall cell starts at x=4, so stop a margin short of it
        nxt, _, _ = envmod.env_step(spec, state, np.array([1.0, 0.0]))
        expected_x = min(3.5 + 0.5, 4.0 - envmod.WALL_MARGIN)
        assert nxt[0] == pytest.approx(expected_x, abs=1e-12)
        # pushing up from mid-corridor: wall row starts at y=2
        nxt, _, _ = envmod.env_step(spec, np.array([2.5, 1.7]),
                                    np.array([0.0, 1.0]))
        assert nxt[1] == pytest.approx(2.0 - envmod.WALL_MARGIN, abs=1e-12)

    def test_free_movement_unclipped(self):
        spec = corridor_spec()
        nxt, _, _ = envmod.env_step(spec, np.array([1.5, 1.5]),
                                    np.array([0.5, 0.0]))
        assert nxt[0] == pytest.approx(1.75)

    def test_state_in_wall_rejected(self):
        spec = corridor_spec()
        with pytest.raises(envmod.MazeDomainError):
            envmod.env_step(spec, np.array([0.5, 0.5]), np.zeros(2))

    def test_state_outside_grid_rejected(self):
        with pytest.raises(envmod.MazeDomainError):
            envmod.env_step(envmod.MEDIUM_MAZE, np.array([-1.0, 2.0]),
                            np.zeros(2))

    def test_action_out_of_box_rejected(self):
        with pytest.raises(ValueError):
            envmod.env_step(envmod.MEDIUM_MAZE, np.array([0.5, 0.5]),
                            np.array([1.5, 0.0]))

    def test_step_limit_ends_episode(self):
        spec = corridor_spec()
        _, _, done = envmod.env_step(spec, np.array([1.5, 1.5]),
                                     np.zeros(2), steps_taken=9)
        assert done


class TestGenerateDataset:
    def test_zero_episodes_rejected(self):
        with pytest.raises(ValueError):
            envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 0, 0.5, 1)

    def test_deterministic_given_seed(self):
        a = envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 5, 0.8, 3)
        b = envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 5, 0.8, 3)
        assert len(a) == len(b) and a.episodes == b.episodes
        for ta, tb in zip(a.transitions, b.transitions):
            np.testing.assert_array_equal(ta.state, tb.state)
            np.testing.assert_array_equal(ta.action, tb.action)
            assert ta.reward == tb.reward and ta.done == tb.done

    def test_coverage_regimes(self):
        diverse = envmod.generate_dataset(envmod.LARGE_MAZE, "diverse", 100,
                                          1.0, 5)
        play = envmod.generate_dataset(envmod.LARGE_MAZE, "play", 100, 0.05, 5)
        assert envmod.action_coverage(diverse) >= 0.8
        assert envmod.action_coverage(play) <= 0.4

    def test_trajectory_replay(self):
        """Stepping the env with an episode's actions reproduces its states."""
        dataset = envmod.generate_dataset(envmod.MEDIUM_MAZE, "play", 4, 0.1, 9)
        for start, end in dataset.episodes:
            state = dataset.transitions[start].state
            for t, i in enumerate(range(start, end)):
                tr = dataset.transitions[i]
                np.testing.assert_allclose(state, tr.state, atol=1e-12)
                state, reward, _ = envmod.env_step(envmod.MEDIUM_MAZE, state,
                                                   tr.action, steps_taken=t)
                assert reward == tr.reward
                np.testing.assert_allclose(state, tr.next_state, atol=1e-12)

    def test_episode_ranges_partition(self):
        dataset = envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 8,
                                          0.8, 2)
        covered = []
        for s, e in dataset.episodes:
            covered.extend(range(s, e))
        assert covered == list(range(len(dataset)))


class TestMcReturns:
    def _single(self, rewards, discount):
        transitions = [envmod.Transition(np.zeros(2), np.zeros(2), r,
                                         np.zeros(2), i == len(rewards) - 1)
                       for i, r in enumerate(rewards)]
        ds = envmod.Dataset(transitions, [(0, len(rewards))])
        return envmod.annotate_mc_returns(ds, discount)

    def test_single_step(self):
        ds = self._single([-1.0], 0.99)
        assert ds.transitions[0].mc_return == -1.0

    def test_two_step_recurrence(self):
        ds = self._single([-1.0, 0.0], 0.99)
        assert ds.transitions[0].mc_return == pytest.approx(-1.0)

    def test_geometric_series(self):
        ds = self._single([-1.0] * 5, 0.99)
        expected = -(1 - 0.99 ** 5) / 0.01
        assert ds.transitions[0].mc_return == pytest.approx(expected, abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_bellman_identity(self, seed):
        rng = np.random.default_rng(seed)
        rewards = list(rng.uniform(-2, 0, size=rng.integers(1, 12)))
        discount = float(rng.uniform(0.5, 0.999))
        ds = self._single(rewards, discount)
        for i in range(len(rewards) - 1):
            lhs = ds.transitions[i].mc_return
            rhs = rewards[i] + discount * ds.transitions[i + 1].mc_return
            assert lhs == pytest.approx(rhs, abs=1e-10)


class TestBiasRewards:
    def _dataset(self, rewards):
        transitions = [envmod.Transition(np.zeros(2), np.zeros(2), float(r),
                                         np.zeros(2), False) for r in rewards]
        return envmod.Dataset(transitions, [(0, len(rewards))])

    def test_antmaze_style_bias(self):
        ds = envmod.bias_rewards(self._dataset([0, 1]), -1.0)
        assert [t.reward for t in ds.transitions] == [-1.0, 0.0]

    def test_zero_bias_identity(self):
        ds = envmod.bias_rewards(self._dataset([-1, 0]), 0.0)
        assert [t.reward for t in ds.transitions] == [-1.0, 0.0]

    def test_kitchen_style_bias(self):
        ds = envmod.bias_rewards(self._dataset(range(5)), -4.0)
        assert [t.reward for t in ds.transitions] == [-4.0, -3.0, -2.0, -1.0, 0.0]

    def test_positive_after_bias_rejected(self):
        with pytest.raises(ValueError):
            envmod.bias_rewards(self._dataset([0, 2]), -1.0)

    def test_biased_rewards_nonpositive_on_generated(self):
        ds = envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 5, 0.8, 4)
        assert max(t.reward for t in ds.transitions) <= 0.0


class TestDatasetFile:
    def test_roundtrip(self, tmp_path):
        ds = envmod.generate_dataset(envmod.MEDIUM_MAZE, "play", 6, 0.1, 11)
        ds = envmod.annotate_mc_returns(ds, 0.99)
        path = tmp_path / "data.bin"
        envmod.save_dataset(path, ds, 0.99)
        loaded, discount = envmod.load_dataset(path)
        assert discount == 0.99
        assert loaded.coverage_tag == ds.coverage_tag
        assert loaded.episodes == ds.episodes
        assert len(loaded) == len(ds)
        for a, b in zip(ds.transitions, loaded.transitions):
            np.testing.assert_array_equal(a.state, b.state)
            np.testing.assert_array_equal(a.action, b.action)
            assert a.reward == b.reward and a.done == b.done
            assert a.mc_return == b.mc_return

    def test_identical_bytes_for_same_generation(self, tmp_path):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        for p in (p1, p2):
            ds = envmod.generate_dataset(envmod.MEDIUM_MAZE, "diverse", 5,
                                         0.9, 21)
            ds = envmod.annotate_mc_returns(ds, 0.99)
            envmod.save_dataset(p, ds, 0.99)
        assert p1.read_bytes() == p2.read_bytes()


def test_normalize_state_range():
    spec = envmod.LARGE_MAZE
    lo = envmod.normalize_state(spec, np.array([0.0, 0.0]))
    hi = envmod.normalize_state(spec, np.array([spec.width, spec.height]))
    np.testing.assert_allclose(lo, [-1.0, -1.0])
    np.testing.assert_allclose(hi, [1.0, 1.0])
