"""Belief-MDP: actions, reset, step, successor enumeration, egocentric encoding"""
import math

import numpy as np
import pytest

from belief import Belief, entropy, entropy_of, point_mass, uniform_prior
from environment import (ACTIONS, Action, BeliefState, Scenario, belief_from_egocentric, derive_seed,
                         egocentric_tensor, episode_rng, feasible_actions, reset, splitmix64, step,
                         successor_arrays, successor_distribution)
from errors import ConfigurationError, ContractViolation, EpisodeOverError
from plume_model import EnvParams, SourceTerm


def random_state(params, rng, horizon=20):
    probs = rng.dirichlet(np.full(params.n_hypotheses, 0.5)).reshape(params.shape)
    pos = (int(rng.integers(params.nx)), int(rng.integers(params.ny)))
    return BeliefState(pos, Belief(probs, params), int(rng.integers(horizon)), horizon)


class TestActions:

    def test_labels_round_trip(self):
        for action in ACTIONS:
            assert Action.from_label(action.label) is action
        with pytest.raises(ConfigurationError):
            Action.from_label('jump')

    def test_down_is_negative_y(self):
        assert Action.DOWN.apply((3, 3)) == (3, 2)
        assert Action.LEFT.apply((3, 3)) == (2, 3)

    def test_interior(self, default_params):
        assert feasible_actions((5, 5), default_params) == list(ACTIONS)

    def test_corner(self, default_params):
        assert set(feasible_actions((0, 0), default_params)) == {Action.RIGHT, Action.UP, Action.STAY}

    def test_single_cell(self):
        assert feasible_actions((0, 0), EnvParams(nx=1, ny=1)) == [Action.STAY]


class TestSeeding:

    def test_splitmix_reference(self):
        # First outputs of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_derived_seeds_differ(self):
        seeds = {derive_seed(42, i) for i in range(1000)}
        assert len(seeds) == 1000

    def test_episode_rng_reproducible(self):
        assert episode_rng(3, 7).integers(1 << 30) == episode_rng(3, 7).integers(1 << 30)


class TestReset:

    def test_starts_in_center(self, default_params):
        state, h0 = reset(Scenario(SourceTerm(9, 1, 2.0), default_params), np.random.default_rng(0))
        assert state.pos == (5, 5)
        assert state.step == 0 and state.horizon == 20
        assert state.belief.is_normalized()
        assert 0 <= h0 <= default_params.h_max

    def test_reproducible(self, default_params):
        scenario = Scenario(SourceTerm(5, 4, 5.0), default_params)
        a, ha = reset(scenario, np.random.default_rng(11))
        b, hb = reset(scenario, np.random.default_rng(11))
        assert ha == hb
        np.testing.assert_array_equal(a.belief.probs, b.belief.probs)

    def test_nonzero_hit_makes_belief_nonuniform(self, default_params):
        scenario = Scenario(SourceTerm(5, 5, 5.0), default_params)
        for seed in range(50):
            state, h0 = reset(scenario, np.random.default_rng(seed))
            if h0 >= 1:
                assert entropy(state.belief) < math.log(605)
                return
        pytest.fail("no hit observed at a strong source under the agent")

    def test_invalid_truth(self, default_params):
        with pytest.raises(ConfigurationError):
            Scenario(SourceTerm(0, 11, 1.0), default_params)


class TestStep:

    def test_point_mass_reward_is_zero(self, default_params, rng):
        theta = SourceTerm(2, 3, 1.0)
        scenario = Scenario(theta, default_params)
        state, _ = reset(scenario, rng, prior=point_mass(theta, default_params))
        for action in (Action.UP, Action.LEFT, Action.STAY):
            state, _, reward = step(state, action, scenario, rng)
            assert reward == 0.0

    def test_reward_bounds_and_bookkeeping(self, default_params, rng):
        scenario = Scenario(SourceTerm(9, 1, 2.0), default_params)
        state, _ = reset(scenario, rng)
        for t in range(20):
            actions = feasible_actions(state.pos, default_params)
            state, h, reward = step(state, actions[int(rng.integers(len(actions)))], scenario, rng)
            assert -math.log(605) - 1e-12 <= reward <= 0.0
            assert state.step == t + 1
            assert state.belief.is_normalized()
        assert state.is_terminal

    def test_replay_is_identical(self, default_params):
        scenario = Scenario(SourceTerm(1, 8, 4.0), default_params)

        def play(seed):
            rng = np.random.default_rng(seed)
            state, h0 = reset(scenario, rng)
            trace = [h0]
            for action in [Action.DOWN, Action.DOWN, Action.LEFT, Action.STAY]:
                state, h, reward = step(state, action, scenario, rng)
                trace.append((h, reward))
            return trace

        assert play(5) == play(5)

    def test_infeasible_action(self, default_params, rng):
        scenario = Scenario(SourceTerm(0, 0, 1.0), default_params)
        state = BeliefState((0, 0), uniform_prior(default_params))
        with pytest.raises(ContractViolation):
            step(state, Action.LEFT, scenario, rng)

    def test_episode_over(self, default_params, rng):
        scenario = Scenario(SourceTerm(0, 0, 1.0), default_params)
        state = BeliefState((5, 5), uniform_prior(default_params), step=20, horizon=20)
        with pytest.raises(EpisodeOverError):
            step(state, Action.STAY, scenario, rng)


class TestSuccessors:

    def test_one_successor_per_hit_count(self, default_params):
        state = BeliefState((5, 5), uniform_prior(default_params))
        successors = successor_distribution(state, Action.UP)
        assert len(successors) == 4
        assert sum(p for p, _ in successors) == pytest.approx(1.0, abs=1e-12)
        assert all(s.pos == (5, 6) and s.step == 1 for _, s in successors)

    def test_point_mass_successors(self, default_params):
        theta = SourceTerm(4, 4, 3.0)
        state = BeliefState((5, 5), point_mass(theta, default_params))
        for _, successor in successor_distribution(state, Action.RIGHT):
            np.testing.assert_array_equal(successor.belief.probs, state.belief.probs)

    def test_total_probability_identity(self, default_params):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            state = random_state(default_params, rng)
            for action in feasible_actions(state.pos, default_params):
                pr_h, posteriors = successor_arrays(state.belief.probs, action.apply(state.pos), default_params)
                mixed = np.tensordot(pr_h, posteriors, axes=1)
                np.testing.assert_allclose(mixed, state.belief.probs, atol=1e-10)

    def test_conditioning_reduces_entropy_on_average(self, default_params):
        rng = np.random.default_rng(5)
        for _ in range(200):
            state = random_state(default_params, rng)
            current = entropy(state.belief)
            for action in feasible_actions(state.pos, default_params):
                pr_h, posteriors = successor_arrays(state.belief.probs, action.apply(state.pos), default_params)
                assert np.dot(pr_h, entropy_of(posteriors, axis=(1, 2, 3))) <= current + 1e-12

    def test_step_frequencies_match_successors(self, small_params):
        rng = np.random.default_rng(17)
        truth = SourceTerm(2, 3, 3.0)
        scenario = Scenario(truth, small_params)
        state = BeliefState((2, 2), point_mass(truth, small_params))
        successors = successor_distribution(state, Action.UP)
        n = 20_000
        counts = np.zeros(small_params.n_hits)
        for _ in range(n):
            _, h, _ = step(state, Action.UP, scenario, rng)
            counts[h] += 1
        probs = np.array([p for p, _ in successors])
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) <= 4 * sigma + 1e-9)

    def test_infeasible_successors(self, default_params):
        with pytest.raises(ContractViolation):
            successor_distribution(BeliefState((10, 10), uniform_prior(default_params)), Action.UP)


class TestEgocentric:

    def test_center_block(self, default_params, rng):
        state = random_state(default_params, rng)
        state = BeliefState((5, 5), state.belief)
        tensor = egocentric_tensor(state)
        assert tensor.shape == (21, 21, 5)
        np.testing.assert_array_equal(tensor[5:16, 5:16], state.belief.probs)
        assert tensor.sum() == pytest.approx(1.0, abs=1e-12)

    def test_corner_matches_brute_force(self, default_params, rng):
        state = random_state(default_params, rng)
        for pos in [(0, 0), (10, 3), (7, 10)]:
            tensor = egocentric_tensor(BeliefState(pos, state.belief))
            expected = np.zeros((21, 21, 5))
            for xs in range(11):
                for ys in range(11):
                    expected[xs - pos[0] + 10, ys - pos[1] + 10] = state.belief.probs[xs, ys]
            np.testing.assert_array_equal(tensor, expected)
        corner = egocentric_tensor(BeliefState((0, 0), state.belief))
        assert corner[:10].sum() == 0.0 and corner[:, :10].sum() == 0.0

    def test_round_trip(self, default_params, rng):
        state = random_state(default_params, rng)
        back = belief_from_egocentric(egocentric_tensor(state), state.pos, default_params)
        np.testing.assert_array_equal(back.probs, state.belief.probs)
