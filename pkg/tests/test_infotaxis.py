"""Infotaxis: expected entropy, information gain, tie handling"""
import numpy as np
import pytest

from belief import Belief, bayes_update, entropy, point_mass, uniform_prior
from environment import Action, BeliefState, feasible_actions
from errors import ContractViolation
from infotaxis import (InfotaxisPolicy, expected_entropies, expected_entropy, expected_information_gain,
                       infotaxis_action, tied_actions)
from plume_model import SourceTerm, hit_distribution, mean_hits


def random_state(params, rng):
    probs = rng.dirichlet(np.full(params.n_hypotheses, 0.5)).reshape(params.shape)
    pos = (int(rng.integers(params.nx)), int(rng.integers(params.ny)))
    return BeliefState(pos, Belief(probs, params))


def brute_force_expected_entropy(state, action):
    """Sum over h of Pr(h) H(posterior_h), one hypothesis at a time"""
    params = state.params
    new_pos = action.apply(state.pos)
    total = 0.0
    for h in range(params.n_hits):
        evidence = 0.0
        for xs in range(params.nx):
            for ys in range(params.ny):
                for k, phi in enumerate(params.fluxes):
                    mu = mean_hits(SourceTerm(xs, ys, phi), new_pos, params)
                    evidence += hit_distribution(mu, params.h_max)[h] * state.belief.probs[xs, ys, k]
        if evidence > 0:
            posterior, _ = bayes_update(state.belief, new_pos, h, params)
            total += evidence * entropy(posterior)
    return total


class TestExpectedEntropy:

    def test_point_mass(self, default_params):
        state = BeliefState((5, 5), point_mass(SourceTerm(1, 1, 1.0), default_params))
        assert all(v == 0.0 for v in expected_entropies(state).values())

    def test_never_above_current_entropy(self, default_params, rng):
        for _ in range(100):
            state = random_state(default_params, rng)
            current = entropy(state.belief)
            assert all(v <= current + 1e-12 for v in expected_entropies(state).values())

    def test_matches_brute_force_on_toy(self, tiny_params, rng):
        for _ in range(5):
            state = random_state(tiny_params, rng)
            for action in feasible_actions(state.pos, tiny_params):
                assert expected_entropy(state, action) == pytest.approx(
                    brute_force_expected_entropy(state, action), abs=1e-12)

    def test_infeasible(self, default_params):
        with pytest.raises(ContractViolation):
            expected_entropy(BeliefState((0, 5), uniform_prior(default_params)), Action.LEFT)


class TestInformationGain:

    def test_point_mass_gain_is_zero(self, default_params):
        state = BeliefState((3, 3), point_mass(SourceTerm(8, 8, 5.0), default_params))
        assert expected_information_gain(state, Action.UP) == 0.0

    def test_uniform_prior(self, default_params):
        prior = uniform_prior(default_params)
        state = BeliefState((5, 5), prior)
        for action in feasible_actions(state.pos, default_params):
            assert expected_information_gain(state, action) == pytest.approx(
                entropy(prior) - expected_entropy(state, action), abs=1e-15)

    def test_gain_nonnegative(self, default_params, rng):
        for _ in range(100):
            state = random_state(default_params, rng)
            for action in feasible_actions(state.pos, default_params):
                assert expected_information_gain(state, action) >= -1e-12

    def test_argmin_entropy_equals_argmax_gain(self, default_params):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            state = random_state(default_params, rng)
            by_entropy = tied_actions(expected_entropies(state))
            gains = {a: -expected_information_gain(state, a) for a in feasible_actions(state.pos, default_params)}
            assert tied_actions(gains) == by_entropy


class TestPolicy:

    def test_point_mass_all_tied(self, default_params, rng):
        state = BeliefState((5, 5), point_mass(SourceTerm(0, 0, 1.0), default_params))
        assert tied_actions(expected_entropies(state)) == feasible_actions((5, 5), default_params)
        assert infotaxis_action(state, rng) in feasible_actions((5, 5), default_params)

    def test_ties_broken_with_rng(self, default_params):
        state = BeliefState((5, 5), point_mass(SourceTerm(0, 0, 1.0), default_params))
        choices = {infotaxis_action(state, np.random.default_rng(seed)) for seed in range(60)}
        assert len(choices) > 1

    def test_deterministic_given_rng(self, default_params):
        rng = np.random.default_rng(8)
        states = [random_state(default_params, rng) for _ in range(20)]
        first = [infotaxis_action(s, np.random.default_rng(1)) for s in states]
        second = [infotaxis_action(s, np.random.default_rng(1)) for s in states]
        assert first == second

    def test_policy_wrapper(self, default_params, rng):
        policy = InfotaxisPolicy()
        assert policy.name == 'infotaxis'
        state = BeliefState((5, 5), uniform_prior(default_params))
        action = policy(state, rng)
        values = expected_entropies(state)
        assert values[action] <= min(values.values()) + 1e-12
