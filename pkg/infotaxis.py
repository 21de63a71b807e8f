# infotaxis.py
"""
Greedy information-gain policy
"""
from typing import Dict, List, Sequence

import numpy as np

from belief import entropy, entropy_of
from environment import Action, BeliefState, check_feasible, feasible_actions, successor_arrays
from logger import perf_logger

logger = perf_logger.get_logger('infotaxis', 'planner')

TIE_TOLERANCE = 1e-12


def expected_entropy(state: BeliefState, action: Action) -> float:
    """Sum over successors of Pr(s'|s,a) * H(s')"""
    check_feasible(state, action)
    pr_h, posteriors = successor_arrays(state.belief.probs, action.apply(state.pos), state.params)
    return float(np.dot(pr_h, entropy_of(posteriors, axis=(1, 2, 3))))


def expected_entropies(state: BeliefState) -> Dict[Action, float]:
    """expected_entropy for every feasible action"""
    return {a: expected_entropy(state, a) for a in feasible_actions(state.pos, state.params)}


def expected_information_gain(state: BeliefState, action: Action) -> float:
    """G(s,a) = H(s) - E[H(s')]"""
    return entropy(state.belief) - expected_entropy(state, action)


def tied_actions(values: Dict[Action, float], tolerance: float = TIE_TOLERANCE) -> List[Action]:
    """Actions within tolerance of the minimum value, in Action order"""
    best = min(values.values())
    return [a for a, v in values.items() if v <= best + tolerance]


def choose_tied(tied: Sequence[Action], rng: np.random.Generator) -> Action:
    if len(tied) == 1:
        return tied[0]
    return tied[int(rng.integers(len(tied)))]


def infotaxis_action(state: BeliefState, rng: np.random.Generator) -> Action:
    """Arg-min of expected entropy; ties broken uniformly with rng"""
    values = expected_entropies(state)
    tied = tied_actions(values)
    action = choose_tied(tied, rng)
    logger.debug(f"Infotaxis at {state.pos} step {state.step}: {len(tied)} tied -> {action.label}")
    return action


class InfotaxisPolicy:
    """Policy wrapper: state, rng -> action"""

    name = 'infotaxis'

    def __call__(self, state: BeliefState, rng: np.random.Generator) -> Action:
        return infotaxis_action(state, rng)
