# environment.py
"""
Belief-MDP: grid motion, hit observations, belief updates and successor enumeration
"""
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from belief import (Belief, MIN_EVIDENCE, bayes_update, entropy, likelihood_table,
                    uniform_prior)
from errors import ConfigurationError, ContractViolation, EpisodeOverError
from logger import perf_logger
from plume_model import EnvParams, Position, SourceTerm, mean_hits_tensor, sample_hits

logger = perf_logger.get_logger('environment', 'env')

MASK64 = (1 << 64) - 1
DEFAULT_HORIZON = 20


class Action(Enum):
    """Grid moves; down is negative y (downwind)"""
    RIGHT = (1, 0)
    LEFT = (-1, 0)
    DOWN = (0, -1)
    UP = (0, 1)
    STAY = (0, 0)

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> 'Action':
        try:
            return cls[label.upper()]
        except KeyError:
            raise ConfigurationError(f"unknown action {label!r}") from None

    def apply(self, pos: Position) -> Position:
        dx, dy = self.value
        return pos[0] + dx, pos[1] + dy


ACTIONS: Tuple[Action, ...] = tuple(Action)


@dataclass(frozen=True)
class BeliefState:
    """State of the belief-MDP: agent position, belief and step count"""
    pos: Position
    belief: Belief
    step: int = 0
    horizon: int = DEFAULT_HORIZON

    @property
    def params(self) -> EnvParams:
        return self.belief.params

    @property
    def is_terminal(self) -> bool:
        return self.step >= self.horizon


@dataclass(frozen=True)
class Scenario:
    """Ground truth for one episode"""
    truth: SourceTerm
    params: EnvParams
    seed: int = 0

    def __post_init__(self):
        self.truth.validate(self.params)


def splitmix64(value: int) -> int:
    """64-bit finalizer used to decorrelate derived seeds"""
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-episode seed: splitmix64(master XOR index)"""
    return splitmix64((int(master_seed) & MASK64) ^ (int(index) & MASK64))


def episode_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, index))


def start_position(params: EnvParams) -> Position:
    return params.nx // 2, params.ny // 2


def reset(scenario: Scenario, rng: np.random.Generator,
          prior: Optional[Belief] = None, horizon: int = DEFAULT_HORIZON) -> Tuple[BeliefState, int]:
    """
    Agent at the center, belief updated with one observation at the start cell.
    `prior` replaces the uniform prior (test hook).
    """
    params = scenario.params
    pos = start_position(params)
    belief = prior if prior is not None else uniform_prior(params)
    h0 = _observe(scenario, pos, rng)
    belief, _ = bayes_update(belief, pos, h0, params)
    logger.debug(f"Reset at {pos}: h0={h0}, H={entropy(belief):.4f}")
    return BeliefState(pos=pos, belief=belief, step=0, horizon=horizon), h0


def _observe(scenario: Scenario, pos: Position, rng: np.random.Generator) -> int:
    truth, params = scenario.truth, scenario.params
    mu = mean_hits_tensor(params)[pos[0], pos[1], truth.xs, truth.ys, truth.phi_index(params)]
    return sample_hits(float(mu), params.h_max, rng)


def feasible_actions(pos: Position, params: EnvParams) -> List[Action]:
    """Moves that stay inside the grid, in Action order; always includes STAY"""
    return [a for a in ACTIONS if params.contains(a.apply(pos))]


def check_feasible(state: BeliefState, action: Action):
    if action not in feasible_actions(state.pos, state.params):
        raise ContractViolation(f"action {action.label} infeasible at {state.pos}")


def step(state: BeliefState, action: Action, scenario: Scenario,
         rng: np.random.Generator) -> Tuple[BeliefState, int, float]:
    """Move, observe at the new cell, update the belief; reward is -H(s')"""
    if state.is_terminal:
        raise EpisodeOverError(f"episode over: step {state.step} of {state.horizon}")
    check_feasible(state, action)
    new_pos = action.apply(state.pos)
    h = _observe(scenario, new_pos, rng)
    belief, _ = bayes_update(state.belief, new_pos, h, state.params)
    next_state = replace(state, pos=new_pos, belief=belief, step=state.step + 1)
    return next_state, h, -entropy(belief)


def successor_arrays(probs: np.ndarray, pos: Position, params: EnvParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predictive hit probabilities and posteriors for an observation at pos.
    Returns (pr_h of shape (H,), posteriors of shape (H, nx, ny, n_phi)).
    Posteriors of zero-probability hits are left equal to the prior.
    """
    lik = likelihood_table(params)[pos[0], pos[1]]              # (nx, ny, n_phi, H)
    joint = np.moveaxis(lik, -1, 0) * probs[None]               # (H, nx, ny, n_phi)
    pr_h = joint.reshape(joint.shape[0], -1).sum(axis=1)
    possible = pr_h >= MIN_EVIDENCE
    safe = np.where(possible, pr_h, 1.0)[:, None, None, None]
    posteriors = np.where(possible[:, None, None, None], joint / safe, probs[None])
    return pr_h, posteriors


def successor_distribution(state: BeliefState, action: Action) -> List[Tuple[float, BeliefState]]:
    """One (probability, next state) pair per hit count 0..h_max"""
    check_feasible(state, action)
    new_pos = action.apply(state.pos)
    pr_h, posteriors = successor_arrays(state.belief.probs, new_pos, state.params)
    return [
        (float(pr_h[h]), replace(state, pos=new_pos, belief=Belief(posteriors[h], state.params),
                                 step=state.step + 1))
        for h in range(state.params.n_hits)
    ]


def egocentric_tensor(state: BeliefState) -> np.ndarray:
    """Belief re-indexed to source-minus-agent offsets, zero outside the domain"""
    params = state.params
    return egocentric_from_probs(state.belief.probs, state.pos, params)


def egocentric_from_probs(probs: np.ndarray, pos: Position, params: EnvParams) -> np.ndarray:
    nx, ny = params.nx, params.ny
    x, y = pos
    out = np.zeros((2 * nx - 1, 2 * ny - 1, params.n_phi))
    out[nx - 1 - x:2 * nx - 1 - x, ny - 1 - y:2 * ny - 1 - y, :] = probs
    return out


def belief_from_egocentric(tensor: np.ndarray, pos: Position, params: EnvParams) -> Belief:
    """Inverse of egocentric_tensor for a known agent position"""
    nx, ny = params.nx, params.ny
    x, y = pos
    return Belief(tensor[nx - 1 - x:2 * nx - 1 - x, ny - 1 - y:2 * ny - 1 - y, :], params)
