# belief.py
"""
Discrete Bayesian filter over source-term hypotheses
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
import pandas as pd

from errors import ConfigurationError, UpdateError
from logger import perf_logger
from plume_model import EnvParams, Position, SourceTerm, hit_distribution, mean_hits_tensor

logger = perf_logger.get_logger('belief', 'belief')

AXES = ('xs', 'ys', 'phi')
MIN_EVIDENCE = 1e-300


@dataclass(frozen=True, eq=False)
class Belief:
    """Probability of every hypothesis, indexed [xs, ys, phi_idx]"""
    probs: np.ndarray
    params: EnvParams

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.shape != self.params.shape:
            raise ConfigurationError(f"belief shape {probs.shape} does not match {self.params.shape}")
        probs.setflags(write=False)
        object.__setattr__(self, 'probs', probs)

    def is_normalized(self, atol: float = 1e-10) -> bool:
        return bool(np.all(self.probs >= 0) and abs(self.probs.sum() - 1.0) <= atol)


@lru_cache(maxsize=16)
def likelihood_table(params: EnvParams) -> np.ndarray:
    """
    Pr(h | theta, pos) for every agent position, hypothesis and hit count.
    Shape (nx, ny, nx, ny, n_phi, h_max + 1); built once per EnvParams and shared read-only.
    """
    table = hit_distribution(mean_hits_tensor(params), params.h_max)
    table.setflags(write=False)
    logger.debug(f"✅ Likelihood cache built: {table.size} entries")
    return table


def uniform_prior(params: EnvParams) -> Belief:
    return Belief(np.full(params.shape, 1.0 / params.n_hypotheses), params)


def point_mass(theta: SourceTerm, params: EnvParams) -> Belief:
    """Kronecker-delta belief on theta"""
    probs = np.zeros(params.shape)
    probs[theta.xs, theta.ys, theta.phi_index(params)] = 1.0
    return Belief(probs, params)


def observation_likelihood(pos: Position, h: int, params: EnvParams) -> np.ndarray:
    if not params.contains(pos):
        raise ConfigurationError(f"position {pos} outside the grid")
    if not 0 <= h <= params.h_max:
        raise ConfigurationError(f"hit count {h} outside 0..{params.h_max}")
    return likelihood_table(params)[pos[0], pos[1], :, :, :, h]


def bayes_update(belief: Belief, pos: Position, h: int, params: EnvParams) -> Tuple[Belief, float]:
    """Posterior after observing h hits at pos, and the evidence Pr(h)"""
    joint = observation_likelihood(pos, h, params) * belief.probs
    evidence = float(joint.sum())
    if evidence < MIN_EVIDENCE:
        raise UpdateError(f"zero evidence for h={h} at {pos}: observation impossible under the model")
    return Belief(joint / evidence, params), evidence


def entropy(belief: Belief) -> float:
    """Shannon entropy in nats, 0 ln 0 := 0"""
    p = belief.probs[belief.probs > 0]
    return float(max(-(p * np.log(p)).sum(), 0.0))


def entropy_of(probs: np.ndarray, axis=None) -> np.ndarray:
    """Entropy of raw probability arrays, reduced over axis"""
    with np.errstate(divide='ignore', invalid='ignore'):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return np.maximum(-terms.sum(axis=axis), 0.0)


def marginal(belief: Belief, axis: str) -> np.ndarray:
    if axis not in AXES:
        raise ConfigurationError(f"axis must be one of {AXES}, got {axis!r}")
    keep = AXES.index(axis)
    others = tuple(i for i in range(3) if i != keep)
    return belief.probs.sum(axis=others)


def drps(marginal_probs: np.ndarray, truth_index: int) -> float:
    """Discrete ranked probability score against a point-mass truth"""
    marginal_probs = np.asarray(marginal_probs, dtype=np.float64)
    if not 0 <= truth_index < marginal_probs.size:
        raise ConfigurationError(f"truth index {truth_index} outside 0..{marginal_probs.size - 1}")
    cdf = np.cumsum(marginal_probs)
    step = (np.arange(marginal_probs.size) >= truth_index).astype(np.float64)
    return float(((cdf - step) ** 2).sum())


def truth_indices(theta: SourceTerm, params: EnvParams) -> dict:
    return {'xs': theta.xs, 'ys': theta.ys, 'phi': theta.phi_index(params)}


def relative_drps(posterior: Belief, prior: Belief, theta: SourceTerm) -> dict:
    """drps(posterior)/drps(prior) per axis"""
    idx = truth_indices(theta, posterior.params)
    scores = {}
    for axis in AXES:
        base = drps(marginal(prior, axis), idx[axis])
        post = drps(marginal(posterior, axis), idx[axis])
        # A single-category axis scores 0 under both; nothing was left to learn
        scores[axis] = post / base if base > 0 else 0.0
    return scores


def map_estimate(belief: Belief) -> Tuple[SourceTerm, float]:
    """Mode of the belief; ties go to the smallest linear index"""
    params = belief.params
    flat = belief.probs.ravel(order='F')
    index = int(np.argmax(flat))
    xs, ys, phi_idx = np.unravel_index(index, params.shape, order='F')
    return SourceTerm(int(xs), int(ys), params.fluxes[phi_idx]), float(flat[index])


def belief_frame(belief: Belief) -> pd.DataFrame:
    """Belief snapshot as rows xs,ys,phi,prob"""
    params = belief.params
    xs, ys, phi = np.meshgrid(np.arange(params.nx), np.arange(params.ny),
                              np.asarray(params.fluxes), indexing='ij')
    return pd.DataFrame({'xs': xs.ravel(), 'ys': ys.ravel(), 'phi': phi.ravel(),
                         'prob': belief.probs.ravel()})
