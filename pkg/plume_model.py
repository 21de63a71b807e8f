# plume_model.py
"""
Dimensionless advection-diffusion plume and the Poisson hit-count channel
"""
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np
import pandas as pd
from scipy import special

from errors import ConfigurationError, DomainError
from logger import perf_logger

logger = perf_logger.get_logger('plume_model', 'plume')

Position = Tuple[int, int]


@dataclass(frozen=True)
class EnvParams:
    """Physical and discretization constants of one environment"""
    nx: int = 11
    ny: int = 11
    fluxes: Tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0)
    wind_speed: float = 2.0       # Blows toward negative y
    diffusivity: float = 2.0
    lifetime: float = 1e7
    radius: float = 0.5
    dt: float = 1.0
    h_max: int = 3

    def __post_init__(self):
        # Accept any sequence for fluxes but store a hashable tuple
        object.__setattr__(self, 'fluxes', tuple(float(f) for f in self.fluxes))
        self.validate()

    def validate(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.nx}x{self.ny}")
        if not self.fluxes:
            raise ConfigurationError("fluxes must not be empty")
        if any(f <= 0 for f in self.fluxes):
            raise ConfigurationError(f"fluxes must be strictly positive: {self.fluxes}")
        if len(set(self.fluxes)) != len(self.fluxes):
            raise ConfigurationError(f"fluxes must be distinct: {self.fluxes}")
        if self.diffusivity <= 0 or self.lifetime <= 0 or self.radius <= 0 or self.dt <= 0:
            raise ConfigurationError("diffusivity, lifetime, radius and dt must be > 0")
        if self.wind_speed < 0:
            raise ConfigurationError(f"wind_speed must be >= 0, got {self.wind_speed}")
        if self.h_max < 1:
            raise ConfigurationError(f"h_max must be >= 1, got {self.h_max}")

    @property
    def n_phi(self) -> int:
        return len(self.fluxes)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.nx, self.ny, self.n_phi

    @property
    def n_hypotheses(self) -> int:
        return self.nx * self.ny * self.n_phi

    @property
    def n_hits(self) -> int:
        """Size of the observation alphabet {0..h_max}"""
        return self.h_max + 1

    def contains(self, pos: Position) -> bool:
        x, y = pos
        return 0 <= x < self.nx and 0 <= y < self.ny


@dataclass(frozen=True)
class SourceTerm:
    """One source hypothesis: cell (xs, ys) emitting flux phi"""
    xs: int
    ys: int
    phi: float

    def validate(self, params: EnvParams):
        if not params.contains((self.xs, self.ys)):
            raise ConfigurationError(f"source ({self.xs},{self.ys}) outside {params.nx}x{params.ny} grid")
        if float(self.phi) not in params.fluxes:
            raise ConfigurationError(f"flux {self.phi} not in {params.fluxes}")

    def phi_index(self, params: EnvParams) -> int:
        self.validate(params)
        return params.fluxes.index(float(self.phi))

    def linear_index(self, params: EnvParams) -> int:
        """Hypothesis index ((phi_idx*ny + ys)*nx + xs)"""
        return (self.phi_index(params) * params.ny + self.ys) * params.nx + self.xs


def bessel_k0(z: float) -> float:
    """Modified Bessel function of the second kind, order 0"""
    if not z > 0:
        raise DomainError(f"K0 is defined for z > 0, got {z}")
    return float(special.k0(z))


def dispersion_length(params: EnvParams) -> float:
    """lambda = sqrt(D*tau / (1 + V^2*tau/(4D)))"""
    d, v, tau = params.diffusivity, params.wind_speed, params.lifetime
    return math.sqrt(d * tau / (1.0 + v * v * tau / (4.0 * d)))


def _log_lambda_over_r(params: EnvParams) -> float:
    lam = dispersion_length(params)
    if lam <= params.radius:
        raise ConfigurationError(
            f"dispersion length {lam:.6g} must exceed the agent radius {params.radius}")
    return math.log(lam / params.radius)


def _mean_hits_array(dx: np.ndarray, dy: np.ndarray, phi: np.ndarray, params: EnvParams) -> np.ndarray:
    """Mean hit rate on broadcast arrays of offsets x - xs, y - ys"""
    lam = dispersion_length(params)
    log_ratio = _log_lambda_over_r(params)
    dist = np.maximum(np.hypot(dx, dy), params.radius)
    advection = np.exp(-dy * params.wind_speed / (2.0 * params.diffusivity))
    return phi * params.dt / log_ratio * advection * special.k0(dist / lam)


def mean_hits(theta: SourceTerm, pos: Position, params: EnvParams) -> float:
    """Mean number of hits at pos for source theta"""
    if not params.contains(pos):
        raise ConfigurationError(f"position {pos} outside the grid")
    mu = _mean_hits_array(np.float64(pos[0] - theta.xs), np.float64(pos[1] - theta.ys),
                          np.float64(theta.phi), params)
    return float(mu)


@lru_cache(maxsize=16)
def mean_hits_tensor(params: EnvParams) -> np.ndarray:
    """
    mu for every (agent x, agent y, source x, source y, flux index).
    Shape (nx, ny, nx, ny, n_phi); read-only.
    """
    x = np.arange(params.nx, dtype=np.float64)
    y = np.arange(params.ny, dtype=np.float64)
    dx = x[:, None, None, None, None] - x[None, None, :, None, None]
    dy = y[None, :, None, None, None] - y[None, None, None, :, None]
    phi = np.asarray(params.fluxes, dtype=np.float64)[None, None, None, None, :]
    mu = _mean_hits_array(dx, dy, phi, params)
    mu.setflags(write=False)
    logger.debug(f"📊 Mean-hit tensor built for {params.nx}x{params.ny}x{params.n_phi}, max mu={mu.max():.4g}")
    return mu


def hit_distribution(mu, h_max: int) -> np.ndarray:
    """
    Poisson probabilities of 0..h_max hits with the tail lumped into h_max.
    Accepts a scalar or an array of means; the hit axis is appended last.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu < 0):
        raise DomainError("mean hit rate must be >= 0")
    h = np.arange(h_max, dtype=np.float64)
    mu_b = mu[..., None]
    head = np.exp(special.xlogy(h, mu_b) - mu_b - special.gammaln(h + 1.0))
    # P(H >= h_max) directly, so the top bin never goes negative from cancellation
    tail = special.pdtrc(h_max - 1, mu)[..., None]
    return np.concatenate([head, tail], axis=-1)


def sample_hits(mu: float, h_max: int, rng: np.random.Generator) -> int:
    """Draw one capped hit count"""
    probs = hit_distribution(mu, h_max)
    return int(rng.choice(h_max + 1, p=probs / probs.sum()))


def mean_hit_map(theta: SourceTerm, params: EnvParams) -> np.ndarray:
    """
    nx x ny field of mean hits, clamped to h_max.
    For export only: inference uses the unclamped means.
    """
    theta.validate(params)
    field_mu = mean_hits_tensor(params)[:, :, theta.xs, theta.ys, theta.phi_index(params)]
    return np.minimum(field_mu, float(params.h_max))


def sample_hit_map(theta: SourceTerm, params: EnvParams, rng: np.random.Generator) -> np.ndarray:
    """One noisy measurement per cell, drawn from the capped hit channel"""
    theta.validate(params)
    field_mu = mean_hits_tensor(params)[:, :, theta.xs, theta.ys, theta.phi_index(params)]
    probs = hit_distribution(field_mu, params.h_max)
    # Inverse-CDF sampling keeps the draw order row-major and reproducible
    u = rng.random(field_mu.shape)
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((u[..., None] >= cdf).sum(axis=-1), params.h_max).astype(np.int64)


def hit_field_frame(theta: SourceTerm, params: EnvParams,
                    rng: np.random.Generator = None) -> pd.DataFrame:
    """Mean-hit field as rows x,y,mu (row-major); adds h when rng is given"""
    mu = mean_hit_map(theta, params)
    xs, ys = np.meshgrid(np.arange(params.nx), np.arange(params.ny), indexing='ij')
    frame = pd.DataFrame({'x': xs.ravel(), 'y': ys.ravel(), 'mu': mu.ravel()})
    if rng is not None:
        frame['h'] = sample_hit_map(theta, params, rng).ravel()
    return frame
