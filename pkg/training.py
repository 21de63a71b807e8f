# training.py
"""
Model-based value learning: Bellman targets from exact successor enumeration,
replay of visited belief states, epsilon-greedy exploration and a target network
"""
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from belief import Belief, entropy_of
from environment import (Action, BeliefState, Scenario, egocentric_from_probs, feasible_actions,
                         reset, step, successor_arrays)
from errors import CheckpointError, ConfigurationError, ContractViolation, TrainingError
from infotaxis import TIE_TOLERANCE, choose_tied
from logger import perf_logger
from plume_model import EnvParams, SourceTerm
from value_net import (Architecture, NetworkWeights, SGDOptimizer, batch_gradient, init_weights,
                       load_checkpoint, predict, weights_from_dict, weights_to_dict)

logger = perf_logger.get_logger('training', 'training')


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 20000
    batch_size: int = 128
    learning_rate: float = 1e-3
    momentum: float = 0.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.5
    replay_capacity: int = 10000
    target_sync_interval: int = 1000
    horizon: int = 20
    warmup: Optional[int] = None          # stored states before the first gradient step; batch_size if None
    architecture: str = 'cnn'
    time_channel: bool = False
    checkpoint_every: int = 0             # episodes; 0 writes only the final checkpoint
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigurationError(f"episodes must be >= 0, got {self.episodes}")
        for name in ('batch_size', 'replay_capacity', 'target_sync_interval', 'horizon'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("learning_rate must be >= 0 and momentum in [0, 1)")
        for name in ('epsilon_start', 'epsilon_end', 'epsilon_decay_fraction'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.warmup is not None and self.warmup < 1:
            raise ConfigurationError(f"warmup must be positive, got {self.warmup}")
        # the buffer never holds more than replay_capacity states
        if self.warmup_states > self.replay_capacity:
            raise ConfigurationError(
                f"warmup of {self.warmup_states} states exceeds replay_capacity {self.replay_capacity}; "
                f"no gradient step would ever run")

    @property
    def warmup_states(self) -> int:
        return self.batch_size if self.warmup is None else self.warmup

    def epsilon(self, episode: int) -> float:
        """Linear decay over the first epsilon_decay_fraction of episodes"""
        decay_episodes = self.epsilon_decay_fraction * self.episodes
        if decay_episodes <= 0:
            return self.epsilon_end
        frac = min(1.0, episode / decay_episodes)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


class ReplayBuffer:
    """Bounded FIFO of visited belief states"""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.memory = deque(maxlen=capacity)

    def add(self, state: BeliefState):
        self.memory.append(state)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[BeliefState]:
        size = min(batch_size, len(self.memory))
        idx = rng.choice(len(self.memory), size=size, replace=False)
        return [self.memory[i] for i in idx]

    def __len__(self):
        return len(self.memory)


# --- encoding -----------------------------------------------------------------

def encode_probs(probs: np.ndarray, pos, step_count: int, horizon: int, params: EnvParams,
                 time_channel: bool = False) -> np.ndarray:
    tensor = egocentric_from_probs(probs, pos, params)
    if not time_channel:
        return tensor
    to_go = np.full(tensor.shape[:2] + (1,), (horizon - step_count) / horizon)
    return np.concatenate([tensor, to_go], axis=-1)


def encode_states(states: Sequence[BeliefState], time_channel: bool = False) -> np.ndarray:
    return np.stack([encode_probs(s.belief.probs, s.pos, s.step, s.horizon, s.params, time_channel)
                     for s in states])


def architecture_for(config: TrainConfig, params: EnvParams) -> Architecture:
    return Architecture.for_params(config.architecture, params, extra_channels=int(config.time_channel))


# --- Bellman backups ------------------------------------------------------------

def action_values(states: Sequence[BeliefState], weights: NetworkWeights,
                  time_channel: bool = False) -> List[Dict[Action, float]]:
    """
    For every state and feasible action: sum over successors of Pr(s'|s,a) [H(s') + v(s')],
    with v(s') = 0 when s' reaches the horizon. All successor values come from one batched forward pass.
    """
    plans = []
    inputs = []
    for state in states:
        params = state.params
        next_step = state.step + 1
        terminal = next_step >= state.horizon
        per_action = []
        for action in feasible_actions(state.pos, params):
            new_pos = action.apply(state.pos)
            pr_h, posteriors = successor_arrays(state.belief.probs, new_pos, params)
            entropies = entropy_of(posteriors, axis=(1, 2, 3))
            offset = None
            if not terminal:
                offset = len(inputs)
                inputs.extend(encode_probs(p, new_pos, next_step, state.horizon, params, time_channel)
                              for p in posteriors)
            per_action.append((action, pr_h, entropies, offset))
        plans.append(per_action)

    successor_values = predict(weights, np.stack(inputs)) if inputs else np.zeros(0)

    results = []
    for per_action in plans:
        values = {}
        for action, pr_h, entropies, offset in per_action:
            if offset is None:
                v_next = np.zeros_like(entropies)
            else:
                v_next = successor_values[offset:offset + len(pr_h)]
            values[action] = float(np.dot(pr_h, entropies + v_next))
        results.append(values)
    return results


def _best(values: Dict[Action, float], rng: Optional[np.random.Generator]) -> Tuple[float, Action, List[Action]]:
    best_value = min(values.values())
    tied = [a for a, v in values.items() if v <= best_value + TIE_TOLERANCE]
    action = choose_tied(tied, rng) if rng is not None else tied[0]
    return best_value, action, tied


def bellman_backup(state: BeliefState, weights: NetworkWeights, rng: Optional[np.random.Generator] = None,
                   time_channel: bool = False) -> Tuple[float, Action]:
    """
    (min_a backed-up value, minimizing action). Ties are broken uniformly with rng,
    or by Action order when no rng is given.
    """
    if state.is_terminal:
        raise ContractViolation(f"no backup from a terminal state (step {state.step})")
    value, action, _ = _best(action_values([state], weights, time_channel)[0], rng)
    return value, action


def bellman_tied_actions(state: BeliefState, weights: NetworkWeights, time_channel: bool = False) -> List[Action]:
    return _best(action_values([state], weights, time_channel)[0], None)[2]


def bellman_targets(states: Sequence[BeliefState], target_weights: NetworkWeights,
                    time_channel: bool = False) -> np.ndarray:
    return np.array([min(v.values()) for v in action_values(states, target_weights, time_channel)])


def bellman_loss(states: Sequence[BeliefState], weights: NetworkWeights, target_weights: NetworkWeights,
                 time_channel: bool = False) -> float:
    """Mean squared Bellman optimality error over a batch"""
    if len(states) == 0:
        raise ConfigurationError("bellman_loss needs a non-empty batch")
    targets = bellman_targets(states, target_weights, time_channel)
    values = predict(weights, encode_states(states, time_channel))
    return float(np.mean((targets - values) ** 2))


def drl_action(state: BeliefState, weights: NetworkWeights, rng: np.random.Generator,
               time_channel: bool = False) -> Action:
    return bellman_backup(state, weights, rng, time_channel)[1]


class DRLPolicy:
    """Greedy-in-backup policy derived from a value network"""

    name = 'drl'

    def __init__(self, weights: NetworkWeights, time_channel: bool = False):
        self.weights = weights
        self.time_channel = time_channel

    def __call__(self, state: BeliefState, rng: np.random.Generator) -> Action:
        return drl_action(state, self.weights, rng, self.time_channel)


# --- training loop ----------------------------------------------------------------

def truth_from_index(index: int, params: EnvParams) -> SourceTerm:
    """Hypothesis for linear index ((phi_idx*ny + ys)*nx + xs)"""
    xs, ys, phi_idx = np.unravel_index(int(index), params.shape, order='F')
    return SourceTerm(int(xs), int(ys), params.fluxes[phi_idx])


class Trainer:
    """Runs the value-learning loop and keeps everything needed to resume it"""

    STATE_FILE = 'training_state.npz'

    def __init__(self, config: TrainConfig, params: EnvParams):
        self.config = config
        self.params = params
        self.logger = logger
        self.rng = np.random.default_rng(config.seed)
        self.architecture = architecture_for(config, params)
        self.weights = init_weights(self.architecture, self.rng)
        self.target_weights = self.weights.copy()
        self.optimizer = SGDOptimizer(config.learning_rate, config.momentum)
        self.buffer = ReplayBuffer(config.replay_capacity)
        self.episode = 0
        self.grad_steps = 0
        self.history: List[Dict[str, float]] = []

    def train(self, stop_after: Optional[int] = None,
              on_episode_end: Optional[Callable[['Trainer'], None]] = None) -> Tuple[NetworkWeights, pd.DataFrame]:
        """
        Train until config.episodes (or stop_after more episodes).
        Returns the current weights and the per-episode history.
        """
        cfg = self.config
        last = cfg.episodes if stop_after is None else min(cfg.episodes, self.episode + stop_after)
        started = time.time()
        if self.episode < last:
            self.logger.info(f"🔄 Training {self.architecture.kind.upper()} from episode {self.episode} to {last} "
                             f"({self.weights.n_parameters()} parameters)")

        while self.episode < last:
            record = self._run_episode(self.episode)
            self.history.append(record)
            self.episode += 1

            if cfg.log_every and self.episode % cfg.log_every == 0:
                recent = pd.DataFrame(self.history[-cfg.log_every:])
                self.logger.info(
                    f"📊 Episode {self.episode}/{cfg.episodes}: loss={recent['loss'].mean():.5f} "
                    f"cumH={recent['cumulative_entropy'].mean():.2f} eps={record['epsilon']:.3f} "
                    f"({time.time() - started:.0f}s)")
            if on_episode_end is not None:
                on_episode_end(self)

        self.weights.training_meta = {'episodes': self.episode, 'seed': cfg.seed,
                                      'gradient_steps': self.grad_steps}
        return self.weights, self.history_frame()

    def _run_episode(self, episode: int) -> Dict[str, float]:
        cfg = self.config
        epsilon = cfg.epsilon(episode)
        truth = truth_from_index(self.rng.integers(self.params.n_hypotheses), self.params)
        scenario = Scenario(truth, self.params, seed=cfg.seed)
        state, _ = reset(scenario, self.rng, horizon=cfg.horizon)
        self.buffer.add(state)

        losses = []
        cumulative_entropy = 0.0
        while not state.is_terminal:
            actions = feasible_actions(state.pos, self.params)
            if self.rng.random() < epsilon:
                action = actions[int(self.rng.integers(len(actions)))]
            else:
                action = drl_action(state, self.weights, self.rng, cfg.time_channel)
            state, _, reward = step(state, action, scenario, self.rng)
            cumulative_entropy -= reward
            # Terminal states have value 0 by definition and are never backed up
            if not state.is_terminal:
                self.buffer.add(state)

            if len(self.buffer) >= cfg.warmup_states:
                losses.append(self._gradient_step(episode))

        return {
            'episode': episode,
            'loss': float(np.mean(losses)) if losses else math.nan,
            'cumulative_entropy': cumulative_entropy,
            'epsilon': epsilon,
        }

    def _gradient_step(self, episode: int) -> float:
        cfg = self.config
        batch = self.buffer.sample(cfg.batch_size, self.rng)
        targets = bellman_targets(batch, self.target_weights, cfg.time_channel)
        grad, loss = batch_gradient(self.weights, encode_states(batch, cfg.time_channel), targets)
        if not math.isfinite(loss):
            raise TrainingError("non-finite Bellman loss", episode=episode)
        try:
            self.weights = self.optimizer.step(self.weights, grad)
        except TrainingError as e:
            raise TrainingError(str(e), episode=episode) from e
        self.grad_steps += 1
        if self.grad_steps % cfg.target_sync_interval == 0:
            self.target_weights = self.weights.copy()
            self.logger.debug(f"Target network synced at gradient step {self.grad_steps}")
        return loss

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['episode', 'loss', 'cumulative_entropy', 'epsilon'])

    # --- resume support ---

    def save_state(self, directory):
        """Everything beyond the weights that an exact resume needs"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for name, weights in (('target', self.target_weights), ('velocity', self.optimizer.velocity)):
            if weights is None:
                continue
            for i, a in enumerate(weights.arrays()):
                arrays[f'{name}_{i}'] = a
        states = list(self.buffer.memory)
        arrays['replay_probs'] = np.stack([s.belief.probs for s in states]) if states else np.zeros((0,) + self.params.shape)
        arrays['replay_pos'] = np.array([s.pos for s in states], dtype=np.int64).reshape(-1, 2)
        arrays['replay_step'] = np.array([s.step for s in states], dtype=np.int64)
        meta = {
            'episode': self.episode,
            'grad_steps': self.grad_steps,
            'rng_state': self.rng.bit_generator.state,
            'history': self.history,
            'weights': weights_to_dict(self.weights, self.params),
            'has_velocity': self.optimizer.velocity is not None,
            'config': asdict(self.config),
        }
        arrays['meta'] = np.array(json.dumps(meta))
        np.savez(directory / self.STATE_FILE, **arrays)
        self.logger.debug(f"💾 Training state saved at episode {self.episode}")

    @classmethod
    def from_state(cls, directory, params: EnvParams, config: Optional[TrainConfig] = None) -> 'Trainer':
        path = Path(directory) / cls.STATE_FILE
        if not path.exists():
            raise ConfigurationError(f"no training state at {path}")
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data['meta']))
            saved_config = TrainConfig(**meta['config'])
            trainer = cls(config or saved_config, params)
            trainer.weights = weights_from_dict(meta['weights'])
            n_arrays = len(trainer.weights.arrays())
            trainer.target_weights = _rebuild(trainer.weights, [data[f'target_{i}'] for i in range(n_arrays)])
            if meta['has_velocity']:
                trainer.optimizer.velocity = _rebuild(trainer.weights, [data[f'velocity_{i}'] for i in range(n_arrays)])
            for probs, pos, step_count in zip(data['replay_probs'], data['replay_pos'], data['replay_step']):
                trainer.buffer.add(BeliefState((int(pos[0]), int(pos[1])), Belief(probs, params),
                                               int(step_count), trainer.config.horizon))
        trainer.rng.bit_generator.state = meta['rng_state']
        trainer.episode = meta['episode']
        trainer.grad_steps = meta['grad_steps']
        trainer.history = meta['history']
        trainer.logger.info(f"✅ Resumed training at episode {trainer.episode}")
        return trainer


def _rebuild(template: NetworkWeights, arrays: List[np.ndarray]) -> NetworkWeights:
    it = iter(arrays)
    return template.map(lambda _: np.array(next(it)))


def train(config: TrainConfig, params: EnvParams) -> Tuple[NetworkWeights, pd.DataFrame]:
    """Train from scratch; fully reproducible from config.seed"""
    return Trainer(config, params).train()


def policy_from_checkpoint(path, params: EnvParams) -> DRLPolicy:
    """DRL policy from a checkpoint; a time-to-go channel is recognised by its extra input channel"""
    weights = load_checkpoint(path)
    time_channel = weights.architecture.input_shape[2] == params.n_phi + 1
    expected = Architecture.for_params(weights.architecture.kind, params, int(time_channel)).input_shape
    if weights.architecture.input_shape != expected:
        raise CheckpointError(f"checkpoint input shape {weights.architecture.input_shape} does not fit "
                              f"a {params.nx}x{params.ny}x{params.n_phi} environment (expected {expected})")
    return DRLPolicy(weights, time_channel)
