# evaluation.py
"""
Episode runner, aggregate metrics, policy comparison, sensitivity sweeps
and the exhaustive expectimin oracle
"""
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from belief import (AXES, MIN_EVIDENCE, Belief, entropy, entropy_of, likelihood_table, map_estimate,
                    relative_drps, uniform_prior)
from environment import (ACTIONS, Action, BeliefState, DEFAULT_HORIZON, Scenario, episode_rng,
                         feasible_actions, reset, start_position, step, successor_arrays,
                         successor_distribution)
from errors import ConfigurationError, ContractViolation, OracleGuardError
from infotaxis import TIE_TOLERANCE, expected_entropies, tied_actions
from logger import perf_logger
from plume_model import EnvParams, SourceTerm
from training import truth_from_index

logger = perf_logger.get_logger('evaluation', 'eval')

Policy = Callable[[BeliefState, np.random.Generator], Action]

SUCCESS_PROBABILITY = 0.5
DEFAULT_MAX_LEAVES = 10 ** 6
PERCENTILES = {'median': 0.5, 'p75': 0.75}


class RandomPolicy:
    """Uniform choice among feasible actions"""

    name = 'random'

    def __call__(self, state: BeliefState, rng: np.random.Generator) -> Action:
        actions = feasible_actions(state.pos, state.params)
        return actions[int(rng.integers(len(actions)))]


@dataclass
class StepRecord:
    step: int
    x: int
    y: int
    action: str
    hits: int
    entropy: float
    reward: float


@dataclass
class EpisodeRecord:
    """
    Outcome of one episode. A policy that returns an infeasible action ends the
    episode early: the trajectory is truncated, success is False and `error` holds the reason.
    """
    scenario: Scenario
    start: Tuple[int, int]
    initial_hits: int
    trajectory: List[StepRecord] = field(default_factory=list)
    map_estimate: Optional[SourceTerm] = None
    map_probability: float = 0.0
    cumulative_entropy: float = 0.0
    relative_drps: Dict[str, float] = field(default_factory=dict)
    success: bool = False
    error: Optional[str] = None
    final_belief: Optional[Belief] = None


def run_episode(policy: Policy, scenario: Scenario, rng: np.random.Generator,
                prior: Optional[Belief] = None, horizon: int = DEFAULT_HORIZON) -> EpisodeRecord:
    """Reset, then `horizon` policy steps; success needs the joint MAP to be the truth with Pr >= 0.5"""
    params = scenario.params
    initial = prior if prior is not None else uniform_prior(params)
    state, h0 = reset(scenario, rng, prior=initial, horizon=horizon)
    record = EpisodeRecord(scenario=scenario, start=state.pos, initial_hits=h0)

    while not state.is_terminal:
        try:
            action = policy(state, rng)
            state, h, reward = step(state, action, scenario, rng)
        except ContractViolation as e:
            record.error = str(e)
            logger.warning(f"⚠ Episode failed at step {state.step}: {e}")
            break
        record.trajectory.append(StepRecord(step=state.step, x=state.pos[0], y=state.pos[1],
                                            action=action.label, hits=h, entropy=-reward, reward=reward))

    record.cumulative_entropy = float(sum(r.entropy for r in record.trajectory))
    record.final_belief = state.belief
    record.map_estimate, record.map_probability = map_estimate(state.belief)
    record.relative_drps = relative_drps(state.belief, initial, scenario.truth)
    record.success = (record.error is None and record.map_estimate == scenario.truth
                      and record.map_probability >= SUCCESS_PROBABILITY)
    return record


def trajectory_frame(record: EpisodeRecord) -> pd.DataFrame:
    """Per-step rows step,x,y,action,hits,entropy,reward,cumulative_entropy"""
    frame = pd.DataFrame([vars(r) for r in record.trajectory],
                         columns=['step', 'x', 'y', 'action', 'hits', 'entropy', 'reward'])
    frame['cumulative_entropy'] = frame['entropy'].cumsum()
    return frame


# --- aggregate evaluation --------------------------------------------------------------

@dataclass
class EvaluationResult:
    records: List[EpisodeRecord]
    episodes: pd.DataFrame
    summary: Dict
    per_flux: pd.DataFrame
    per_location: pd.DataFrame


def draw_scenario(params: EnvParams, rng: np.random.Generator, index: int,
                  stratify: bool = False, per_flux_episodes: int = 1000) -> Scenario:
    """
    Uniform over all hypotheses, or, when stratified, flux stratum index // per_flux_episodes
    with a uniform location inside it
    """
    if stratify:
        phi_idx = index // per_flux_episodes
        loc = int(rng.integers(params.nx * params.ny))
        truth = SourceTerm(loc % params.nx, loc // params.nx, params.fluxes[phi_idx])
    else:
        truth = truth_from_index(rng.integers(params.n_hypotheses), params)
    return Scenario(truth, params)


def _episode(policy: Policy, params: EnvParams, master_seed: int, index: int, horizon: int,
             stratify: bool, per_flux_episodes: int) -> EpisodeRecord:
    rng = episode_rng(master_seed, index)
    scenario = draw_scenario(params, rng, index, stratify, per_flux_episodes)
    return run_episode(policy, replace(scenario, seed=index), rng, horizon=horizon)


def run_episodes(policy: Policy, params: EnvParams, n_episodes: int, master_seed: int,
                 horizon: int = DEFAULT_HORIZON, threads: int = 1, stratify: bool = False,
                 per_flux_episodes: int = 1000) -> List[EpisodeRecord]:
    """Records in episode order regardless of completion order"""
    likelihood_table(params)
    records: List[Optional[EpisodeRecord]] = [None] * n_episodes
    started = time.time()
    args = (params, master_seed)
    if threads <= 1:
        for i in range(n_episodes):
            records[i] = _episode(policy, *args, i, horizon, stratify, per_flux_episodes)
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            futures = {executor.submit(_episode, policy, *args, i, horizon, stratify, per_flux_episodes): i
                       for i in range(n_episodes)}
            for future in as_completed(futures):
                records[futures[future]] = future.result()
    logger.info(f"✅ {n_episodes} episodes of {getattr(policy, 'name', 'policy')} "
                f"in {time.time() - started:.1f}s ({threads} threads)")
    return records


def episodes_frame(records: Sequence[EpisodeRecord]) -> pd.DataFrame:
    rows = []
    for i, r in enumerate(records):
        truth = r.scenario.truth
        row = {'episode': i, 'xs': truth.xs, 'ys': truth.ys, 'phi': truth.phi,
               'success': r.success, 'cumulative_entropy': r.cumulative_entropy,
               'map_probability': r.map_probability, 'failed': r.error is not None}
        row.update({f'drps_{axis}': r.relative_drps[axis] for axis in AXES})
        rows.append(row)
    return pd.DataFrame(rows)


def aggregate(records: Sequence[EpisodeRecord]) -> EvaluationResult:
    if not records:
        raise ConfigurationError("nothing to aggregate: no episodes")
    frame = episodes_frame(records)
    per_flux = (frame.groupby('phi')['success'].agg(['size', 'mean']).reset_index()
                .rename(columns={'size': 'episodes', 'mean': 'success_rate'}))
    per_location = (frame.groupby(['xs', 'ys'])['success'].agg(['size', 'mean']).reset_index()
                    .rename(columns={'size': 'episodes', 'mean': 'success_rate'}))
    summary = {
        'n_episodes': len(frame),
        'success_rate': float(frame['success'].mean()),
        'mean_cumulative_entropy': float(frame['cumulative_entropy'].mean()),
        'failed_episodes': int(frame['failed'].sum()),
        'drps': {axis: {name: float(frame[f'drps_{axis}'].quantile(q)) for name, q in PERCENTILES.items()}
                 for axis in AXES},
        'per_flux': {f'{row.phi:g}': float(row.success_rate) for row in per_flux.itertuples()},
    }
    return EvaluationResult(list(records), frame, summary, per_flux, per_location)


def evaluate(policy: Policy, params: EnvParams, n_episodes: int, master_seed: int,
             horizon: int = DEFAULT_HORIZON, threads: int = 1, stratify: bool = False,
             per_flux_episodes: int = 1000) -> EvaluationResult:
    """
    Run and aggregate episodes. Episode i draws its scenario and every hit from
    episode_rng(master_seed, i), so results do not depend on `threads`.
    A stratified run has per_flux_episodes episodes per flux and ignores n_episodes.
    """
    if stratify:
        if per_flux_episodes < 1:
            raise ConfigurationError(f"per_flux_episodes must be >= 1, got {per_flux_episodes}")
        n_episodes = per_flux_episodes * params.n_phi
    if n_episodes < 1:
        raise ConfigurationError(f"n_episodes must be >= 1, got {n_episodes}")
    records = run_episodes(policy, params, n_episodes, master_seed, horizon, threads, stratify, per_flux_episodes)
    result = aggregate(records)
    logger.info(f"📊 success={result.summary['success_rate']:.3f} "
                f"cumH={result.summary['mean_cumulative_entropy']:.2f}")
    return result


def metrics_frame(result: EvaluationResult, policy: str, V: float, D: float) -> pd.DataFrame:
    """Long-form rows metric,policy,V,D,flux,value"""
    s = result.summary
    rows = [('success_rate', 'all', s['success_rate']),
            ('mean_cumulative_entropy', 'all', s['mean_cumulative_entropy']),
            ('n_episodes', 'all', s['n_episodes'])]
    for axis, scores in s['drps'].items():
        rows.extend((f'drps_{name}_{axis}', 'all', value) for name, value in scores.items())
    rows.extend(('success_rate', flux, value) for flux, value in s['per_flux'].items())
    return pd.DataFrame([{'metric': m, 'policy': policy, 'V': V, 'D': D, 'flux': f, 'value': v}
                         for m, f, v in rows])


def compare_policies(records_a: Sequence[EpisodeRecord], records_b: Sequence[EpisodeRecord],
                     names: Tuple[str, str] = ('a', 'b')) -> Tuple[pd.DataFrame, Dict[str, float]]:
    """
    Per-location success of two policies and the share of locations each one wins.
    Locations that only one policy visited are left out.
    """
    a, b = names
    loc_a = aggregate(records_a).per_location[['xs', 'ys', 'success_rate']].rename(columns={'success_rate': a})
    loc_b = aggregate(records_b).per_location[['xs', 'ys', 'success_rate']].rename(columns={'success_rate': b})
    table = loc_a.merge(loc_b, on=['xs', 'ys'], how='inner')
    table['winner'] = np.where(table[a] > table[b], a, np.where(table[b] > table[a], b, 'tie'))
    counts = table['winner'].value_counts()
    n = max(len(table), 1)
    shares = {f'{a}_wins': counts.get(a, 0) / n, f'{b}_wins': counts.get(b, 0) / n,
              'ties': counts.get('tie', 0) / n}
    return table, {k: float(v) for k, v in shares.items()}


# --- sensitivity sweep ----------------------------------------------------------------------

PolicyFactory = Callable[[EnvParams], Policy]


def sensitivity_sweep(factories: Dict[str, PolicyFactory], base_params: EnvParams,
                      V_values: Sequence[float], D_values: Sequence[float], n_episodes: int,
                      master_seed: int, horizon: int = DEFAULT_HORIZON, threads: int = 1) -> pd.DataFrame:
    """
    For every (V, D) cell and policy: build the policy for those conditions, evaluate,
    and report rows policy,V,D,axis,percentile,value
    """
    if not V_values or not D_values:
        raise ConfigurationError("sensitivity sweep needs non-empty V and D value lists")
    rows = []
    for V in V_values:
        for D in D_values:
            params = replace(base_params, wind_speed=float(V), diffusivity=float(D))
            params.validate()
            for name, factory in factories.items():
                logger.info(f"🔄 Sweep cell V={V:g} D={D:g}: {name}")
                result = evaluate(factory(params), params, n_episodes, master_seed, horizon, threads)
                for axis, scores in result.summary['drps'].items():
                    rows.extend({'policy': name, 'V': float(V), 'D': float(D), 'axis': axis,
                                 'percentile': pct, 'value': value} for pct, value in scores.items())
    return pd.DataFrame(rows, columns=['policy', 'V', 'D', 'axis', 'percentile', 'value'])


def checkpoint_path_for(directory, kind: str, params: EnvParams) -> Path:
    return Path(directory) / f"{kind}_V{params.wind_speed:g}_D{params.diffusivity:g}.json"


def checkpoint_policy_factory(directory, train_config, allow_training: bool) -> PolicyFactory:
    """
    Loads the per-cell checkpoint from `directory`; trains and saves one when it is
    missing and training is allowed
    """
    from training import DRLPolicy, architecture_for, train
    from value_net import load_checkpoint, save_checkpoint

    def factory(params: EnvParams) -> Policy:
        arch = architecture_for(train_config, params)
        path = checkpoint_path_for(directory, train_config.architecture, params)
        if path.exists():
            weights = load_checkpoint(path, expected_kind=arch.kind, expected_input_shape=arch.input_shape)
        elif allow_training:
            weights, _ = train(train_config, params)
            save_checkpoint(weights, path, params)
            logger.info(f"💾 Checkpoint written: {path}")
        else:
            raise ConfigurationError(f"missing checkpoint {path} and training is disabled")
        return DRLPolicy(weights, train_config.time_channel)

    return factory


# --- exhaustive oracle ------------------------------------------------------------------------

@dataclass
class OracleResult:
    value: float
    best_actions: List[Action]
    action_values: Dict[Action, float]
    depth: int
    leaves: int


def oracle_leaves(params: EnvParams, depth: int) -> int:
    """Upper bound on (action, hit) paths of the full tree"""
    return (len(ACTIONS) * params.n_hits) ** depth


def _oracle_action_values(probs: np.ndarray, pos, params: EnvParams, depth: int) -> Dict[Action, float]:
    values = {}
    for action in feasible_actions(pos, params):
        new_pos = action.apply(pos)
        pr_h, posteriors = successor_arrays(probs, new_pos, params)
        entropies = entropy_of(posteriors, axis=(1, 2, 3))
        future = np.zeros_like(entropies)
        if depth > 1:
            for h in range(len(pr_h)):
                if pr_h[h] >= MIN_EVIDENCE:
                    future[h] = min(_oracle_action_values(posteriors[h], new_pos, params, depth - 1).values())
        values[action] = float(np.dot(pr_h, entropies + future))
    return values


def exhaustive_oracle(params: EnvParams, horizon: int, start_state: Optional[BeliefState] = None,
                      max_leaves: int = DEFAULT_MAX_LEAVES) -> OracleResult:
    """
    Exact expectimin of the cumulative entropy over the remaining steps from start_state
    (default: grid center, uniform prior, step 0)
    """
    if start_state is None:
        start_state = BeliefState(start_position(params), uniform_prior(params), 0, horizon)
    depth = start_state.horizon - start_state.step
    if depth < 1:
        raise ConfigurationError(f"oracle needs at least one step to go, got {depth}")
    leaves = oracle_leaves(params, depth)
    if leaves > max_leaves:
        raise OracleGuardError(f"oracle tree has up to {leaves} leaves (limit {max_leaves}); "
                               f"reduce the horizon or h_max")
    values = _oracle_action_values(start_state.belief.probs, start_state.pos, params, depth)
    best = min(values.values())
    return OracleResult(best, tied_actions(values, TIE_TOLERANCE), values, depth, leaves)


def greedy_expected_value(state: BeliefState, tied_fn: Callable[[BeliefState], List[Action]]) -> float:
    """
    Expected cumulative entropy to the horizon of a policy that picks uniformly
    among tied_fn(state)
    """
    if state.is_terminal:
        return 0.0
    total = 0.0
    tied = tied_fn(state)
    for action in tied:
        for pr, successor in successor_distribution(state, action):
            if pr >= MIN_EVIDENCE:
                total += pr * (entropy(successor.belief) + greedy_expected_value(successor, tied_fn))
    return total / len(tied)


def infotaxis_tied(state: BeliefState) -> List[Action]:
    return tied_actions(expected_entropies(state))


def random_belief_state(params: EnvParams, rng: np.random.Generator, horizon: int = DEFAULT_HORIZON,
                        concentration: float = 0.3) -> BeliefState:
    """Dirichlet belief at a random position and step"""
    probs = rng.dirichlet(np.full(params.n_hypotheses, concentration)).reshape(params.shape)
    pos = (int(rng.integers(params.nx)), int(rng.integers(params.ny)))
    return BeliefState(pos, Belief(probs, params), int(rng.integers(horizon)), horizon)


def depth_one_agreement(params: EnvParams, n_states: int, rng: np.random.Generator,
                        horizon: int = DEFAULT_HORIZON) -> int:
    """States on which the depth-1 oracle and infotaxis give the same tied set"""
    agree = 0
    for _ in range(n_states):
        state = random_belief_state(params, rng, horizon)
        one_step = replace(state, step=state.horizon - 1)
        oracle = exhaustive_oracle(params, horizon, one_step)
        agree += oracle.best_actions == infotaxis_tied(state)
    return agree
