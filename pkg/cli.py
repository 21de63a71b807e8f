# cli.py
"""
Command-line entry point: simulate, train, eval, sweep, oracle
"""
import argparse
import json
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

import config as run_config
from belief import belief_frame, uniform_prior
from data_storage import ResultStorage, write_json, write_table
from environment import BeliefState, Scenario, episode_rng, start_position
from errors import ConfigurationError, PlumeSteError
from evaluation import (RandomPolicy, checkpoint_policy_factory, compare_policies, depth_one_agreement,
                        draw_scenario, evaluate, exhaustive_oracle, greedy_expected_value, infotaxis_tied,
                        metrics_frame, run_episode, sensitivity_sweep, trajectory_frame)
from infotaxis import InfotaxisPolicy
from logger import perf_logger
from plume_model import EnvParams, SourceTerm, hit_field_frame
from training import Trainer, bellman_tied_actions, policy_from_checkpoint
from value_net import save_checkpoint

logger = perf_logger.get_logger('cli', 'cli')

FIELD_STREAM = 0xF1E1D


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit code 1)"""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


@dataclass
class RunContext:
    config: Dict[str, Any]
    config_hash: str
    seed: int
    output_dir: Path
    threads: int
    storage: Optional[ResultStorage] = None

    def emit(self, df: pd.DataFrame, name: str, command: str, policy: str = None) -> Path:
        path = write_table(df, self.output_dir / name, self.config_hash, self.seed)
        if self.storage is not None:
            self.storage.save_run(command, df, self.config_hash, self.seed, policy)
        return path

    @property
    def params(self) -> EnvParams:
        return run_config.env_params(self.config)

    @property
    def horizon(self) -> int:
        return run_config.train_config(self.config).horizon


def parse_truth(text: str) -> List[float]:
    try:
        x, y, phi = (part.strip() for part in text.split(','))
        return [int(x), int(y), float(phi)]
    except ValueError:
        raise ConfigurationError(f"--truth must look like x,y,phi, got {text!r}") from None


def parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration')
    common.add_argument('--seed', type=int, help='Master seed')
    common.add_argument('--threads', type=int, help=f'Worker threads (fallback: ${run_config.THREADS_ENV})')
    common.add_argument('--output-dir', help='Directory for all outputs')
    common.add_argument('--db', help='Also record result tables in this SQLite database')

    parser = ArgumentParser(prog='plume-ste', description='Source term estimation with infotaxis and DRL',
                            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', parents=[common], help='Run episodes and write trajectories')
    simulate.add_argument('--policy', choices=run_config.POLICIES)
    simulate.add_argument('--checkpoint', help='Value-network checkpoint for --policy checkpoint')
    simulate.add_argument('--truth', type=parse_truth, help='Source term x,y,phi (random when omitted)')
    simulate.add_argument('--episodes', type=int, help='Number of episodes')
    simulate.add_argument('--emit-field', action='store_true', default=None, help='Write the hit field x,y,mu,h')
    simulate.add_argument('--field-mean-only', action='store_true', default=None, help='Field as x,y,mu only')
    simulate.add_argument('--emit-belief', action='store_true', default=None, help='Write the final posterior')

    train = sub.add_parser('train', parents=[common], help='Train a value network')
    train.add_argument('--arch', choices=('fc', 'cnn'))
    train.add_argument('--episodes', type=int)
    train.add_argument('--resume', metavar='DIR', help='Continue from the training state saved in DIR')
    train.add_argument('--stop-after', type=int, metavar='N', help='Stop after N more episodes')

    ev = sub.add_parser('eval', parents=[common], help='Aggregate metrics over many episodes')
    ev.add_argument('--policy', choices=run_config.POLICIES)
    ev.add_argument('--checkpoint')
    ev.add_argument('--episodes', type=int)
    ev.add_argument('--per-flux', action='store_true', default=None,
                    help='Stratify: an equal number of episodes per flux')
    ev.add_argument('--compare', choices=run_config.POLICIES, help='Second policy for a per-location comparison')

    sweep = sub.add_parser('sweep', parents=[common], help='Relative DRPS over a (V, D) grid')
    sweep.add_argument('--V', dest='V_values', type=parse_floats, help='Wind speeds, comma-separated')
    sweep.add_argument('--D', dest='D_values', type=parse_floats, help='Diffusivities, comma-separated')
    sweep.add_argument('--episodes', type=int)
    sweep.add_argument('--train', action='store_true', default=None, help='Train missing checkpoints')
    sweep.add_argument('--checkpoint-dir')

    oracle = sub.add_parser('oracle', parents=[common], help='Exhaustive expectimin on a small instance')
    oracle.add_argument('--horizon', type=int)
    oracle.add_argument('--max-leaves', type=int)
    oracle.add_argument('--checkpoint', help='Also compare the greedy policy of this network')
    oracle.add_argument('--states', type=int, help='Random states for the depth-1 agreement check')
    return parser


def overrides_from_args(args) -> Dict[str, Any]:
    overrides = {'seed': args.seed, 'output_dir': args.output_dir}
    command = args.command
    if command == 'simulate':
        overrides.update({
            'evaluation.policy': args.policy,
            'evaluation.checkpoint': args.checkpoint,
            'simulate.episodes': args.episodes,
            'simulate.truth': args.truth,
            'simulate.emit_field': args.emit_field,
            'simulate.field_mean_only': args.field_mean_only,
            'simulate.emit_belief': args.emit_belief,
        })
    elif command == 'train':
        overrides.update({'training.architecture': args.arch, 'training.episodes': args.episodes})
    elif command == 'eval':
        overrides.update({
            'evaluation.policy': args.policy,
            'evaluation.checkpoint': args.checkpoint,
            'evaluation.n_episodes': args.episodes,
            'evaluation.stratify': args.per_flux,
            'evaluation.compare': args.compare,
        })
    elif command == 'sweep':
        overrides.update({
            'sweep.V_values': args.V_values,
            'sweep.D_values': args.D_values,
            'sweep.n_episodes': args.episodes,
            'sweep.train': args.train,
            'sweep.checkpoint_dir': args.checkpoint_dir,
        })
    elif command == 'oracle':
        overrides.update({
            'oracle.horizon': args.horizon,
            'oracle.max_leaves': args.max_leaves,
            'oracle.agreement_states': args.states,
            'evaluation.checkpoint': args.checkpoint,
        })
    return overrides


def make_context(args) -> RunContext:
    config = run_config.apply_overrides(run_config.load_run_config(args.config), overrides_from_args(args))
    config['threads'] = run_config.resolve_threads(args.threads, config)
    run_config.validate(config)
    perf_logger.initialize_with_config(config)

    output_dir = Path(config['output_dir'])
    run_config.save_resolved_config(config, output_dir)
    storage = ResultStorage(args.db) if args.db else None
    ctx = RunContext(config, run_config.config_hash(config), config['seed'], output_dir, config['threads'], storage)
    logger.info(f"🚀 {args.command}: config_hash={ctx.config_hash} seed={ctx.seed} threads={ctx.threads}")
    return ctx


def make_policy(name: str, ctx: RunContext):
    if name == 'infotaxis':
        return InfotaxisPolicy()
    if name == 'random':
        return RandomPolicy()
    path = ctx.config['evaluation']['checkpoint']
    if not path:
        raise ConfigurationError("policy 'checkpoint' needs --checkpoint")
    return policy_from_checkpoint(path, ctx.params)


# --- commands -----------------------------------------------------------------------

def cmd_simulate(ctx: RunContext) -> int:
    params, sim = ctx.params, ctx.config['simulate']
    name = ctx.config['evaluation']['policy']
    policy = make_policy(name, ctx)
    if sim['episodes'] < 1:
        raise ConfigurationError("simulate.episodes must be >= 1")

    for i in range(sim['episodes']):
        rng = episode_rng(ctx.seed, i)
        if sim['truth'] is not None:
            scenario = Scenario(SourceTerm(*sim['truth']), params, seed=i)
        else:
            scenario = draw_scenario(params, rng, i)
        record = run_episode(policy, scenario, rng, horizon=ctx.horizon)
        ctx.emit(trajectory_frame(record), f"trajectory_{name}_{i:04d}.csv", 'simulate', name)

        if sim['emit_field']:
            field_rng = None if sim['field_mean_only'] else episode_rng(ctx.seed ^ FIELD_STREAM, i)
            ctx.emit(hit_field_frame(scenario.truth, params, field_rng), f"field_{i:04d}.csv", 'simulate')
        if sim['emit_belief']:
            ctx.emit(belief_frame(record.final_belief), f"belief_{name}_{i:04d}.csv", 'simulate', name)

        truth = scenario.truth
        logger.info(f"📊 Episode {i}: truth=({truth.xs},{truth.ys},{truth.phi:g}) success={record.success} "
                    f"cumH={record.cumulative_entropy:.3f}")
    return 0


def cmd_train(ctx: RunContext, resume: Optional[str] = None, stop_after: Optional[int] = None) -> int:
    params = ctx.params
    tc = run_config.train_config(ctx.config)
    trainer = Trainer.from_state(resume, params, tc) if resume else Trainer(tc, params)
    arch = tc.architecture
    out = ctx.output_dir

    def on_episode_end(tr: Trainer):
        if tc.checkpoint_every and tr.episode % tc.checkpoint_every == 0 and tr.episode < tc.episodes:
            save_checkpoint(tr.weights, out / f"checkpoint_{arch}_ep{tr.episode:06d}.json", params)
            tr.save_state(out)

    weights, history = trainer.train(stop_after=stop_after, on_episode_end=on_episode_end)
    weights.training_meta.update({'config_hash': ctx.config_hash, 'time_channel': tc.time_channel,
                                  'architecture': arch})
    save_checkpoint(weights, out / f"checkpoint_{arch}.json", params)
    trainer.save_state(out)
    ctx.emit(history, 'history.csv', 'train', arch)
    return 0


def cmd_eval(ctx: RunContext) -> int:
    params, ev = ctx.params, ctx.config['evaluation']
    names = [ev['policy']] + ([ev['compare']] if ev['compare'] else [])
    if len(set(names)) != len(names):
        raise ConfigurationError("--compare must name a different policy")

    results = {}
    for name in names:
        results[name] = evaluate(make_policy(name, ctx), params, int(ev['n_episodes']), ctx.seed, ctx.horizon,
                                 ctx.threads, bool(ev['stratify']), int(ev['per_flux_episodes']))

    V, D = params.wind_speed, params.diffusivity
    metrics = pd.concat([metrics_frame(r, name, V, D) for name, r in results.items()], ignore_index=True)
    ctx.emit(metrics, 'metrics.csv', 'eval', '+'.join(names))
    ctx.emit(pd.concat([r.per_flux.assign(policy=name) for name, r in results.items()], ignore_index=True)
             [['policy', 'phi', 'episodes', 'success_rate']], 'per_flux.csv', 'eval')
    ctx.emit(pd.concat([r.per_location.assign(policy=name) for name, r in results.items()], ignore_index=True)
             [['policy', 'xs', 'ys', 'episodes', 'success_rate']], 'per_location.csv', 'eval')
    ctx.emit(pd.concat([r.episodes.assign(policy=name) for name, r in results.items()], ignore_index=True),
             'episodes.csv', 'eval')

    summary = {'config_hash': ctx.config_hash, 'seed': ctx.seed, 'V': V, 'D': D,
               'policies': {name: r.summary for name, r in results.items()}}
    if len(names) == 2:
        table, shares = compare_policies(results[names[0]].records, results[names[1]].records, tuple(names))
        ctx.emit(table, 'comparison.csv', 'eval')
        summary['comparison'] = shares
        logger.info(f"📊 Location wins: {shares}")
    write_json(summary, ctx.output_dir / 'summary.json')
    return 0


def cmd_sweep(ctx: RunContext) -> int:
    sw = ctx.config['sweep']
    factories = {}
    for name in sw['policies']:
        if name == 'infotaxis':
            factories[name] = lambda _params: InfotaxisPolicy()
        elif name == 'random':
            factories[name] = lambda _params: RandomPolicy()
        else:
            factories[name] = checkpoint_policy_factory(sw['checkpoint_dir'], run_config.train_config(ctx.config),
                                                        bool(sw['train']))
    frame = sensitivity_sweep(factories, ctx.params, sw['V_values'], sw['D_values'], int(sw['n_episodes']),
                              ctx.seed, ctx.horizon, ctx.threads)
    ctx.emit(frame, 'sweep.csv', 'sweep')
    return 0


def cmd_oracle(ctx: RunContext) -> int:
    params, oc = ctx.params, ctx.config['oracle']
    horizon = int(oc['horizon'])
    result = exhaustive_oracle(params, horizon, max_leaves=int(oc['max_leaves']))
    start = BeliefState(start_position(params), uniform_prior(params), 0, horizon)
    infotaxis_value = greedy_expected_value(start, infotaxis_tied)
    n_states = int(oc['agreement_states'])
    agree = depth_one_agreement(params, n_states, np.random.default_rng(ctx.seed), horizon)

    report = {
        'config_hash': ctx.config_hash,
        'seed': ctx.seed,
        'horizon': horizon,
        'leaves': result.leaves,
        'optimal_value': result.value,
        'optimal_first_actions': [a.label for a in result.best_actions],
        'action_values': {a.label: v for a, v in result.action_values.items()},
        'infotaxis_value': infotaxis_value,
        'infotaxis_first_actions': [a.label for a in infotaxis_tied(start)],
        'depth_one_agreement': {'states': n_states, 'agree': agree},
    }
    checkpoint = ctx.config['evaluation']['checkpoint']
    if checkpoint:
        policy = policy_from_checkpoint(checkpoint, params)
        drl_value = greedy_expected_value(
            start, lambda s: bellman_tied_actions(s, policy.weights, policy.time_channel))
        report['drl_value'] = drl_value
        report['drl_gap'] = (drl_value - result.value) / result.value if result.value > 0 else 0.0

    print(json.dumps(report, indent=2, sort_keys=True))
    write_json(report, ctx.output_dir / 'oracle_report.json')
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        ctx = make_context(args)
        if args.command == 'simulate':
            return cmd_simulate(ctx)
        if args.command == 'train':
            return cmd_train(ctx, args.resume, args.stop_after)
        if args.command == 'eval':
            return cmd_eval(ctx)
        if args.command == 'sweep':
            return cmd_sweep(ctx)
        return cmd_oracle(ctx)
    except PlumeSteError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        logger.debug(traceback.format_exc())
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
