# config.py
"""
Run configuration: defaults, JSON loading, dotted-key overrides and hashing
"""
import copy
import hashlib
import json
import os
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from errors import ConfigurationError
from logger import perf_logger
from plume_model import EnvParams
from training import TrainConfig

logger = perf_logger.get_logger('config', 'cli')

THREADS_ENV = 'PLUME_STE_THREADS'
RESOLVED_CONFIG_FILE = 'resolved_config.json'
POLICIES = ('infotaxis', 'checkpoint', 'random')
NON_RESULT_KEYS = ('threads', 'logging', 'output_dir')


def default_config() -> Dict[str, Any]:
    env = asdict(EnvParams())
    env['fluxes'] = list(env['fluxes'])
    return {
        'environment': env,
        'training': dict(asdict(TrainConfig()), seed=None),     # None follows the run seed
        'evaluation': {
            'n_episodes': 5000,
            'policy': 'infotaxis',
            'checkpoint': None,
            'compare': None,
            'stratify': False,
            'per_flux_episodes': 1000,
        },
        'simulate': {
            'episodes': 1,
            'truth': None,              # [x, y, phi]; drawn per episode when None
            'emit_field': False,
            'field_mean_only': False,
            'emit_belief': False,
        },
        'sweep': {
            'V_values': [0.0, 2.0],
            'D_values': [1.0, 2.0],
            'n_episodes': 1000,
            'policies': ['infotaxis', 'checkpoint'],
            'train': False,
            'checkpoint_dir': 'checkpoints',
        },
        'oracle': {
            'horizon': 2,
            'max_leaves': 10 ** 6,
            'agreement_states': 100,
        },
        'logging': dict({f'{t}_level': 'INFO' for t in perf_logger.MODULE_TYPES},
                        file_logging=False, log_dir='logs'),
        'output_dir': 'output',
        'seed': 0,
        'threads': None,
    }


def _merge(base: Dict[str, Any], update: Mapping[str, Any], path: str = '') -> Dict[str, Any]:
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"config key {dotted!r} must be an object")
            _merge(base[key], value, dotted + '.')
        else:
            base[key] = value
    return base


def load_run_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Defaults deep-merged with the JSON document at path (if any)"""
    config = default_config()
    if path is None:
        return config
    try:
        with open(path, encoding='utf-8') as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(document, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    logger.debug(f"Loaded config {path}")
    return _merge(config, document)


def apply_overrides(config: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Copy of config with dotted keys set, e.g. {'training.architecture': 'fc'}; None values are skipped"""
    result = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        update: Dict[str, Any] = {}
        node = update
        parts = dotted.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _merge(result, update)
    return result


def _build(cls, block: Mapping[str, Any], name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**block)
    except TypeError as e:
        raise ConfigurationError(f"invalid {name} block: {e}") from None


def env_params(config: Mapping[str, Any]) -> EnvParams:
    return _build(EnvParams, config['environment'], 'environment')


def train_config(config: Mapping[str, Any]) -> TrainConfig:
    block = dict(config['training'])
    if block.get('seed') is None:
        block['seed'] = config['seed']
    return _build(TrainConfig, block, 'training')


def validate(config: Mapping[str, Any]):
    """Raises ConfigurationError for anything that cannot run"""
    env_params(config)
    train_config(config)
    if not isinstance(config['seed'], int):
        raise ConfigurationError(f"seed must be an integer, got {config['seed']!r}")
    evaluation = config['evaluation']
    if evaluation['policy'] not in POLICIES:
        raise ConfigurationError(f"policy must be one of {POLICIES}, got {evaluation['policy']!r}")
    if evaluation['compare'] is not None and evaluation['compare'] not in POLICIES:
        raise ConfigurationError(f"compare must be one of {POLICIES}, got {evaluation['compare']!r}")
    for key, minimum in (('evaluation.n_episodes', 1), ('evaluation.per_flux_episodes', 1),
                         ('simulate.episodes', 1), ('sweep.n_episodes', 1), ('oracle.horizon', 1),
                         ('oracle.max_leaves', 1), ('oracle.agreement_states', 0)):
        _check_int(config, key, minimum)

    truth = config['simulate']['truth']
    if truth is not None and (not isinstance(truth, (list, tuple)) or len(truth) != 3):
        raise ConfigurationError(f"simulate.truth must be [x, y, phi], got {truth!r}")

    sweep = config['sweep']
    for name in sweep['policies']:
        if name not in POLICIES:
            raise ConfigurationError(f"sweep policy {name!r} not one of {POLICIES}")
    for key in ('V_values', 'D_values'):
        if not isinstance(sweep[key], (list, tuple)) or not sweep[key]:
            raise ConfigurationError(f"sweep.{key} must be a non-empty list")


def _check_int(config: Mapping[str, Any], dotted: str, minimum: int):
    section, key = dotted.split('.')
    value = config[section][key]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigurationError(f"{dotted} must be an integer >= {minimum}, got {value!r}")


def config_hash(config: Mapping[str, Any]) -> str:
    """
    First 12 hex digits of the SHA-256 of the canonical JSON.
    Keys that cannot change results (threads, logging, output_dir) are left out.
    """
    relevant = {k: v for k, v in config.items() if k not in NON_RESULT_KEYS}
    canonical = json.dumps(relevant, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def resolve_threads(flag: Optional[int], config: Mapping[str, Any]) -> int:
    """--threads, else config threads, else PLUME_STE_THREADS, else 1"""
    for value, source in ((flag, '--threads'), (config.get('threads'), 'config'),
                          (os.environ.get(THREADS_ENV), THREADS_ENV)):
        if value is None or value == '':
            continue
        try:
            threads = int(value)
        except ValueError:
            raise ConfigurationError(f"{source} must be an integer, got {value!r}") from None
        if threads < 1:
            raise ConfigurationError(f"{source} must be >= 1, got {threads}")
        return threads
    return 1


def save_resolved_config(config: Mapping[str, Any], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_CONFIG_FILE
    path.write_text(json.dumps(config, sort_keys=True, indent=2) + '\n', encoding='utf-8')
    logger.debug(f"💾 Resolved config written to {path}")
    return path
