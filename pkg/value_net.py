# value_net.py
"""
Value network v(s, w) on egocentric belief tensors: fully connected and
convolutional variants with hand-written reverse-mode gradients
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import CheckpointError, ConfigurationError, ContractViolation, TrainingError
from logger import perf_logger
from plume_model import EnvParams

logger = perf_logger.get_logger('value_net', 'training')

ARCHITECTURES = ('fc', 'cnn')
FORWARD_CHUNK = 256


@dataclass(frozen=True)
class Architecture:
    """Layer layout for one input geometry (width, height, channels)"""
    kind: str
    input_shape: Tuple[int, int, int]
    hidden_units: int = 32
    hidden_layers: int = 3
    filters: int = 32
    conv_layers: int = 4
    kernel_size: int = 3
    pool_after: Tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}, got {self.kind!r}")
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, 'pool_after', tuple(int(p) for p in self.pool_after))
        if self.kind == 'cnn':
            width, height = self.conv_output_size()
            if width < 1 or height < 1:
                raise ConfigurationError(
                    f"input {self.input_shape[:2]} too small for {len(self.pool_after)} pooling stages")

    @classmethod
    def for_params(cls, kind: str, params: EnvParams, extra_channels: int = 0) -> 'Architecture':
        return cls(kind=kind, input_shape=(2 * params.nx - 1, 2 * params.ny - 1, params.n_phi + extra_channels))

    def conv_output_size(self) -> Tuple[int, int]:
        width, height = self.input_shape[:2]
        for layer in range(1, self.conv_layers + 1):
            if layer in self.pool_after:
                width, height = width // 2, height // 2
        return width, height

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...], bool]]:
        """(kind, weight shape, pooled) for every layer, output layer last"""
        if self.kind == 'fc':
            shapes = []
            fan_in = int(np.prod(self.input_shape))
            for _ in range(self.hidden_layers):
                shapes.append(('dense', (fan_in, self.hidden_units), False))
                fan_in = self.hidden_units
            shapes.append(('dense', (fan_in, 1), False))
            return shapes

        shapes = []
        channels = self.input_shape[2]
        for layer in range(1, self.conv_layers + 1):
            shapes.append(('conv', (self.filters, channels, self.kernel_size, self.kernel_size),
                           layer in self.pool_after))
            channels = self.filters
        width, height = self.conv_output_size()
        shapes.append(('dense', (channels * width * height, 1), False))
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'input_shape': list(self.input_shape),
            'hidden_units': self.hidden_units,
            'hidden_layers': self.hidden_layers,
            'filters': self.filters,
            'conv_layers': self.conv_layers,
            'kernel_size': self.kernel_size,
            'pool_after': list(self.pool_after),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Architecture':
        return cls(**{**data, 'input_shape': tuple(data['input_shape']),
                      'pool_after': tuple(data.get('pool_after', (1, 2)))})


@dataclass
class Layer:
    kind: str                 # 'dense' or 'conv'
    weights: np.ndarray
    bias: np.ndarray
    pool: bool = False


@dataclass
class NetworkWeights:
    """Ordered layer parameters plus the architecture they belong to"""
    architecture: Architecture
    layers: List[Layer]
    training_meta: Dict[str, Any] = field(default_factory=dict)

    def copy(self) -> 'NetworkWeights':
        return NetworkWeights(
            self.architecture,
            [Layer(l.kind, l.weights.copy(), l.bias.copy(), l.pool) for l in self.layers],
            dict(self.training_meta))

    def map(self, fn, other: Optional['NetworkWeights'] = None) -> 'NetworkWeights':
        """New weights with fn applied per array (pairwise when other is given)"""
        layers = []
        for i, layer in enumerate(self.layers):
            if other is None:
                w, b = fn(layer.weights), fn(layer.bias)
            else:
                w, b = fn(layer.weights, other.layers[i].weights), fn(layer.bias, other.layers[i].bias)
            layers.append(Layer(layer.kind, w, b, layer.pool))
        return NetworkWeights(self.architecture, layers, dict(self.training_meta))

    def arrays(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


def init_weights(architecture: Architecture, rng: np.random.Generator) -> NetworkWeights:
    """Hidden layers uniform in +-1/sqrt(fan_in); output layer exactly zero"""
    shapes = architecture.layer_shapes()
    layers = []
    for i, (kind, shape, pool) in enumerate(shapes):
        n_out = shape[0] if kind == 'conv' else shape[1]
        if i == len(shapes) - 1:
            layers.append(Layer(kind, np.zeros(shape), np.zeros(n_out), pool))
            continue
        fan_in = int(np.prod(shape[1:])) if kind == 'conv' else shape[0]
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(Layer(kind, rng.uniform(-bound, bound, size=shape),
                            rng.uniform(-bound, bound, size=n_out), pool))
    return NetworkWeights(architecture, layers)


def zero_weights(architecture: Architecture) -> NetworkWeights:
    layers = []
    for kind, shape, pool in architecture.layer_shapes():
        n_out = shape[0] if kind == 'conv' else shape[1]
        layers.append(Layer(kind, np.zeros(shape), np.zeros(n_out), pool))
    return NetworkWeights(architecture, layers)


# --- layer primitives -------------------------------------------------------

def _conv_windows(a: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    padded = np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(padded, (k, k), axis=(2, 3))     # (B, C, W, H, k, k)


def _conv_forward(a: np.ndarray, kernel: np.ndarray, bias: np.ndarray):
    windows = _conv_windows(a, kernel.shape[-1])
    z = np.einsum('bcwhij,fcij->bfwh', windows, kernel, optimize=True) + bias[None, :, None, None]
    return z, windows


def _conv_backward(dz: np.ndarray, windows: np.ndarray, kernel: np.ndarray, input_shape):
    k = kernel.shape[-1]
    p = k // 2
    d_kernel = np.einsum('bcwhij,bfwh->fcij', windows, dz, optimize=True)
    d_bias = dz.sum(axis=(0, 2, 3))
    batch, channels, width, height = input_shape
    d_padded = np.zeros((batch, channels, width + 2 * p, height + 2 * p))
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i:i + width, j:j + height] += np.einsum(
                'bfwh,fc->bcwh', dz, kernel[:, :, i, j], optimize=True)
    return d_padded[:, :, p:p + width, p:p + height], d_kernel, d_bias


def avg_pool(a: np.ndarray) -> np.ndarray:
    """2x2 stride-2 average pooling on (B, C, W, H); odd trailing rows are dropped"""
    b, c, w, h = a.shape
    wo, ho = w // 2, h // 2
    return a[:, :, :2 * wo, :2 * ho].reshape(b, c, wo, 2, ho, 2).mean(axis=(3, 5))


def _avg_pool_backward(d_out: np.ndarray, input_shape) -> np.ndarray:
    d_in = np.zeros(input_shape)
    wo, ho = d_out.shape[2], d_out.shape[3]
    d_in[:, :, :2 * wo, :2 * ho] = np.repeat(np.repeat(d_out, 2, axis=2), 2, axis=3) / 4.0
    return d_in


# --- forward / backward -----------------------------------------------------

def _check_inputs(weights: NetworkWeights, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    expected = weights.architecture.input_shape
    if inputs.shape[1:] != expected:
        raise ContractViolation(f"input shape {inputs.shape[1:]} does not match architecture {expected}")
    return inputs


def _forward_cache(weights: NetworkWeights, inputs: np.ndarray):
    """Batched forward pass keeping what the backward pass needs"""
    cache = []
    if weights.architecture.kind == 'fc':
        a = inputs.reshape(inputs.shape[0], -1)
    else:
        a = np.ascontiguousarray(inputs.transpose(0, 3, 1, 2))  # channels first

    last = len(weights.layers) - 1
    for i, layer in enumerate(weights.layers):
        if layer.kind == 'conv':
            z, windows = _conv_forward(a, layer.weights, layer.bias)
            act = np.maximum(z, 0.0)
            out = avg_pool(act) if layer.pool else act
            cache.append({'input_shape': a.shape, 'windows': windows, 'z': z, 'act_shape': act.shape})
            a = out
        else:
            flat_shape = a.shape
            a_flat = a.reshape(a.shape[0], -1)
            z = a_flat @ layer.weights + layer.bias
            cache.append({'input': a_flat, 'input_shape': flat_shape, 'z': z})
            a = z if i == last else np.maximum(z, 0.0)
    return a[:, 0], cache


def predict(weights: NetworkWeights, inputs: np.ndarray, chunk: int = FORWARD_CHUNK) -> np.ndarray:
    """v for a batch of egocentric tensors of shape (B, W, H, C)"""
    inputs = _check_inputs(weights, inputs)
    if inputs.shape[0] == 0:
        return np.zeros(0)
    parts = [_forward_cache(weights, inputs[i:i + chunk])[0] for i in range(0, inputs.shape[0], chunk)]
    return np.concatenate(parts)


def forward(weights: NetworkWeights, tensor: np.ndarray) -> float:
    """v(s, w) for one egocentric tensor"""
    return float(predict(weights, np.asarray(tensor)[None])[0])


def batch_gradient(weights: NetworkWeights, inputs: np.ndarray, targets: np.ndarray) -> Tuple[NetworkWeights, float]:
    """
    Mean over the batch of grad 0.5*(v - target)^2, and the mean squared residual.
    """
    inputs = _check_inputs(weights, inputs)
    targets = np.asarray(targets, dtype=np.float64)
    values, cache = _forward_cache(weights, inputs)
    residual = values - targets
    batch = inputs.shape[0]

    grads: List[Layer] = [None] * len(weights.layers)
    delta = (residual / batch)[:, None]            # d loss / d output, (B, 1)
    last = len(weights.layers) - 1
    for i in range(last, -1, -1):
        layer, c = weights.layers[i], cache[i]
        if layer.kind == 'dense':
            dz = delta if i == last else delta * (c['z'] > 0)
            grads[i] = Layer('dense', c['input'].T @ dz, dz.sum(axis=0), layer.pool)
            delta = (dz @ layer.weights.T).reshape(c['input_shape'])
        else:
            d_act = _avg_pool_backward(delta, c['act_shape']) if layer.pool else delta
            dz = d_act * (c['z'] > 0)
            d_in, d_kernel, d_bias = _conv_backward(dz, c['windows'], layer.weights, c['input_shape'])
            grads[i] = Layer('conv', d_kernel, d_bias, layer.pool)
            delta = d_in
    return NetworkWeights(weights.architecture, grads), float(np.mean(residual ** 2))


def gradient(weights: NetworkWeights, tensor: np.ndarray, target: float) -> NetworkWeights:
    """grad of 0.5*(v(s,w) - target)^2 for one input"""
    grad, _ = batch_gradient(weights, np.asarray(tensor)[None], np.array([target]))
    return grad


def sgd_step(weights: NetworkWeights, batch: Sequence[Tuple[np.ndarray, float]],
             learning_rate: float) -> NetworkWeights:
    """w <- w - lr * mean gradient over (input, target) pairs"""
    if len(batch) == 0:
        raise ContractViolation("sgd_step needs a non-empty batch")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    targets = np.array([t for _, t in batch], dtype=np.float64)
    grad, _ = batch_gradient(weights, inputs, targets)
    return apply_gradient(weights, grad, learning_rate)


def apply_gradient(weights: NetworkWeights, grad: NetworkWeights, learning_rate: float) -> NetworkWeights:
    if not grad.all_finite():
        raise TrainingError("non-finite gradient")
    return weights.map(lambda w, g: w - learning_rate * g, grad)


class SGDOptimizer:
    """Plain SGD, with optional heavy-ball momentum"""

    def __init__(self, learning_rate: float = 1e-3, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Optional[NetworkWeights] = None

    def step(self, weights: NetworkWeights, grad: NetworkWeights) -> NetworkWeights:
        if not grad.all_finite():
            raise TrainingError("non-finite gradient")
        if self.momentum == 0.0:
            return apply_gradient(weights, grad, self.learning_rate)
        if self.velocity is None:
            self.velocity = grad.map(np.zeros_like)
        self.velocity = self.velocity.map(lambda v, g: self.momentum * v + g, grad)
        return apply_gradient(weights, self.velocity, self.learning_rate)


# --- checkpoints --------------------------------------------------------------

def weights_to_dict(weights: NetworkWeights, params: Optional[EnvParams] = None) -> Dict[str, Any]:
    geometry = {'input_shape': list(weights.architecture.input_shape)}
    if params is not None:
        geometry.update({'nx': params.nx, 'ny': params.ny, 'n_phi': params.n_phi})
    return {
        'architecture': weights.architecture.to_dict(),
        'env_geometry': geometry,
        'layers': [
            {
                'kind': layer.kind,
                'shape': list(layer.weights.shape),
                'pool': layer.pool,
                'weights': layer.weights.ravel().tolist(),
                'bias': layer.bias.tolist(),
            }
            for layer in weights.layers
        ],
        'training_meta': weights.training_meta,
    }


def save_checkpoint(weights: NetworkWeights, path, params: Optional[EnvParams] = None):
    """Write weights as JSON; float repr round-trips 64-bit values exactly"""
    if not weights.all_finite():
        raise CheckpointError("refusing to save non-finite weights")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(weights_to_dict(weights, params), allow_nan=False)
    path.write_text(text, encoding='utf-8')
    logger.info(f"💾 Checkpoint saved: {path} ({weights.n_parameters()} parameters)")


def weights_from_dict(data: Dict[str, Any]) -> NetworkWeights:
    if not isinstance(data, dict):
        raise CheckpointError(f"checkpoint must be a JSON object, found {type(data).__name__}")
    for key in ('architecture', 'env_geometry', 'layers'):
        if key not in data:
            raise CheckpointError(f"missing top-level field {key!r}")
    try:
        architecture = Architecture.from_dict(data['architecture'])
    except (TypeError, KeyError, AttributeError, ConfigurationError) as e:
        raise CheckpointError(f"invalid architecture block: {e}") from e

    expected = architecture.layer_shapes()
    if not isinstance(data['layers'], list):
        raise CheckpointError(f"'layers' must be a list, found {type(data['layers']).__name__}")
    if len(data['layers']) != len(expected):
        raise CheckpointError(f"expected {len(expected)} layers, found {len(data['layers'])}")

    layers = []
    for i, (entry, (kind, shape, pool)) in enumerate(zip(data['layers'], expected)):
        if not isinstance(entry, dict):
            raise CheckpointError(f"layer entry must be an object, found {type(entry).__name__}", layer=i)
        try:
            stored_shape = tuple(entry['shape'])
            flat = np.asarray(entry['weights'], dtype=np.float64)
            bias = np.asarray(entry['bias'], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"unreadable layer entry: {e}", layer=i) from e
        if stored_shape != shape or entry.get('kind', kind) != kind:
            raise CheckpointError(f"shape {stored_shape} does not match architecture {shape}", layer=i)
        if flat.size != int(np.prod(shape)):
            raise CheckpointError(f"weights hold {flat.size} values, shape needs {int(np.prod(shape))}",
                                  layer=i, offset=flat.size)
        n_out = shape[0] if kind == 'conv' else shape[1]
        if bias.shape != (n_out,):
            raise CheckpointError(f"bias holds {bias.size} values, expected {n_out}", layer=i, offset=bias.size)
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise CheckpointError("non-finite weight", layer=i, offset=int(bad[0]))
        layers.append(Layer(kind, flat.reshape(shape), bias, bool(entry.get('pool', pool))))
    return NetworkWeights(architecture, layers, dict(data.get('training_meta') or {}))


def load_checkpoint(path, expected_kind: Optional[str] = None,
                    expected_input_shape: Optional[Tuple[int, int, int]] = None) -> NetworkWeights:
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e.msg}", offset=e.pos) from e
    if not isinstance(data, dict):
        raise CheckpointError(f"checkpoint {path} is not a JSON object")

    weights = weights_from_dict(data)
    if expected_kind is not None and weights.architecture.kind != expected_kind:
        raise CheckpointError(f"checkpoint architecture {weights.architecture.kind!r}, expected {expected_kind!r}")
    if expected_input_shape is not None and weights.architecture.input_shape != tuple(expected_input_shape):
        raise CheckpointError(
            f"checkpoint input shape {weights.architecture.input_shape}, expected {tuple(expected_input_shape)}")
    logger.debug(f"✅ Checkpoint loaded: {path}")
    return weights
