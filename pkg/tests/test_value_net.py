"""Value network: forward pass, gradients, optimizer steps and checkpoints"""
import json

import numpy as np
import pytest

from errors import CheckpointError, ConfigurationError, ContractViolation, TrainingError
from plume_model import EnvParams
from value_net import (Architecture, Layer, NetworkWeights, SGDOptimizer, apply_gradient, avg_pool,
                       batch_gradient, forward, gradient, init_weights, load_checkpoint, predict,
                       save_checkpoint, sgd_step, zero_weights)

SMALL_FC = Architecture('fc', (3, 3, 2), hidden_units=4, hidden_layers=2)
SMALL_CNN = Architecture('cnn', (5, 5, 2), filters=3, conv_layers=2, pool_after=(1,))


def randomized(architecture, seed):
    """Random weights everywhere, output layer included"""
    rng = np.random.default_rng(seed)
    weights = init_weights(architecture, rng)
    out = weights.layers[-1]
    out.weights[...] = rng.uniform(-0.5, 0.5, size=out.weights.shape)
    out.bias[...] = rng.uniform(-0.5, 0.5, size=out.bias.shape)
    return weights


def tiny_relu_net(w1=2.0, b1=-1.0, w2=3.0, b2=0.5):
    """One input, one hidden ReLU unit, linear output"""
    arch = Architecture('fc', (1, 1, 1), hidden_units=1, hidden_layers=1)
    return NetworkWeights(arch, [Layer('dense', np.array([[w1]]), np.array([b1])),
                                 Layer('dense', np.array([[w2]]), np.array([b2]))])


def finite_difference(weights, x, target, h=1e-6):
    def loss():
        return 0.5 * (forward(weights, x) - target) ** 2

    numeric = []
    for array in weights.arrays():
        flat = array.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss()
            flat[i] = saved - h
            down = loss()
            flat[i] = saved
            grad[i] = (up - down) / (2 * h)
        numeric.append(grad.reshape(array.shape))
    return numeric


class TestArchitecture:

    def test_cnn_geometry_for_default_grid(self, default_params):
        arch = Architecture.for_params('cnn', default_params)
        assert arch.input_shape == (21, 21, 5)
        assert arch.conv_output_size() == (5, 5)
        shapes = arch.layer_shapes()
        assert [kind for kind, _, _ in shapes] == ['conv'] * 4 + ['dense']
        assert shapes[-1][1] == (32 * 25, 1)

    def test_fc_geometry(self, default_params):
        shapes = Architecture.for_params('fc', default_params).layer_shapes()
        assert shapes[0][1] == (21 * 21 * 5, 32)
        assert shapes[-1][1] == (32, 1)

    def test_time_channel(self, default_params):
        assert Architecture.for_params('fc', default_params, extra_channels=1).input_shape == (21, 21, 6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            Architecture('rnn', (3, 3, 1))

    def test_too_small_for_pooling(self):
        with pytest.raises(ConfigurationError):
            Architecture('cnn', (3, 3, 1))

    def test_dict_round_trip(self):
        assert Architecture.from_dict(SMALL_CNN.to_dict()) == SMALL_CNN


class TestForward:

    def test_zero_init_output_is_zero(self, default_params, rng):
        for kind in ('fc', 'cnn'):
            weights = init_weights(Architecture.for_params(kind, default_params), rng)
            inputs = rng.random((4, 21, 21, 5))
            np.testing.assert_array_equal(predict(weights, inputs), 0.0)

    def test_zero_weights(self, rng):
        assert forward(zero_weights(SMALL_FC), rng.random((3, 3, 2))) == 0.0

    def test_hand_computed(self):
        net = tiny_relu_net()
        assert forward(net, np.array([[[2.0]]])) == pytest.approx(3.0 * 3.0 + 0.5)
        assert forward(net, np.array([[[0.25]]])) == pytest.approx(0.5)

    def test_output_layer_scaling(self, rng):
        weights = randomized(SMALL_CNN, 1)
        x = rng.random((5, 5, 2))
        scaled = weights.copy()
        scaled.layers[-1].weights *= 3.0
        scaled.layers[-1].bias *= 3.0
        assert forward(scaled, x) == pytest.approx(3.0 * forward(weights, x), rel=1e-12)

    def test_chunked_prediction_matches(self, rng):
        weights = randomized(SMALL_CNN, 2)
        inputs = rng.random((7, 5, 5, 2))
        np.testing.assert_allclose(predict(weights, inputs, chunk=2), predict(weights, inputs), rtol=1e-13)
        assert predict(weights, inputs[:1])[0] == pytest.approx(forward(weights, inputs[0]), rel=1e-13)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ContractViolation):
            predict(randomized(SMALL_FC, 0), rng.random((2, 4, 4, 2)))

    def test_pooling_preserves_constant(self):
        pooled = avg_pool(np.full((1, 2, 5, 5), 2.5))
        assert pooled.shape == (1, 2, 2, 2)
        np.testing.assert_allclose(pooled, 2.5)


class TestGradient:

    @pytest.mark.parametrize("architecture", [SMALL_FC, SMALL_CNN], ids=['fc', 'cnn'])
    def test_matches_finite_difference(self, architecture):
        rng = np.random.default_rng(40)
        weights = randomized(architecture, 41)
        x = rng.random(architecture.input_shape)
        target = 0.7
        analytic = gradient(weights, x, target).arrays()
        numeric = finite_difference(weights, x, target)
        for a, n in zip(analytic, numeric):
            scale = np.maximum(np.abs(a) + np.abs(n), 1e-3)
            assert np.all(np.abs(a - n) / scale <= 1e-5)

    def test_zero_residual_gives_zero_gradient(self, rng):
        weights = randomized(SMALL_FC, 3)
        x = rng.random((3, 3, 2))
        grad = gradient(weights, x, forward(weights, x))
        assert all(np.all(a == 0.0) for a in grad.arrays())

    def test_dead_relu_blocks_gradient(self):
        net = tiny_relu_net()
        grad = gradient(net, np.array([[[0.25]]]), 10.0)
        assert grad.layers[0].weights[0, 0] == 0.0
        assert grad.layers[0].bias[0] == 0.0
        assert grad.layers[1].bias[0] != 0.0

    def test_batch_gradient_is_mean(self, rng):
        weights = randomized(SMALL_FC, 4)
        inputs = rng.random((3, 3, 3, 2))
        targets = np.array([0.1, -0.2, 0.4])
        batch, loss = batch_gradient(weights, inputs, targets)
        singles = [gradient(weights, inputs[i], targets[i]).arrays() for i in range(3)]
        for j, array in enumerate(batch.arrays()):
            np.testing.assert_allclose(array, sum(s[j] for s in singles) / 3, atol=1e-14)
        expected = np.mean((predict(weights, inputs) - targets) ** 2)
        assert loss == pytest.approx(expected, rel=1e-12)


class TestOptimizer:

    def test_zero_learning_rate(self, rng):
        weights = randomized(SMALL_FC, 5)
        updated = sgd_step(weights, [(rng.random((3, 3, 2)), 1.0)], 0.0)
        for a, b in zip(updated.arrays(), weights.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_linear_least_squares_step(self):
        arch = Architecture('fc', (1, 1, 1), hidden_layers=0)
        weights = NetworkWeights(arch, [Layer('dense', np.array([[0.5]]), np.array([0.1]))])
        updated = sgd_step(weights, [(np.array([[[2.0]]]), 3.0)], 0.1)
        # residual 1.1 - 3 = -1.9: dw = -1.9 * 2, db = -1.9
        assert updated.layers[0].weights[0, 0] == pytest.approx(0.5 + 0.1 * 3.8)
        assert updated.layers[0].bias[0] == pytest.approx(0.1 + 0.1 * 1.9)

    def test_loss_non_increasing_on_frozen_batch(self):
        rng = np.random.default_rng(6)
        weights = randomized(SMALL_FC, 6)
        inputs = rng.random((16, 3, 3, 2))
        targets = rng.uniform(-1, 1, 16)
        losses = []
        for _ in range(100):
            grad, loss = batch_gradient(weights, inputs, targets)
            losses.append(loss)
            weights = apply_gradient(weights, grad, 1e-3)
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_empty_batch(self):
        with pytest.raises(ContractViolation):
            sgd_step(zero_weights(SMALL_FC), [], 0.1)

    def test_non_finite_gradient(self):
        weights = zero_weights(SMALL_FC)
        grad = weights.copy()
        grad.layers[0].weights[0, 0] = np.nan
        with pytest.raises(TrainingError):
            apply_gradient(weights, grad, 0.1)
        with pytest.raises(TrainingError):
            SGDOptimizer(0.1, momentum=0.9).step(weights, grad)

    def test_momentum(self):
        weights = zero_weights(SMALL_FC)
        grad = weights.map(lambda a: np.ones_like(a))
        optimizer = SGDOptimizer(0.1, momentum=0.5)
        once = optimizer.step(weights, grad)
        twice = optimizer.step(once, grad)
        np.testing.assert_allclose(once.layers[0].weights, -0.1)
        np.testing.assert_allclose(twice.layers[0].weights, -0.1 - 0.1 * 1.5)

    def test_plain_sgd_matches_apply_gradient(self):
        weights = randomized(SMALL_FC, 7)
        grad = weights.map(lambda a: np.full_like(a, 0.3))
        a = SGDOptimizer(0.05).step(weights, grad)
        b = apply_gradient(weights, grad, 0.05)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)


class TestCheckpoint:

    @pytest.mark.parametrize("architecture", [SMALL_FC, SMALL_CNN], ids=['fc', 'cnn'])
    def test_round_trip_is_exact(self, tmp_path, rng, architecture):
        weights = randomized(architecture, 8)
        weights.training_meta['episodes'] = 12
        path = tmp_path / 'net.json'
        save_checkpoint(weights, path)
        loaded = load_checkpoint(path, expected_kind=architecture.kind)
        assert loaded.architecture == architecture
        assert loaded.training_meta == {'episodes': 12}
        for a, b in zip(loaded.arrays(), weights.arrays()):
            np.testing.assert_array_equal(a, b)
        inputs = rng.random((3,) + architecture.input_shape)
        np.testing.assert_array_equal(predict(loaded, inputs), predict(weights, inputs))

    def test_env_geometry_recorded(self, tmp_path):
        params = EnvParams(nx=3, ny=3, fluxes=(1.0, 2.0))
        path = tmp_path / 'net.json'
        save_checkpoint(zero_weights(SMALL_FC), path, params)
        data = json.loads(path.read_text())
        assert data['env_geometry'] == {'input_shape': [3, 3, 2], 'nx': 3, 'ny': 3, 'n_phi': 2}

    def test_truncated_file(self, tmp_path):
        path = tmp_path / 'net.json'
        save_checkpoint(randomized(SMALL_FC, 9), path)
        text = path.read_text()
        path.write_text(text[:len(text) // 2])
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path)
        assert info.value.offset is not None
        assert info.value.exit_code == 2

    def test_short_layer(self, tmp_path):
        path = tmp_path / 'net.json'
        save_checkpoint(randomized(SMALL_FC, 10), path)
        data = json.loads(path.read_text())
        data['layers'][1]['weights'] = data['layers'][1]['weights'][:-3]
        path.write_text(json.dumps(data))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path)
        assert info.value.layer == 1
        assert info.value.offset == 13

    @pytest.mark.parametrize("layers", [7, 'dense', {'0': {}}, [3, 4, 5]], ids=['int', 'str', 'dict', 'entries'])
    def test_malformed_layer_list(self, tmp_path, layers):
        path = tmp_path / 'net.json'
        save_checkpoint(zero_weights(SMALL_FC), path)
        data = json.loads(path.read_text())
        data['layers'] = layers
        path.write_text(json.dumps(data))
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path)
        assert info.value.exit_code == 2

    def test_not_an_object(self, tmp_path):
        path = tmp_path / 'net.json'
        path.write_text('[1, 2, 3]')
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        path = tmp_path / 'net.json'
        save_checkpoint(zero_weights(SMALL_CNN), path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_kind='fc')
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_input_shape=(21, 21, 5))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / 'absent.json')

    def test_refuses_non_finite(self, tmp_path):
        weights = zero_weights(SMALL_FC)
        weights.layers[0].bias[0] = np.inf
        with pytest.raises(CheckpointError):
            save_checkpoint(weights, tmp_path / 'net.json')
