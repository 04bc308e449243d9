import numpy as np
import pytest

from spikegrad.data import Dataset
from spikegrad.errors import ContractError
from spikegrad.gradcheck import gradcheck
from spikegrad.network import BatchNorm, Dense, Flatten, Network, NetworkSpec, OutputAccumulator, Spiking
from spikegrad.neuron import NeuronConfig
from spikegrad.normalization import BatchNormState, batchnorm_currents, normalize_thresholds
from spikegrad.tensor import Tensor, no_grad, precision


def test_constant_channel_maps_to_shift():
    x = np.broadcast_to(np.array([0.5, -2.0, 7.0, 1.0])[None, None, :, None, None], (2, 3, 4, 2, 2))
    state = BatchNormState(4)
    out = batchnorm_currents(Tensor(x.copy()), state, channel_axis=2)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_zero_scale_gives_shift():
    state = BatchNormState(3)
    state.weight.data[:] = 0
    state.bias.data[:] = [1.0, -1.0, 0.25]
    x = np.random.default_rng(0).standard_normal((5, 3))
    out = batchnorm_currents(Tensor(x), state, channel_axis=1)
    np.testing.assert_array_equal(out.data, np.broadcast_to([1.0, -1.0, 0.25], (5, 3)))


def test_training_statistics_pool_time_batch_and_space():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        x = rng.standard_normal((2, 3, 4, 5, 5)) * 3 + 1
        state = BatchNormState(4)
        out = batchnorm_currents(Tensor(x), state, channel_axis=2).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 3, 4)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 1, 3, 4)), 1, rtol=1e-3)
    pooled = np.moveaxis(x, 2, 0).reshape(4, -1)
    np.testing.assert_allclose(state.running_mean, 0.1 * pooled.mean(axis=1), rtol=1e-10)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * pooled.var(axis=1, ddof=1), rtol=1e-10)


def test_eval_mode_is_deterministic_affine_map():
    state = BatchNormState(3)
    state.running_mean[:] = [0.5, -1.0, 2.0]
    state.running_var[:] = [4.0, 1.0, 0.25]
    state.training = False
    x = np.random.default_rng(2).standard_normal((6, 3)).astype(np.float32)
    a = batchnorm_currents(Tensor(x), state, 1).data
    b = batchnorm_currents(Tensor(x), state, 1).data
    np.testing.assert_array_equal(a, b)
    expected = (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
    np.testing.assert_allclose(a, expected, rtol=1e-5)


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        batchnorm_currents(Tensor(np.zeros((0, 3))), BatchNormState(3), 1)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(training):
    with precision(np.float64):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (2, 2, 3, 4, 4)))
        state = BatchNormState(3, training=training)
        state.weight.data[:] = rng.uniform(0.5, 1.5, 3)
        state.bias.data[:] = rng.uniform(-1, 1, 3)
        state.running_var[:] = rng.uniform(0.5, 2, 3)
        w = Tensor(rng.standard_normal(x.shape))
        err = gradcheck(lambda: (batchnorm_currents(x, state, 2) * w).sum(), [x, state.weight, state.bias])
    assert err < 1e-4


def _two_layer_net():
    neuron = NeuronConfig(reset_mode="soft")
    spec = NetworkSpec([Flatten(), Dense(3, 4), Spiking(neuron), Dense(4, 2), Spiking(neuron),
                        Dense(2, 2), OutputAccumulator()], (3, 1, 1))
    return Network(spec, seed=5)


def brute_force_thresholds(net, images, T):
    """Per-sample, per-step simulation of the two spiking layers with plain loops."""
    w1, w2 = net.params["1.weight"].data.astype(np.float64), net.params["3.weight"].data.astype(np.float64)
    x = images.reshape(len(images), -1).astype(np.float64)
    th1 = max((x @ w1).max(), 1e-3)
    peak2 = -np.inf
    for sample in x:
        u = np.zeros(4)
        current1 = sample @ w1
        for _ in range(T):
            u = u + current1
            s = (u > th1).astype(float)
            u = u - th1 * s
            peak2 = max(peak2, (s @ w2).max())
    return [th1, max(peak2, 1e-3)]


def test_normalize_thresholds_matches_brute_force():
    net = _two_layer_net()
    images = np.random.default_rng(6).random((10, 3, 1, 1)).astype(np.float32)
    data = Dataset(images, np.zeros(10, dtype=int), 2)
    thresholds = normalize_thresholds(net, data, timesteps=5, batch_size=3)
    expected = brute_force_thresholds(net, images, 5)
    np.testing.assert_allclose(thresholds, expected, rtol=1e-5)
    assert net.thresholds == thresholds


def test_identity_dense_threshold_is_max_input():
    spec = NetworkSpec([Flatten(), Dense(3, 3), Spiking(NeuronConfig()), Dense(3, 2), OutputAccumulator()],
                       (3, 1, 1))
    net = Network(spec)
    net.params["1.weight"].data[:] = np.eye(3)
    data = Dataset(np.array([0.2, 0.9, 0.4]).reshape(1, 3, 1, 1), [0], 2)
    assert normalize_thresholds(net, data, timesteps=1) == [pytest.approx(0.9)]


def test_zero_weights_hit_threshold_floor():
    net = _two_layer_net()
    for p in net.params.values():
        p.data[:] = 0
    data = Dataset(np.ones((4, 3, 1, 1)), np.zeros(4, dtype=int), 2)
    assert normalize_thresholds(net, data, 3) == [pytest.approx(1e-3)] * 2


def test_normalize_thresholds_errors():
    with pytest.raises(ContractError):
        normalize_thresholds(_two_layer_net(), Dataset(np.zeros((0, 3, 1, 1)), np.zeros(0, dtype=int), 2), 3)
    spec = NetworkSpec([Flatten(), Dense(3, 4), BatchNorm(4), Spiking(NeuronConfig()), Dense(4, 2),
                        OutputAccumulator()], (3, 1, 1))
    with pytest.raises(ContractError):
        normalize_thresholds(Network(spec), Dataset(np.ones((2, 3, 1, 1)), [0, 1], 2), 3)


def test_network_batchnorm_eval_uses_running_stats():
    spec = NetworkSpec([Flatten(), Dense(3, 4), BatchNorm(4), Spiking(NeuronConfig()), Dense(4, 2),
                        OutputAccumulator()], (3, 1, 1))
    net = Network(spec, seed=1)
    x = np.random.default_rng(7).random((8, 3, 1, 1))
    with no_grad():
        net.forward(x, 4)
        before = net.bn[2].running_mean.copy()
        net.eval()
        a, _ = net.forward(x, 4)
        b, _ = net.forward(x[:3], 4)
    np.testing.assert_array_equal(net.bn[2].running_mean, before)
    np.testing.assert_allclose(a.data[:3], b.data, rtol=1e-6)
