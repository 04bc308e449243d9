import math
import warnings

import numpy as np
import pytest

from spikegrad.errors import ContractError, TrainingError
from spikegrad.optim import OptimizerState, adamw_step, one_cycle_lr
from spikegrad.tensor import Tensor, precision
from spikegrad.trainer import range_test


def param(values, grad=None):
    p = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return p


def reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop transcription of decoupled-decay Adam."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_zero_gradient_without_decay_is_a_no_op():
    with precision(np.float64):
        p = param([1.5, -2.0], [0.0, 0.0])
        adamw_step([("w", p)], OptimizerState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_zero_gradient_decay_scales_parameters():
    with precision(np.float64):
        p = param([1.5, -2.0], [0.0, 0.0])
        adamw_step([("w", p)], OptimizerState(), lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(p.data, np.array([1.5, -2.0]) * 0.999, rtol=1e-15)


def test_matches_scalar_reference():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(25)
    with precision(np.float64):
        p = param([0.7])
        state = OptimizerState()
        for g in grads:
            p.grad = np.array([g])
            adamw_step([("w", p)], state, lr=0.01, weight_decay=0.05)
    assert p.data[0] == pytest.approx(reference_adamw(0.7, grads, 0.01, 0.05), rel=1e-12)


def test_constant_gradient_update_approaches_lr():
    with precision(np.float64):
        p = param([0.0])
        state = OptimizerState()
        last = None
        for _ in range(1000):
            before = p.data[0]
            p.grad = np.array([0.37])
            adamw_step([("w", p)], state, lr=1e-3, weight_decay=0.0)
            last = before - p.data[0]
    assert last == pytest.approx(1e-3, rel=1e-4)


def test_nan_gradient_names_parameter():
    p = param([1.0], [np.nan])
    with pytest.raises(TrainingError, match="3.weight"):
        adamw_step([("3.weight", p)], OptimizerState(), lr=0.1)


def test_one_cycle_landmarks():
    assert one_cycle_lr(0, 100, 1e-2) == pytest.approx(1e-2 / 25)
    assert one_cycle_lr(30, 100, 1e-2) == pytest.approx(1e-2)
    assert one_cycle_lr(100, 100, 1e-2) == pytest.approx(1e-2 / 2500)
    assert one_cycle_lr(150, 100, 1e-2) == one_cycle_lr(100, 100, 1e-2)
    with pytest.raises(ContractError):
        one_cycle_lr(0, 0, 1e-2)


def test_one_cycle_shape():
    lrs = [one_cycle_lr(s, 200, 1.0) for s in range(201)]
    peak = int(np.argmax(lrs))
    assert peak == 60
    assert all(a < b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))


@pytest.mark.parametrize("curvature", [0.5, 4.0, 50.0])
def test_range_test_on_quadratic_stays_below_stability_bound(curvature):
    # gradient noise keeps the iterate off the minimum, as minibatch noise does in training
    rng = np.random.default_rng(0)
    p = [1.0]

    def step(lr):
        loss = 0.5 * curvature * p[0] ** 2
        p[0] -= lr * (curvature * p[0] + 0.1 * rng.standard_normal())
        return loss

    result = range_test(step, 1e-4, 10.0, steps=200)
    assert result.diverged_at is not None
    assert result.suggested_lr < 2.0 / curvature


def test_range_test_without_divergence_warns():
    with pytest.warns(RuntimeWarning):
        result = range_test(lambda lr: 1.0, 1e-4, 1e-2, steps=20)
    assert result.suggested_lr == 1e-2


def test_range_test_nan_on_first_step():
    with pytest.raises(TrainingError):
        range_test(lambda lr: float("nan"), 1e-4, 1.0, steps=10)
    with pytest.raises(ContractError):
        range_test(lambda lr: 1.0, 1.0, 0.1)
