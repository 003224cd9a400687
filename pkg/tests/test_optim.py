import math
import unittest

import numpy as np
import pytest

from app.optim import (
    AdamState,
    LrSchedule,
    adam_step,
    clip_grad_norm,
    cosine_lr,
    derive_seed,
    scheduled_lr,
    xavier_uniform,
)
from app.tensor import Tensor
from app.utils.errors import ContractError, DimensionError, NumericError
from app.utils.types import ScheduleKind


class TestXavier(unittest.TestCase):
    def test_bound_and_determinism(self):
        w = xavier_uniform((64, 32), seed=7)
        bound = math.sqrt(6.0 / (64 + 32))
        self.assertLessEqual(np.abs(w.data).max(), bound)
        np.testing.assert_array_equal(w.data, xavier_uniform((64, 32), seed=7).data)
        self.assertFalse(np.array_equal(w.data, xavier_uniform((64, 32), seed=8).data))

    def test_variance_matches_uniform(self):
        w = xavier_uniform((400, 300), seed=1)
        expected = 2.0 / (400 + 300)
        self.assertAlmostEqual(float(w.data.var()), expected, delta=0.05 * expected)

    def test_vector_shape_rejected(self):
        with self.assertRaises(ContractError):
            xavier_uniform((5,), seed=0)


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(0, "layer", 3) == derive_seed(0, "layer", 3)
    assert derive_seed(0, "layer", 3) != derive_seed(0, "layer", 4)
    assert derive_seed(0, "x") != derive_seed(1, "x")
    assert 0 <= derive_seed(12345, "probe") < 2**60


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    param = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    grad = np.array([0.3, -4.0, 1e-2])
    new, state = adam_step(param, grad, AdamState.zeros_like(param), lr=0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new.data, param.data - 0.1 * np.sign(grad), atol=1e-6)
    assert state.t == 1
    assert new.requires_grad


def test_adam_converges_on_quadratic():
    target = np.array([3.0, -1.0])
    param = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState.zeros_like(param)
    for _ in range(2000):
        param, state = adam_step(param, 2 * (param.data - target), state, lr=0.05)
    np.testing.assert_allclose(param.data, target, atol=1e-2)


def test_adam_zero_lr_keeps_parameter():
    param = Tensor(np.ones(3), requires_grad=True)
    new, _ = adam_step(param, np.ones(3), AdamState.zeros_like(param), lr=0.0)
    np.testing.assert_array_equal(new.data, param.data)


def test_adam_contract_errors():
    param = Tensor(np.ones(3), requires_grad=True)
    state = AdamState.zeros_like(param)
    with pytest.raises(DimensionError):
        adam_step(param, np.ones(4), state, lr=0.1)
    with pytest.raises(ContractError):
        adam_step(param, np.ones(3), state, lr=-1.0)
    with pytest.raises(NumericError):
        adam_step(param, np.array([1.0, np.nan, 0.0]), state, lr=0.1)


def test_adam_weight_decay_pulls_toward_zero():
    param = Tensor(np.array([2.0]), requires_grad=True)
    new, _ = adam_step(param, np.zeros(1), AdamState.zeros_like(param), lr=0.1, weight_decay=0.5)
    assert new.data[0] < 2.0


class TestCosine(unittest.TestCase):
    def test_endpoints_and_midpoint(self):
        sched = LrSchedule(1e-3, 100)
        self.assertEqual(cosine_lr(0, sched), 1e-3)
        self.assertAlmostEqual(cosine_lr(50, sched), 5e-4)
        self.assertEqual(cosine_lr(100, sched), 0.0)

    def test_monotone_non_increasing(self):
        sched = LrSchedule(1.0, 37)
        values = [cosine_lr(s, sched) for s in range(38)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_out_of_range_step(self):
        sched = LrSchedule(1.0, 10)
        with self.assertRaises(ContractError):
            cosine_lr(11, sched)
        with self.assertRaises(ContractError):
            cosine_lr(-1, sched)

    def test_invalid_schedule(self):
        with self.assertRaises(ContractError):
            LrSchedule(0.0, 10)
        with self.assertRaises(ContractError):
            LrSchedule(1.0, 0)

    def test_constant_schedule(self):
        sched = LrSchedule(0.2, 5, ScheduleKind.CONSTANT)
        self.assertEqual([scheduled_lr(s, sched) for s in range(6)], [0.2] * 6)


def test_clip_grad_norm_rescales_to_max():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float((g**2).sum()) for g in clipped.values()))
    assert total == pytest.approx(1.0)


def test_clip_grad_norm_without_limit_only_measures():
    grads = {"a": np.array([3.0, 4.0])}
    same, norm = clip_grad_norm(grads, None)
    assert same is grads
    assert norm == pytest.approx(5.0)


if __name__ == "__main__":
    unittest.main()
