"""
优化器测试
外层 Nesterov 更新、内层 SGD/AdamW、收到全局分片时的插值与任务梯度
"""
import os
import sys
import unittest

import numpy as np

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.errors import DimensionError, RangeError
from src.core.params import ParamStore
from src.harness.tasks import TaskSpec, TaskWorkload, build_model, init_params, loss_and_grad, make_dataset
from src.optim.inner import InnerOptState, inner_step
from src.optim.outer import OuterOptState, apply_received_fragment, outer_lr_at, outer_step


class TestOuterStep(unittest.TestCase):
    """测试外层优化器"""

    def test_nesterov_example(self):
        state = OuterOptState.zeros(2, lr=0.7, mu=0.9, nesterov=True)
        theta, new_state = outer_step(state, [1.0, 1.0], [1.0, 0.0])
        np.testing.assert_allclose(theta, [1.0 - 1.33, 1.0], atol=1e-12)
        np.testing.assert_array_equal(new_state.momentum, [1.0, 0.0])
        np.testing.assert_array_equal(state.momentum, [0.0, 0.0])

    def test_plain_momentum(self):
        state = OuterOptState.zeros(1, lr=1.0, mu=0.5, nesterov=False)
        theta, state = outer_step(state, [0.0], [1.0])
        theta, state = outer_step(state, theta, [1.0])
        np.testing.assert_allclose(theta, [-2.5])

    def test_replacement_fixed_point(self):
        """μ=0、η=1 时结果就是学习者分片的平均"""
        state = OuterOptState.zeros(2, lr=1.0, mu=0.0, nesterov=False)
        self.assertTrue(state.is_replacement)
        target = np.array([0.1, 0.2])
        theta, _ = outer_step(state, [1.0, 1.0], [0.9, 0.8], target=target)
        np.testing.assert_array_equal(theta, target)

    def test_lr_override(self):
        state = OuterOptState.zeros(1, lr=0.7, mu=0.0, nesterov=False)
        theta, _ = outer_step(state, [1.0], [1.0], lr=0.25)
        np.testing.assert_allclose(theta, [0.75])

    def test_errors(self):
        with self.assertRaises(RangeError):
            OuterOptState.zeros(2, mu=1.0)
        with self.assertRaises(DimensionError):
            outer_step(OuterOptState.zeros(2), [0.0, 0.0], [1.0])


class TestSchedule(unittest.TestCase):
    """测试外层学习率调度"""

    def test_constant(self):
        self.assertEqual(outer_lr_at(0.7, 50, 100), 0.7)

    def test_cosine(self):
        self.assertAlmostEqual(outer_lr_at(1.0, 0, 100, "cosine"), 1.0)
        self.assertAlmostEqual(outer_lr_at(1.0, 50, 100, "cosine"), 0.5)
        self.assertAlmostEqual(outer_lr_at(1.0, 100, 100, "cosine"), 0.0)

    def test_warmup(self):
        self.assertAlmostEqual(outer_lr_at(1.0, 0, 100, "cosine", warmup=4), 0.25)
        self.assertAlmostEqual(outer_lr_at(1.0, 3, 100, "cosine", warmup=4), 1.0)
        self.assertAlmostEqual(outer_lr_at(1.0, 4, 100, "cosine", warmup=4), 1.0)


class TestApplyReceived(unittest.TestCase):
    """测试全局分片插值"""

    def test_half(self):
        np.testing.assert_allclose(apply_received_fragment([2.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])

    def test_overwrite_and_keep(self):
        np.testing.assert_array_equal(apply_received_fragment([2.0], [5.0], 0.0), [5.0])
        np.testing.assert_array_equal(apply_received_fragment([2.0], [5.0], 1.0), [2.0])

    def test_errors(self):
        with self.assertRaises(RangeError):
            apply_received_fragment([1.0], [1.0], 1.5)
        with self.assertRaises(DimensionError):
            apply_received_fragment([1.0], [1.0, 2.0], 0.5)


class TestInnerStep(unittest.TestCase):
    """测试内层优化器"""

    def test_sgd_example(self):
        state = InnerOptState.create(2, kind="sgd", lr=0.1)
        theta, state = inner_step(state, np.zeros(2), [1.0, 1.0])
        np.testing.assert_allclose(theta, [-0.1, -0.1])
        self.assertEqual(state.step, 1)

    def test_adamw_first_step(self):
        """偏差修正后首步的幅度约为 lr"""
        state = InnerOptState.create(3, kind="adamw", lr=0.01)
        theta, new_state = inner_step(state, np.zeros(3), [2.0, -0.5, 1e-3])
        np.testing.assert_allclose(theta, [-0.01, 0.01, -0.01], rtol=1e-4)
        np.testing.assert_array_equal(state.m, np.zeros(3))
        self.assertEqual(new_state.step, 1)

    def test_weight_decay(self):
        state = InnerOptState.create(1, kind="adamw", lr=0.1, weight_decay=0.5)
        theta, _ = inner_step(state, np.array([2.0]), [0.0])
        np.testing.assert_allclose(theta, [1.9])

    def test_param_store(self):
        tensors = build_model(TaskSpec(family="linear_regression", n_features=4, linear_blocks=2))
        store = ParamStore(tensors)
        new, _ = inner_step(InnerOptState.create(store.total_size, "sgd", 1.0), store, np.ones(store.total_size))
        self.assertIsInstance(new, ParamStore)
        np.testing.assert_array_equal(new.values, -np.ones(store.total_size))

    def test_errors(self):
        with self.assertRaises(RangeError):
            InnerOptState.create(2, kind="lion")
        with self.assertRaises(DimensionError):
            inner_step(InnerOptState.create(2, "sgd"), np.zeros(2), [1.0])


class TestTaskGradients(unittest.TestCase):
    """测试任务梯度与线性回归收敛"""

    def _check_fd(self, spec: TaskSpec):
        tensors = build_model(spec)
        params = init_params(tensors, spec, seed=1)
        # 避开 ReLU 的不可导点
        params.values[...] += named_offsets(params.total_size)
        data = make_dataset(spec)
        _, grad = loss_and_grad(spec, params, data)
        eps = 1e-6
        numeric = np.zeros_like(grad)
        for i in range(params.total_size):
            plus, minus = params.copy(), params.copy()
            plus.values[i] += eps
            minus.values[i] -= eps
            numeric[i] = (loss_and_grad(spec, plus, data)[0] - loss_and_grad(spec, minus, data)[0]) / (2 * eps)
        rel = np.linalg.norm(grad - numeric) / max(np.linalg.norm(numeric), 1e-12)
        self.assertLess(rel, 1e-5)

    def test_mlp_finite_difference(self):
        self._check_fd(TaskSpec(n_examples=32, n_features=3, n_classes=3, hidden=4, blocks=2, label_noise=0.0))

    def test_linear_finite_difference(self):
        self._check_fd(TaskSpec(family="linear_regression", n_examples=32, n_features=5, linear_blocks=3))

    def test_linear_converges_to_least_squares(self):
        """整批 SGD 收敛到最小二乘解"""
        spec = TaskSpec(family="linear_regression", n_examples=256, n_features=4, linear_blocks=2, batch_size=0)
        workload = TaskWorkload(spec, 1, seed=0)
        params = workload.initial_params()
        state = InnerOptState.create(params.total_size, "sgd", 0.5)
        batch = workload.next_batch(0, workload.examples_for(0))
        for _ in range(600):
            _, grad = workload.loss_and_grad(params, batch)
            params, state = inner_step(state, params, grad)

        data = workload.dataset
        design = np.hstack([data.X, np.ones((len(data), 1))])
        solution, *_ = np.linalg.lstsq(design, data.y, rcond=None)
        learned = np.concatenate([params.tensor("w0"), params.tensor("w1"), params.tensor("b")])
        np.testing.assert_allclose(learned, solution, atol=1e-6)


def named_offsets(n: int) -> np.ndarray:
    return np.random.default_rng(11).uniform(-0.05, 0.05, n)


def run_tests():
    """运行所有测试"""
    test_suite = unittest.TestSuite()
    for test_class in [TestOuterStep, TestSchedule, TestApplyReceived, TestInnerStep, TestTaskGradients]:
        test_suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    result = unittest.TextTestRunner(verbosity=2).run(test_suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
