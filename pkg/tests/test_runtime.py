"""
运行时测试
学习者计数、同步器资格判定、宽限窗口、传输通道与确定性/实时调度
"""
import os
import sys
import unittest

import numpy as np

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import TINY_TASK, tiny_config
from src.aggregation.merging import LearnerContribution
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.chaos.simulator import ChaosTimeline, LearnerTimeline
from src.core.errors import ChannelClosedError, LiveRunTimeoutError, RangeError
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import plan_from_strategy
from src.harness.tasks import TaskSpec, TaskWorkload, build_model
from src.optim.inner import InnerOptState
from src.runtime.grace import Ema, GraceConfig, grace_window
from src.runtime.learner import Learner, LearnerState, learner_tick
from src.runtime.messages import Message, MessageKind
from src.runtime.scheduler import ACTIVE, Simulation
from src.runtime.syncer import Syncer
from src.runtime.tcp import tcp_pipe
from src.runtime.transport import Channel, DeterministicTransport, LinkModel
from src.runtime.workload import TimingWorkload


def _tensors():
    spec = TaskSpec(**{k: v for k, v in TINY_TASK.items() if k != "family"})
    return build_model(spec)


def _learner(batch: int = 64, m: int = 0):
    tensors = _tensors()
    plan = plan_from_strategy(tensors, "balanced", 12, 12)
    layout = FragmentLayout.build(tensors, plan)
    workload = TimingWorkload(tensors, batch, 1)
    params = workload.initial_params()
    state = LearnerState.fresh(m, params, InnerOptState.create(params.total_size, "sgd"), plan.P)
    return Learner(state, layout, workload), plan, layout


def _global(p: int, stamp: int, values: np.ndarray) -> Message:
    return Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, VectorClock({SYNCER_ID: stamp}),
                   {"fragment": p, "stamp": stamp}, fragment=values)


class TestGrace(unittest.TestCase):
    """测试宽限窗口"""

    def test_window(self):
        grace = GraceConfig(gamma=0.8)
        # slack = 2·1 - 0.6 = 1.4，上限为 ξ_step
        self.assertAlmostEqual(grace_window(grace, 1.0, 0.5, 0.1, 2), 1.0)
        self.assertAlmostEqual(grace_window(GraceConfig(gamma=0.8, cap=5.0), 1.0, 0.5, 0.1, 2), 1.12)

    def test_no_slack(self):
        self.assertEqual(grace_window(GraceConfig(), 1.0, 1.5, 1.0, 2), 0.0)
        self.assertEqual(grace_window(GraceConfig(), 1.0, 0.0, 0.0, 0), 0.0)

    def test_invalid(self):
        with self.assertRaises(RangeError):
            GraceConfig(gamma=1.0)
        with self.assertRaises(RangeError):
            grace_window(GraceConfig(), -1.0, 0.0, 0.0, 2)

    def test_ema(self):
        ema = Ema(0.5)
        self.assertEqual(ema.get(3.0), 3.0)
        ema.update(2.0)
        self.assertEqual(ema.update(4.0), 3.0)


class TestLearner(unittest.TestCase):
    """测试学习者计数与分片应用"""

    def test_tick_counts_tokens(self):
        learner, plan, _ = _learner(batch=64)
        metadata, applied = learner_tick(learner, 64)
        self.assertEqual(applied, [])
        self.assertEqual(metadata.meta["t_m"], 1)
        self.assertEqual(metadata.meta["c_tokens"], [64] * plan.P)
        self.assertEqual(metadata.meta["c_steps"], [1] * plan.P)

    def test_count_then_apply(self):
        """先计数后应用：元数据包含本步，应用后分片计数清零"""
        learner, plan, layout = _learner()
        learner_tick(learner, 64)
        learner.receive(_global(3, 5, np.ones(layout.size(3))))
        metadata, applied = learner_tick(learner, 64)
        self.assertEqual(metadata.meta["c_steps"][3], 2)
        self.assertEqual(applied, [(3, 5)])
        st = learner.state
        self.assertEqual(st.c_steps[3], 0)
        self.assertEqual(st.c_tokens[3], 0)
        self.assertEqual(int(st.c_steps[4]), 2)
        self.assertEqual(st.t_global_known, 5)
        self.assertEqual(learner.syncer_step_seen(), 5)
        np.testing.assert_array_equal(learner.fragment(3), np.ones(layout.size(3)))

    def test_interpolation(self):
        learner, _, layout = _learner()
        learner.alpha = 0.5
        learner.receive(_global(0, 1, np.full(layout.size(0), 2.0)))
        learner.drain()
        np.testing.assert_allclose(learner.fragment(0), np.ones(layout.size(0)))

    def test_serve_pull(self):
        learner, _, layout = _learner()
        learner_tick(learner, 10)
        learner_tick(learner, 10)
        request = Message(MessageKind.PULL_REQUEST, SYNCER_ID, VectorClock({SYNCER_ID: 2}), {"fragment": 2, "t": 2})
        payload = learner.serve_pull(request)
        self.assertEqual(payload.kind, MessageKind.FRAGMENT_PAYLOAD)
        self.assertEqual(payload.meta["c_steps"], 2)
        self.assertEqual(payload.meta["c_tokens"], 20)
        self.assertEqual(payload.fragment.size, layout.size(2))

    def test_invalid_alpha(self):
        learner, _, layout = _learner()
        with self.assertRaises(RangeError):
            Learner(learner.state, layout, learner.workload, alpha=2.0)


class TestSyncer(unittest.TestCase):
    """测试同步器"""

    def setUp(self):
        self.learner, self.plan, self.layout = _learner()
        config = tiny_config()
        self.syncer = Syncer.create(self.learner.workload.initial_params(), self.plan, self.layout, config)

    def test_eligible_requires_fresh_report(self):
        p = self.plan.fragment_at(1)
        self.assertEqual(self.syncer.eligible(1, p, [0]), [])
        self.syncer.on_metadata(self.learner.compute(8), now=1.0)
        self.assertEqual(self.syncer.eligible(1, p, [0]), [0])
        self.syncer.close_round()
        self.assertEqual(self.syncer.eligible(1, p, [0]), [])

    def test_required_stamp(self):
        self.syncer.state.broadcasts = [3, 5]
        self.assertIsNone(self.syncer.required_stamp(4))
        self.assertEqual(self.syncer.required_stamp(5), 3)
        self.assertEqual(self.syncer.required_stamp(9), 5)

    def test_stale_learner_excluded(self):
        self.syncer.state.broadcasts = [3]
        self.syncer.on_metadata(self.learner.compute(8), now=1.0)
        self.assertEqual(self.syncer.eligible(5, None, [0]), [])
        self.assertEqual(self.syncer.eligible(4, None, [0]), [0])

    def test_merge_and_broadcast(self):
        p = 2
        prev = self.syncer.state.theta.values[self.layout.indices[p]].copy()
        contribs = [LearnerContribution(m, p, prev - 0.1 * (m + 1), 1, 8) for m in range(2)]
        outcome = self.syncer.merge(1, p, contribs)
        self.assertEqual(outcome.contributors, [0, 1])
        self.assertEqual(self.syncer.state.broadcasts, [1])
        np.testing.assert_array_equal(self.syncer.state.theta.values[self.layout.indices[p]], outcome.values)
        message = self.syncer.broadcast_message(outcome)
        self.assertEqual(message.meta, {"fragment": p, "stamp": 1})
        self.assertEqual(self.syncer.advance(), 2)


class TestTransport(unittest.TestCase):
    """测试传输与通道"""

    def _msg(self, bits: int) -> Message:
        return Message(MessageKind.METADATA, 0, VectorClock(), {}, size_bits=bits)

    def test_fifo_per_link(self):
        transport = DeterministicTransport(LinkModel(latency=1.0, bandwidth_bps=1000.0))
        first = transport.send(0.0, 0, 1, self._msg(10_000))
        second = transport.send(0.5, 0, 1, self._msg(0))
        self.assertEqual(first, 11.0)
        self.assertGreaterEqual(second, first)
        self.assertEqual(transport.send(0.5, 0, 2, self._msg(0)), 1.5)

    def test_closed_endpoint(self):
        transport = DeterministicTransport(LinkModel())
        transport.close(1)
        self.assertIsNone(transport.send(0.0, 0, 1, self._msg(8)))
        self.assertEqual(transport.dropped, 1)
        transport.reopen(1)
        self.assertEqual(transport.send(0.0, 0, 1, self._msg(8)), 0.0)

    def test_channel(self):
        channel = Channel("c")
        channel.send(self._msg(1))
        channel.send(self._msg(2))
        self.assertEqual(channel.poll(0).size_bits, 1)
        self.assertEqual(channel.poll(0).size_bits, 2)
        self.assertIsNone(channel.poll(0))
        channel.close()
        with self.assertRaises(ChannelClosedError):
            channel.send(self._msg(3))

    def test_tcp_pipe(self):
        tx, rx = tcp_pipe("t")
        try:
            for i in range(3):
                tx.send(Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, VectorClock({SYNCER_ID: i}),
                                {"fragment": i, "stamp": i}, fragment=np.arange(i + 1, dtype=np.float64)))
            for i in range(3):
                msg = rx.poll(5.0)
                self.assertEqual(msg.meta["fragment"], i)
                np.testing.assert_array_equal(msg.fragment, np.arange(i + 1, dtype=np.float64))
            tx.close()
            with self.assertRaises(ChannelClosedError):
                rx.poll(5.0)
        finally:
            tx.close()
            rx.close()


class TestSimulation(unittest.TestCase):
    """测试确定性调度"""

    def _run(self, config, **kwargs):
        workload = TaskWorkload.from_config(config)
        return workload, Simulation(config, workload, **kwargs).run()

    def test_completes_and_learns(self):
        config = tiny_config()
        workload, result = self._run(config)
        self.assertEqual(result.final_step, config.runtime.total_steps + 1)
        self.assertEqual(len(result.metrics.sync_rounds()), config.runtime.total_steps)
        initial = workload.evaluate(workload.initial_params())["loss"]
        self.assertLess(workload.evaluate(result.theta)["loss"], initial)

    def test_deterministic(self):
        config = tiny_config(runtime={"speed_classes": [1.0, 0.7], "speed_jitter": 0.1})
        _, a = self._run(config)
        _, b = self._run(config)
        self.assertEqual(a.checksums(), b.checksums())
        self.assertEqual(a.end_time, b.end_time)

    def test_fragment_free_steps(self):
        """P < H 时部分同步步没有分片需要同步"""
        config = tiny_config(runtime={"fragments": 6})
        _, result = self._run(config)
        self.assertEqual(len(result.metrics.rounds), 36)
        self.assertEqual(len(result.metrics.sync_rounds()), 18)

    def test_stalled_learner(self):
        config = tiny_config()
        timeline = ChaosTimeline({1: LearnerTimeline(stalls=[(2.0, 20.0)])})
        _, result = self._run(config, timeline=timeline)
        steps = result.metrics.learner_steps
        self.assertEqual(result.final_step, 37)
        self.assertLess(steps[1], steps[0])

    def test_grace_admits_more(self):
        """两个速度等级加抖动时，宽限窗口的平均接纳数至少是 K=1 无宽限的 1.5 倍，且学习者从不等同步器"""
        base = {"num_learners": 4, "quorum": 1, "speed_classes": [1.0, 0.82], "speed_jitter": 0.1,
                "total_steps": 48}
        workload = TimingWorkload(_tensors(), 16, 1)
        plain = Simulation(tiny_config(runtime=base, grace={"enabled": False}), workload).run()
        graced = Simulation(tiny_config(runtime=base), workload).run()
        self.assertFalse(plain.metrics.grace_windows)
        self.assertTrue(graced.metrics.grace_windows)
        ratio = graced.metrics.mean_admitted() / plain.metrics.mean_admitted()
        self.assertGreaterEqual(ratio, 1.5)
        for result in (plain, graced):
            self.assertEqual(sorted(result.metrics.learner_wait), [0, 1, 2, 3])
            self.assertTrue(all(w == 0.0 for w in result.metrics.learner_wait.values()))
            self.assertTrue(all(steps > 0 for steps in result.metrics.learner_steps.values()))

    def test_scavenged_learner_joins(self):
        config = tiny_config()
        workload = TaskWorkload(TaskSpec(**{k: v for k, v in TINY_TASK.items()}), 3, config.seed)
        sim = Simulation(config, workload)
        m = sim.add_learner(at=10.0)
        result = sim.run()
        self.assertEqual(m, 2)
        self.assertEqual(result.statuses[m], ACTIVE)
        self.assertGreaterEqual(result.metrics.recoveries, 1)
        self.assertGreater(result.metrics.learner_steps[m], 0)


class TestLiveRunner(unittest.TestCase):
    """测试实时模式"""

    def _runner(self, transport: str = "inproc", **runtime):
        from src.runtime.live import LiveRunner
        settings = {"mode": "live", "total_steps": 12, "live_time_scale": 0.002, "live_transport": transport}
        settings.update(runtime)
        config = tiny_config(runtime=settings)
        return LiveRunner(config, TaskWorkload.from_config(config))

    def _run(self, transport: str):
        return self._runner(transport).run(timeout=60.0)

    def test_inproc(self):
        result = self._run("inproc")
        self.assertEqual(result.final_step, 13)
        self.assertTrue(all(s.t_m > 0 for s in result.learners.values()))

    def test_tcp(self):
        result = self._run("tcp")
        self.assertEqual(result.final_step, 13)

    def test_learner_reports_closed_channel(self):
        """运行中通道被关闭时学习者线程记录错误并停止整个运行"""
        runner = self._runner()
        runner._to_syncer[0].close()
        runner._learner_loop(0)
        self.assertEqual(len(runner._errors), 1)
        self.assertIsInstance(runner._errors[0], ChannelClosedError)
        self.assertTrue(runner._stop.is_set())

    def test_closed_channel_fails_run(self):
        runner = self._runner(total_steps=48)

        def close_after_first_merge(live, outcome):
            live._to_syncer[0].close()

        runner.observer = close_after_first_merge
        with self.assertRaises(ChannelClosedError):
            runner.run(timeout=60.0)

    def test_timeout_raises(self):
        runner = self._runner(total_steps=5_000)
        with self.assertRaises(LiveRunTimeoutError):
            runner.run(timeout=0.2)
        self.assertLess(runner.syncer.t, 5_001)


def run_tests():
    """运行所有测试"""
    test_suite = unittest.TestSuite()
    for test_class in [TestGrace, TestLearner, TestSyncer, TestTransport, TestSimulation, TestLiveRunner]:
        test_suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    result = unittest.TextTestRunner(verbosity=2).run(test_suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
