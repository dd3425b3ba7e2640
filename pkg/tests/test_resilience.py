"""
弹性测试
一致性快照的落盘与校验、从快照恢复、学习者恢复与影子学习者等价
"""
import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import tiny_config
from src.causality.tape import TapeHeader, TapeRecorder
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.errors import RecoveryBudgetExceeded, RecoveryUnavailableError, SnapshotIntegrityError
from src.core.params import checksum
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import plan_from_strategy
from src.harness.tasks import TaskWorkload
from src.optim.inner import InnerOptState
from src.resilience.recovery import (
    RecoveryAttempt, buffer_broadcast, check_budget, recover_learner, restart_attempt, select_peer,
    shadow_state,
)
from src.resilience.resume import resume
from src.resilience.snapshot import latest_snapshot, load_snapshot, marker_crossing, should_begin
from src.runtime.learner import Learner, LearnerState, learner_tick
from src.runtime.messages import Message, MessageKind
from src.runtime.scheduler import ACTIVE, Simulation


def _snapshot_config(**runtime):
    return tiny_config(runtime=dict({"total_steps": 48}, **runtime), snapshot={"interval": 12})


class TestMarkers(unittest.TestCase):
    """测试快照标记"""

    def test_should_begin(self):
        self.assertTrue(should_begin(24, 12, None))
        self.assertFalse(should_begin(25, 12, None))
        self.assertFalse(should_begin(24, 0, None))

    def test_marker_crossing(self):
        self.assertIsNone(marker_crossing(10, 11, 12))
        self.assertEqual(marker_crossing(11, 12, 12), 12)
        self.assertIsNone(marker_crossing(12, 13, 12))
        # 一次越过多个倍数时按最新的保存
        self.assertEqual(marker_crossing(11, 37, 12), 36)
        self.assertIsNone(marker_crossing(0, 5, 0))


class TestSnapshotPersistence(unittest.TestCase):
    """测试快照落盘"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.config = _snapshot_config()
        self.workload = TaskWorkload.from_config(self.config)
        self.result = Simulation(self.config, self.workload, snapshot_dir=str(self.dir)).run()

    def tearDown(self):
        self.tmp.cleanup()

    def test_snapshots_taken(self):
        taken = self.result.metrics.snapshots
        self.assertEqual(taken[:3], [12, 24, 36])
        self.assertEqual(latest_snapshot(self.dir).name, f"snap_{max(taken)}")
        self.assertIsNone(latest_snapshot(self.dir / "missing"))

    def test_load_round_trip(self):
        snap = self.result.snapshots[0]
        loaded = load_snapshot(self.dir / "snap_12", self.workload.tensors)
        self.assertEqual(loaded.snapshot_id, 12)
        self.assertEqual(checksum(loaded.syncer.theta), checksum(snap.syncer.theta))
        self.assertEqual(sorted(loaded.learners), sorted(snap.learners))
        for m, cp in snap.learners.items():
            self.assertEqual(checksum(loaded.learners[m].state.theta.values), checksum(cp.state.theta.values))
            self.assertEqual(loaded.learners[m].state.inner_opt.step, cp.state.inner_opt.step)
            self.assertEqual(loaded.learners[m].state.vclock, cp.state.vclock)

    def test_tampered_file(self):
        target = self.dir / "snap_24" / "learner_0.npz"
        data = bytearray(target.read_bytes())
        data[-1] ^= 0xFF
        target.write_bytes(bytes(data))
        with self.assertRaises(SnapshotIntegrityError):
            load_snapshot(self.dir / "snap_24", self.workload.tensors)

    def test_missing_manifest(self):
        with self.assertRaises(SnapshotIntegrityError):
            load_snapshot(self.dir / "snap_7")


class TestResume(unittest.TestCase):
    """测试从快照恢复"""

    def test_resume_from_every_snapshot_is_bitwise(self):
        """在每个快照处中断，带磁带恢复后与不中断的运行逐位一致"""
        config = _snapshot_config(total_steps=72, speed_classes=[1.0, 0.7])
        with tempfile.TemporaryDirectory() as tmp:
            recorder = TapeRecorder(TapeHeader.from_config(config))
            result = Simulation(config, TaskWorkload.from_config(config), recorder=recorder,
                                snapshot_dir=tmp).run()
            recorder.close()
            taken = result.metrics.snapshots
            self.assertGreaterEqual(len(taken), 5)
            self.assertEqual(taken[:5], [12, 24, 36, 48, 60])
            expected = result.checksums()
            for snapshot_id in taken:
                with self.subTest(snapshot=snapshot_id):
                    resumed = resume(Path(tmp) / f"snap_{snapshot_id}", config, TaskWorkload.from_config(config),
                                     tape=recorder.tape)
                    self.assertEqual(resumed.checksums(), expected)

    def test_resume_without_tape_continues(self):
        config = _snapshot_config()
        with tempfile.TemporaryDirectory() as tmp:
            Simulation(config, TaskWorkload.from_config(config), snapshot_dir=tmp).run()
            workload = TaskWorkload.from_config(config)
            resumed = resume(Path(tmp) / "snap_24", config, workload)
        self.assertEqual(resumed.final_step, config.runtime.total_steps + 1)
        self.assertTrue(np.isfinite(workload.evaluate(resumed.theta)["loss"]))


def _learners(config, ids):
    workload = TaskWorkload.from_config(config)
    tensors = workload.tensors
    plan = plan_from_strategy(tensors, "balanced", 12, 12)
    layout = FragmentLayout.build(tensors, plan)
    initial = workload.initial_params()
    learners = {}
    for m in ids:
        opt = InnerOptState.from_settings(initial.total_size, config.optim)
        learners[m] = Learner(LearnerState.fresh(m, initial, opt, plan.P), layout, workload)
    return learners, layout, workload


def _broadcast(p: int, stamp: int, values) -> Message:
    return Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, VectorClock({SYNCER_ID: stamp}),
                   {"fragment": p, "stamp": stamp}, fragment=np.asarray(values, dtype=np.float64))


class TestRecovery(unittest.TestCase):
    """测试学习者恢复"""

    def test_select_peer(self):
        self.assertEqual(select_peer([3, 1, 2], exclude=1), 2)
        with self.assertRaises(RecoveryUnavailableError):
            select_peer([1], exclude=1)

    def test_budget(self):
        attempt = RecoveryAttempt(2)
        buffer_broadcast(attempt, _broadcast(0, 3, [0.0]))
        buffer_broadcast(attempt, _broadcast(1, 15, [0.0]))
        check_budget(attempt, 12)
        buffer_broadcast(attempt, _broadcast(2, 16, [0.0]))
        with self.assertRaises(RecoveryBudgetExceeded):
            check_budget(attempt, 12)
        restart_attempt(attempt)
        self.assertEqual(attempt.t_s, 16)
        self.assertEqual(attempt.retries, 1)
        self.assertEqual(len(attempt.buffer), 1)

    def test_install_matches_shadow(self):
        """新学习者安装同伴状态并补应用分片后，与影子学习者逐位一致"""
        config = tiny_config()
        learners, layout, workload = _learners(config, [0, 1, 2])
        peers = {0: learners[0], 1: learners[1]}
        for _ in range(3):
            for learner in peers.values():
                learner_tick(learner, 16)
        v3 = np.full(layout.size(3), 0.25)
        v4 = np.full(layout.size(4), -0.5)
        history = {3: (3, v3), 4: (4, v4)}
        first = _broadcast(3, 3, v3)
        for learner in peers.values():
            learner.receive(first)
            learner.drain()
        record = recover_learner(learners[2], peers, [first, _broadcast(4, 4, v4)])
        self.assertEqual(record.peer, 0)
        self.assertEqual(record.t_s, 3)
        self.assertEqual(record.applied, [(4, 4)])
        installed = learners[2].state
        self.assertEqual(installed.learner_id, 2)
        self.assertEqual(installed.t_global_known, 4)
        shadow = shadow_state(record, history, layout, workload)
        self.assertEqual(checksum(shadow.theta.values), checksum(installed.theta.values))
        np.testing.assert_array_equal(shadow.c_steps, installed.c_steps)

    def test_peer_not_ready(self):
        config = tiny_config()
        learners, _, _ = _learners(config, [0, 1])
        with self.assertRaises(RecoveryUnavailableError):
            recover_learner(learners[1], {0: learners[0]}, [_broadcast(0, 5, np.zeros(3))])
        with self.assertRaises(RecoveryUnavailableError):
            recover_learner(learners[1], {0: learners[0]}, [])


class TestRecoveryInSimulation(unittest.TestCase):
    """测试运行中的加入与重启"""

    def test_restart_recovers_within_budget(self):
        config = tiny_config(runtime={"total_steps": 48})
        workload = TaskWorkload.from_config(config)
        sim = Simulation(config, workload)
        sim.restart_learner(1, at=15.0)
        result = sim.run()
        self.assertEqual(result.statuses[1], ACTIVE)
        self.assertEqual(result.metrics.recoveries, 1)
        self.assertEqual(result.recoveries[0].peer, 0)

    def test_many_seeded_restarts(self):
        """20 个种子各重启 5 次：首个贡献分片的陈旧度不超过 H，安装状态与影子学习者逐位一致"""
        total = 0
        for seed in range(20):
            config = tiny_config(seed=seed, runtime={"num_learners": 3, "total_steps": 120})
            workload = TaskWorkload.from_config(config)
            sim = Simulation(config, workload)
            offset = (seed % 7) * 0.37
            for k in range(5):
                sim.restart_learner((1, 2, 0)[k % 3], at=10.0 + 20.0 * k + offset)
            result = sim.run()
            metrics = result.metrics
            with self.subTest(seed=seed):
                self.assertEqual(metrics.recoveries, 5)
                self.assertEqual(len(metrics.recovery_staleness), metrics.recoveries)
                self.assertTrue(all(0 <= s <= sim.H for s in metrics.recovery_staleness))
                self.assertTrue(all(status == ACTIVE for status in result.statuses.values()))
                for record in result.recoveries:
                    shadow = shadow_state(record, sim.syncer.state.history, sim.layout, workload,
                                          config.runtime.alpha)
                    self.assertEqual(checksum(shadow.theta.values), checksum(record.installed.theta.values))
                    np.testing.assert_array_equal(shadow.c_steps, record.installed.c_steps)
            total += metrics.recoveries
        self.assertGreaterEqual(total, 100)


def run_tests():
    """运行所有测试"""
    test_suite = unittest.TestSuite()
    for test_class in [TestMarkers, TestSnapshotPersistence, TestResume, TestRecovery, TestRecoveryInSimulation]:
        test_suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    result = unittest.TextTestRunner(verbosity=2).run(test_suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
