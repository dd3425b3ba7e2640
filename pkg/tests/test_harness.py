"""
实验驱动、报表与图表测试
退化配置与参考循环的逐位等价，以及 CSV / Excel / PNG 输出
"""
import json
import os
import shutil
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
from openpyxl import load_workbook

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import SLOW, degenerate_config, tiny_config
from src.core.params import checksum
from src.harness.experiments import (
    ExperimentReport, LossTracker, run_decoupled, run_dp_reference, run_experiment,
    run_streaming_reference,
)
from src.harness.report_generator import ReportGenerator, report_frame, save_report, save_table
from src.harness.tasks import TaskWorkload
from src.harness.visualization import ExperimentVisualizer
from src.runtime.scheduler import Simulation


def _report(**overrides) -> ExperimentReport:
    fields = dict(method="decoupled", mode="det", seed=0, num_learners=2, quorum=1, final_step=37,
                  end_time=36.0, final_loss=0.5, admitted=[1, 2, 2], mean_admitted=5 / 3,
                  loss_curve=[(12, 12.0, 0.9), (24, 24.0, 0.7), (36, 36.0, 0.6)],
                  checksums={"syncer": "abc"})
    fields.update(overrides)
    return ExperimentReport(**fields)


class TestReferenceEquivalence(unittest.TestCase):
    """参考循环等价性"""

    def test_degenerate_matches_data_parallel(self):
        """M=1、H=P=1、μ=0、η=1 时与数据并行逐位一致"""
        config = degenerate_config()
        ref = run_dp_reference(config, TaskWorkload.from_config(config))
        result = Simulation(config, TaskWorkload.from_config(config)).run()
        self.assertEqual(checksum(result.theta.values), ref.checksum())
        self.assertEqual(len(ref.losses), 20)

    def test_blocking_matches_streaming_reference(self):
        """K=M、τ=0、无宽限、零延迟时与阻塞式流式参考逐位一致"""
        config = tiny_config(runtime={"quorum": 2, "overlap": 0}, grace={"enabled": False})
        ref = run_streaming_reference(config, TaskWorkload.from_config(config))
        result = Simulation(config, TaskWorkload.from_config(config)).run()
        self.assertEqual(checksum(result.theta.values), ref.checksum())
        for m, state in ref.learners.items():
            self.assertEqual(checksum(result.learners[m].theta.values), checksum(state.theta.values))

    def test_dp_reference_learns(self):
        config = tiny_config(runtime={"total_steps": 60})
        ref = run_dp_reference(config)
        self.assertLess(np.mean(ref.losses[-10:]), np.mean(ref.losses[:10]))

    @unittest.skipUnless(SLOW, "需要 DDL_SLOW_TESTS=1")
    def test_decoupled_loss_near_data_parallel(self):
        """5 个种子：M=4 时最终损失与数据并行相差不超过 5%，有故障时不超过 10%，且 goodput 高于整体弹性基线"""
        base = {"num_learners": 4, "total_steps": 240}
        chaos = {"enabled": True, "n_chip": 2_400_000}
        for seed in range(5):
            with self.subTest(seed=seed):
                dp = run_experiment(tiny_config(seed=seed, runtime=dict(base, method="dp")))
                clean = run_experiment(tiny_config(seed=seed, runtime=base))
                self.assertLessEqual(abs(clean.final_loss - dp.final_loss) / dp.final_loss, 0.05)
                chaotic = run_experiment(tiny_config(seed=seed, runtime=base, chaos=chaos))
                self.assertLessEqual(abs(chaotic.final_loss - dp.final_loss) / dp.final_loss, 0.10)
                self.assertIsNotNone(chaotic.baseline_goodput)
                self.assertGreater(chaotic.goodput, chaotic.baseline_goodput)

    def test_decoupled_goodput_beats_baseline(self):
        """有故障时解耦运行的 goodput 高于同规模整体弹性基线"""
        config = tiny_config(runtime={"num_learners": 4, "total_steps": 120},
                             chaos={"enabled": True, "n_chip": 2_400_000})
        report = run_experiment(config)
        self.assertIsNotNone(report.baseline_goodput)
        self.assertGreater(report.goodput, report.baseline_goodput)


class TestExperiments(unittest.TestCase):
    """run_experiment / run_decoupled"""

    def test_dp_experiment(self):
        config = tiny_config(runtime={"method": "dp"})
        report = run_experiment(config)
        self.assertEqual(report.method, "dp")
        self.assertEqual(report.final_step, 36)
        self.assertEqual(len(report.loss_curve), 36)
        self.assertEqual(report.checksums["syncer"], run_dp_reference(config).checksum())
        self.assertEqual(report.goodput, 1.0)

    def test_dp_experiment_under_chaos(self):
        config = tiny_config(runtime={"method": "dp"}, chaos={"enabled": True, "n_chip": 2_400_000})
        report = run_experiment(config)
        self.assertEqual(report.goodput, report.baseline_goodput)
        self.assertGreater(report.goodput, 0.0)
        self.assertLessEqual(report.goodput, 1.0)

    def test_decoupled_experiment(self):
        config = tiny_config()
        report = run_decoupled(config)
        self.assertEqual(report.method, "decoupled")
        self.assertEqual(report.final_step, 37)
        self.assertTrue(np.isfinite(report.final_loss))
        self.assertEqual(len(report.admitted), 36)
        self.assertGreaterEqual(report.mean_admitted, 1.0)
        self.assertIn("learner_1", report.checksums)
        self.assertEqual(report.summary()["syncer_checksum"], report.checksums["syncer"])

    def test_loss_curve_sampling(self):
        report = run_decoupled(tiny_config(), eval_every=6)
        steps = [point[0] for point in report.loss_curve]
        self.assertEqual(len(steps), 6)
        self.assertEqual(steps, sorted(steps))

    def test_loss_tracker_every(self):
        config = tiny_config()
        workload = TaskWorkload.from_config(config)
        tracker = LossTracker(workload, every=4)
        Simulation(config, workload, observer=tracker).run()
        self.assertEqual(len(tracker.curve), 9)
        self.assertTrue(all(np.isfinite(loss) for _, _, loss in tracker.curve))


class TestReportGenerator(unittest.TestCase):
    """CSV / JSON / Excel 报表"""

    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_write_experiment(self):
        paths = ReportGenerator(self.dir).write_experiment(_report(), "run")
        self.assertEqual(set(paths), {"json", "csv", "curve"})
        with open(paths["json"], encoding="utf-8") as f:
            data = json.load(f)
        self.assertEqual(data["method"], "decoupled")
        self.assertEqual(data["admitted"], [1, 2, 2])
        curve = pd.read_csv(paths["curve"])
        self.assertEqual(list(curve.columns), ["t", "time", "loss"])
        self.assertEqual(len(curve), 3)

    def test_no_curve_file_without_curve(self):
        paths = save_report(_report(loss_curve=[]), self.dir)
        self.assertNotIn("curve", paths)

    def test_compare_and_frame(self):
        generator = ReportGenerator(self.dir)
        reports = [_report(), _report(method="dp", final_loss=0.45)]
        frame = pd.read_csv(generator.compare(reports))
        self.assertEqual(list(frame["method"]), ["decoupled", "dp"])
        self.assertEqual(len(report_frame(reports)), 2)

    def test_write_workbook(self):
        frame = pd.DataFrame({"M": [1, 4], "goodput": [0.5, 0.9]})
        path = ReportGenerator(self.dir).write_workbook({"chaos": frame, "summary": frame}, "book",
                                                        title="故障网格")
        wb = load_workbook(path)
        self.assertEqual(wb.sheetnames, ["chaos", "summary"])
        ws = wb["chaos"]
        self.assertEqual(ws["A3"].value, "M")
        self.assertTrue(ws["A3"].fill.start_color.rgb.endswith("366092"))
        self.assertEqual(ws["B5"].value, 0.9)

    def test_save_table(self):
        path = save_table(pd.DataFrame({"a": [1, 2, 3]}), self.dir, "table")
        self.assertTrue(path.exists())
        self.assertEqual(len(pd.read_csv(path)), 3)


class TestVisualizer(unittest.TestCase):
    """图表输出"""

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.viz = ExperimentVisualizer(self.dir)

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def test_loss_curves(self):
        path = self.viz.loss_curves([_report(), _report(method="dp")])
        self.assertTrue(os.path.exists(path))

    def test_goodput_heatmap(self):
        table = pd.DataFrame({
            "M": [1, 1, 4, 4, 4],
            "n_chip": [150_000, 300_000, 150_000, 300_000, 300_000],
            "elastic": [True, True, True, True, False],
            "goodput": [0.4, 0.2, 0.9, 0.8, 0.3],
        })
        path = self.viz.goodput_heatmap(table)
        self.assertTrue(os.path.exists(path))

    def test_admitted_histogram(self):
        path = self.viz.admitted_histogram({"grace": _report(), "plain": _report(admitted=[1, 1, 2])})
        self.assertTrue(os.path.exists(path))


def run_tests():
    """运行所有测试"""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for test_class in [TestReferenceEquivalence, TestExperiments, TestReportGenerator, TestVisualizer]:
        suite.addTests(loader.loadTestsFromTestCase(test_class))
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
