"""
带宽模型测试
环形流量系数、利用率与所需带宽互为反函数、带宽表形状
"""
import math
import os
import sys
import unittest
from dataclasses import replace

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.bandwidth.model import (
    BandwidthQuery, DEFAULT_TARGETS, bandwidth_table, compute_utilization, exposed_comm_time,
    hidden_threshold, required_bandwidth, ring_factor, utilization_curve,
)
from src.core.errors import RangeError

# 5B 参数、bf16
MODEL_BITS = 5e9 * 16


def _query(**overrides) -> BandwidthQuery:
    fields = dict(model_bits=MODEL_BITS, step_time=1.0, datacenters=2, bandwidth=1e9, method="dp", H=24, tau=2)
    fields.update(overrides)
    return BandwidthQuery(**fields)


class TestRingFactor(unittest.TestCase):
    """环形 all-reduce 系数"""

    def test_values(self):
        self.assertEqual(ring_factor(2), 1.0)
        self.assertEqual(ring_factor(8), 1.75)

    def test_datacenter_ratio(self):
        """数据并行下 8 个数据中心所需带宽是 2 个的 1.75 倍"""
        two = required_bandwidth(_query(datacenters=2), 0.9)
        eight = required_bandwidth(_query(datacenters=8), 0.9)
        self.assertAlmostEqual(eight / two, 1.75, places=12)

    def test_invalid(self):
        with self.assertRaises(RangeError):
            ring_factor(1)


class TestUtilization(unittest.TestCase):
    """计算利用率"""

    def test_payload(self):
        self.assertEqual(_query().payload_bits, MODEL_BITS)
        self.assertEqual(_query(method="decoupled").payload_bits, MODEL_BITS / 24)
        self.assertEqual(_query(method="decoupled_int4").payload_bits, MODEL_BITS / 24 / 4)
        self.assertEqual(_query(method="decoupled", fragment_bits=100.0).payload_bits, 100.0)

    def test_dp_exposed_time(self):
        q = _query(bandwidth=MODEL_BITS)
        self.assertAlmostEqual(exposed_comm_time(q), 1.0)
        self.assertAlmostEqual(compute_utilization(q), 0.5)

    def test_decoupled_hides_under_overlap(self):
        q = _query(method="decoupled", bandwidth=MODEL_BITS / 24)
        self.assertEqual(exposed_comm_time(q), 0.0)
        self.assertEqual(compute_utilization(q), 1.0)

    def test_inverse_round_trip(self):
        """required_bandwidth 与 compute_utilization 互为反函数"""
        for method in ("dp", "decoupled", "decoupled_int4"):
            for D in (2, 8):
                for target in DEFAULT_TARGETS:
                    q = _query(method=method, datacenters=D, step_time=5.0, tau=0 if method == "dp" else 2)
                    bw = required_bandwidth(q, target)
                    cu = compute_utilization(replace(q, bandwidth=bw))
                    self.assertAlmostEqual(cu, target, delta=1e-9, msg=f"{method} D={D} cu={target}")

    def test_decoupled_needs_far_less(self):
        """解耦方案所需带宽至少小 H 倍，int4 再小 4 倍"""
        for target in DEFAULT_TARGETS:
            dp = required_bandwidth(_query(), target)
            dec = required_bandwidth(_query(method="decoupled"), target)
            int4 = required_bandwidth(_query(method="decoupled_int4"), target)
            self.assertGreaterEqual(dp / dec, 24.0)
            self.assertAlmostEqual(dec / int4, 4.0, places=9)

    def test_overhead_scales_linearly(self):
        base = required_bandwidth(_query(), 0.9)
        self.assertAlmostEqual(required_bandwidth(_query(overhead=1.5), 0.9) / base, 1.5, places=12)

    def test_curve_is_monotone(self):
        curve = utilization_curve(_query(method="decoupled"), [1e8, 1e9, 1e10, 1e11])
        self.assertEqual(list(curve.columns), ["bandwidth_gbps", "cu"])
        self.assertTrue(curve["cu"].is_monotonic_increasing)

    def test_invalid(self):
        with self.assertRaises(RangeError):
            _query(method="ring")
        with self.assertRaises(RangeError):
            _query(datacenters=1)
        with self.assertRaises(RangeError):
            _query(step_time=0.0)
        with self.assertRaises(RangeError):
            required_bandwidth(_query(), 1.0)
        with self.assertRaises(RangeError):
            required_bandwidth(_query(), 0.0)
        with self.assertRaises(RangeError):
            required_bandwidth(_query(method="decoupled", tau=0), 1.0)


class TestHiddenThreshold(unittest.TestCase):
    """通信完全隐藏的带宽门槛"""

    def test_threshold(self):
        q = _query(method="decoupled")
        bw = hidden_threshold(q)
        self.assertAlmostEqual(bw, MODEL_BITS / 24 / 2)
        self.assertAlmostEqual(compute_utilization(replace(q, bandwidth=bw)), 1.0, places=12)
        self.assertLess(compute_utilization(replace(q, bandwidth=bw / 2)), 1.0)

    def test_never_hidden(self):
        self.assertEqual(hidden_threshold(_query()), math.inf)
        self.assertEqual(hidden_threshold(_query(method="decoupled", tau=0)), math.inf)


class TestBandwidthTable(unittest.TestCase):
    """带宽表"""

    def test_shape(self):
        table = bandwidth_table(5e9)
        self.assertEqual(len(table), 12)
        self.assertEqual(list(table.columns),
                         ["step_time", "datacenters", "method", "cu_50", "cu_75", "cu_90", "cu_95", "cu_99"])

    def test_ordering(self):
        """同一行里目标越高所需带宽越大；每格里 dp > decoupled > int4"""
        table = bandwidth_table(5e9)
        cols = [c for c in table.columns if c.startswith("cu_")]
        for _, row in table.iterrows():
            values = [row[c] for c in cols]
            self.assertEqual(values, sorted(values))
        for (step_time, D), group in table.groupby(["step_time", "datacenters"]):
            by_method = group.set_index("method")["cu_90"]
            self.assertGreater(by_method["dp"], by_method["decoupled"])
            self.assertGreater(by_method["decoupled"], by_method["decoupled_int4"])

    def test_units_are_gbps(self):
        table = bandwidth_table(5e9, step_times=[1.0], dcs=[2], targets=[0.5])
        dp = table[table["method"] == "dp"]["cu_50"].iloc[0]
        self.assertAlmostEqual(dp, 80.0)


def run_tests():
    """运行所有测试"""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for test_class in [TestRingFactor, TestUtilization, TestHiddenThreshold, TestBandwidthTable]:
        suite.addTests(loader.loadTestsFromTestCase(test_class))
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
