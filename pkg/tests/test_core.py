"""
核心模型测试
参数存储、配置解析与校验、命名随机流、帧编码
"""
import os
import sys
import unittest

import numpy as np
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.helpers import tiny_config
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.config import config_hash, load_config, parse_key_values
from src.core.errors import ConfigError, DimensionError, RangeError
from src.core.params import (
    ParamStore, TensorSpec, axpy, checksum, decode_fragment, encode_fragment, fragment_slice, l2_norm,
)
from src.core.rng import named_stream
from src.fragmentation.planners import plan_balanced
from src.runtime.messages import Message, MessageKind, decode_frame, encode_frame


def _model():
    return [
        TensorSpec("emb", 6, "embedding", None, (2, 3)),
        TensorSpec("l1", 4, "transformer", 1),
        TensorSpec("l2", 5, "transformer", 2),
        TensorSpec("head", 3, "other"),
    ]


class TestParamStore(unittest.TestCase):
    """测试参数存储"""

    def test_invalid_tensor(self):
        """大小为 0 或形状不符的张量"""
        with self.assertRaises(DimensionError):
            TensorSpec("x", 0)
        with self.assertRaises(DimensionError):
            TensorSpec("x", 5, shape=(2, 3))
        with self.assertRaises(RangeError):
            TensorSpec("x", 5, kind="conv")

    def test_duplicate_names(self):
        with self.assertRaises(DimensionError):
            ParamStore([TensorSpec("a", 2), TensorSpec("a", 3)])

    def test_tensor_views_cover_values(self):
        """张量视图互不相交且覆盖全部参数"""
        store = ParamStore(_model())
        self.assertEqual(store.total_size, 18)
        for i, spec in enumerate(store.tensors):
            store.tensor(spec.name)[...] = i + 1
        self.assertTrue(np.all(store.values > 0))
        self.assertEqual(store.tensor("emb").shape, (2, 3))

    def test_fragment_slice_round_trip(self):
        """经每个分片切片写入后，整体读取得到写入的值"""
        store = ParamStore(_model())
        plan = plan_balanced(_model(), 3)
        written = np.zeros(store.total_size)
        for p in range(plan.P):
            frag = fragment_slice(store, plan, p)
            values = np.arange(len(frag), dtype=np.float64) + 100 * p
            frag.assign(values)
            written[frag.index] = values
        np.testing.assert_array_equal(store.values, written)

    def test_fragment_slice_bad_id(self):
        plan = plan_balanced(_model(), 2)
        with self.assertRaises(RangeError):
            fragment_slice(ParamStore(_model()), plan, 2)

    def test_axpy_and_norm(self):
        np.testing.assert_array_equal(axpy(2.0, [1, 2], [1, 1]), [3.0, 5.0])
        self.assertAlmostEqual(l2_norm([3.0, 4.0]), 5.0)
        with self.assertRaises(DimensionError):
            axpy(1.0, [1, 2], [1, 2, 3])

    def test_checksum(self):
        a = np.array([1.0, 2.0, 3.0])
        self.assertEqual(checksum(a), checksum(a.copy()))
        self.assertNotEqual(checksum(a), checksum(a + 1e-15))

    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=0, max_size=40),
           st.integers(min_value=0, max_value=2 ** 32 - 1))
    @hyp_settings(max_examples=50, deadline=None)
    def test_fragment_payload_bits(self, values, fragment_id):
        """分片负载按位保持数值"""
        fid, decoded = decode_fragment(encode_fragment(fragment_id, values))
        self.assertEqual(fid, fragment_id)
        self.assertEqual(checksum(decoded), checksum(np.asarray(values, dtype=np.float64)))

    def test_fragment_payload_truncated(self):
        data = encode_fragment(1, [1.0, 2.0])
        with self.assertRaises(DimensionError):
            decode_fragment(data[:-3])


class TestConfig(unittest.TestCase):
    """测试配置"""

    def test_defaults(self):
        config = load_config()
        self.assertEqual(config.runtime.fragments, 12)
        self.assertEqual(config.runtime.sync_interval, 12)
        self.assertEqual(config.runtime.overlap, 2)
        self.assertEqual(config.runtime.total_steps, 240)

    def test_parse_key_values(self):
        text = """
        # 注释
        seed = 3
        runtime.num_learners = 4
        runtime.speed_classes = 1.0, 0.5
        """
        data = parse_key_values(text)
        self.assertEqual(data["seed"], "3")
        self.assertEqual(data["runtime"]["num_learners"], "4")
        self.assertEqual(data["runtime"]["speed_classes"], ["1.0", "0.5"])

    def test_unknown_section(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_key_values("network.latency = 1")
        self.assertIn("network.latency", ctx.exception.fields)

    def test_cross_validation(self):
        """P > H 与 K > M 报出对应字段"""
        with self.assertRaises(ConfigError) as ctx:
            tiny_config(runtime={"fragments": 13, "quorum": 3})
        self.assertIn("runtime.fragments", ctx.exception.fields)
        self.assertIn("runtime.quorum", ctx.exception.fields)

    def test_type_error_fields(self):
        with self.assertRaises(ConfigError) as ctx:
            tiny_config(runtime={"num_learners": "many"})
        self.assertTrue(any("num_learners" in key for key in ctx.exception.fields))

    def test_hash_ignores_presentation_fields(self):
        """模式、输出目录等不改变配置哈希"""
        config = tiny_config()
        self.assertEqual(config_hash(config), config_hash(config.updated(
            output_dir="elsewhere", runtime={"mode": "live", "live_time_scale": 0.5})))
        self.assertNotEqual(config_hash(config), config_hash(config.updated(seed=1)))
        self.assertNotEqual(config_hash(config), config_hash(config.updated(runtime={"overlap": 1})))

    def test_load_key_value_file(self):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "exp.conf"
            path.write_text("seed = 5\nruntime.num_learners = 3\n", encoding="utf-8")
            config = load_config(path)
            self.assertEqual(config.seed, 5)
            self.assertEqual(config.runtime.num_learners, 3)
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / "missing.conf")


class TestNamedStream(unittest.TestCase):
    """测试命名随机流"""

    def test_reproducible(self):
        a = named_stream(7, "data", 1).random(5)
        b = named_stream(7, "data", 1).random(5)
        np.testing.assert_array_equal(a, b)

    def test_independent_purposes(self):
        a = named_stream(7, "data", 1).random(5)
        self.assertFalse(np.array_equal(a, named_stream(7, "chaos", 1).random(5)))
        self.assertFalse(np.array_equal(a, named_stream(7, "data", 2).random(5)))


class TestFrames(unittest.TestCase):
    """测试长度前缀帧"""

    def test_round_trip(self):
        msg = Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, VectorClock({0: 3, SYNCER_ID: 7}),
                      {"fragment": 2, "stamp": 7}, fragment=np.array([0.5, -1.25, 3.0]))
        data = encode_frame(msg) + b"\x00\x01"
        decoded, used = decode_frame(data)
        self.assertEqual(used, len(data) - 2)
        self.assertEqual(decoded.kind, MessageKind.GLOBAL_FRAGMENT)
        self.assertEqual(decoded.sender, SYNCER_ID)
        self.assertEqual(decoded.meta, {"fragment": 2, "stamp": 7})
        self.assertEqual(decoded.vclock, msg.vclock)
        np.testing.assert_array_equal(decoded.fragment, msg.fragment)

    def test_incomplete_frame(self):
        msg = Message(MessageKind.METADATA, 1, VectorClock({1: 1}), {"t_m": 1})
        data = encode_frame(msg)
        with self.assertRaises(DimensionError):
            decode_frame(data[:-1])

    def test_state_payload_not_encodable(self):
        msg = Message(MessageKind.RECOVERY_PAYLOAD, 1, VectorClock(), {}, state=object())
        with self.assertRaises(DimensionError):
            encode_frame(msg)


def run_tests():
    """运行所有测试"""
    test_suite = unittest.TestSuite()
    for test_class in [TestParamStore, TestConfig, TestNamedStream, TestFrames]:
        test_suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    result = unittest.TextTestRunner(verbosity=2).run(test_suite)
    return result.wasSuccessful()


if __name__ == "__main__":
    if not run_tests():
        sys.exit(1)
