"""
随机数流
每个随机决策使用独立命名的种子流（用途 + 工作者编号），回放时互不消耗
"""
import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64 位 FNV-1a"""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def named_stream(seed: int, purpose: str, worker: int = 0) -> np.random.Generator:
    """
    命名随机流

    Args:
        seed: 实验种子
        purpose: 用途，例如 "data"、"chaos"、"speed"
        worker: 工作者编号

    Returns:
        np.random.Generator
    """
    key = fnv1a64(f"{purpose}:{worker}".encode("utf-8"))
    return np.random.default_rng([int(seed) & _MASK64, key])
