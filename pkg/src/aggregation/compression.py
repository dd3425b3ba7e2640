"""
外梯度压缩
对称的逐分片 int4 量化，码值范围 [-7, 7]
"""
from typing import Tuple

import numpy as np

INT4_LEVELS = 7


def quantize_int4(x) -> Tuple[np.ndarray, float]:
    """
    int4 量化

    Args:
        x: 分片向量

    Returns:
        (codes, scale): codes 为 int8 存放的 4 位整数，scale = max|x| / 7
    """
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    peak = float(np.max(np.abs(vec))) if vec.size else 0.0
    if peak == 0.0:
        return np.zeros(vec.shape, dtype=np.int8), 0.0
    scale = peak / INT4_LEVELS
    codes = np.clip(np.round(vec / scale), -INT4_LEVELS, INT4_LEVELS).astype(np.int8)
    return codes, scale


def dequantize_int4(codes: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * scale


def int4_roundtrip(x) -> np.ndarray:
    codes, scale = quantize_int4(x)
    return dequantize_int4(codes, scale)


def pack_int4(codes: np.ndarray) -> bytes:
    """两个码值打包进一个字节（偏移 8 存为无符号半字节）"""
    nibbles = (np.asarray(codes, dtype=np.int16) + 8).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(8))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(packed.size * 2, dtype=np.int16)
    nibbles[0::2] = packed & 0x0F
    nibbles[1::2] = packed >> 4
    return (nibbles[:count] - 8).astype(np.int8)
