"""
消息与帧编码
学习者与同步器之间的消息类型，以及 TCP 传输使用的长度前缀帧
"""
import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.causality.vector_clock import VectorClock
from src.core.errors import DimensionError
from src.core.params import decode_fragment, encode_fragment

# 元数据、向量时钟等的名义开销
HEADER_BITS = 512


class MessageKind(IntEnum):
    METADATA = 1
    PULL_REQUEST = 2
    FRAGMENT_PAYLOAD = 3
    GLOBAL_FRAGMENT = 4
    RECOVERY_REQUEST = 5
    RECOVERY_PAYLOAD = 6
    PULL_FAILED = 7


@dataclass
class Message:
    """
    消息

    meta 为可 JSON 序列化的字段；fragment 为分片数值；
    state 只在进程内传递（恢复负载），size_bits 覆盖链路上的名义大小。
    """
    kind: MessageKind
    sender: int
    vclock: VectorClock
    meta: Dict[str, Any] = field(default_factory=dict)
    fragment: Optional[np.ndarray] = None
    state: Any = None
    size_bits: Optional[int] = None

    @property
    def bits(self) -> int:
        if self.size_bits is not None:
            return self.size_bits
        bits = HEADER_BITS + 8 * len(json.dumps(self.meta, separators=(",", ":")))
        if self.fragment is not None:
            bits += 64 * int(self.fragment.size)
        return bits


# u32 length, u8 kind
_FRAME_HEAD = struct.Struct("<IB")
_VCLOCK_COUNT = struct.Struct("<H")
_VCLOCK_ENTRY = struct.Struct("<HQ")
_PAYLOAD_HEAD = struct.Struct("<HI")


def encode_frame(msg: Message) -> bytes:
    """
    帧: u32 长度, u8 类型, 向量时钟 (u16 条数, 每条 u16 编号 + u64 步数), 负载

    负载为 u16 发送者 + u32 JSON 长度 + JSON 元数据 + 可选分片块。
    """
    if msg.state is not None:
        raise DimensionError("进程内状态负载无法编码为帧")
    pairs = sorted(msg.vclock.entries.items())
    body = bytearray([msg.kind])
    body += _VCLOCK_COUNT.pack(len(pairs))
    for worker, step in pairs:
        body += _VCLOCK_ENTRY.pack(worker, step)
    meta = json.dumps(msg.meta, separators=(",", ":")).encode("utf-8")
    body += _PAYLOAD_HEAD.pack(msg.sender, len(meta)) + meta
    if msg.fragment is not None:
        body += encode_fragment(int(msg.meta.get("fragment", 0)), msg.fragment)
    return struct.pack("<I", len(body)) + bytes(body)


def decode_frame(data: bytes) -> Tuple[Message, int]:
    """
    解码一帧

    Returns:
        (消息, 消耗的字节数)
    """
    if len(data) < _FRAME_HEAD.size:
        raise DimensionError("帧头不完整")
    length, kind = _FRAME_HEAD.unpack_from(data, 0)
    end = 4 + length
    if len(data) < end:
        raise DimensionError(f"帧不完整: 需要 {end} 字节，实际 {len(data)}")
    pos = _FRAME_HEAD.size
    (count,) = _VCLOCK_COUNT.unpack_from(data, pos)
    pos += _VCLOCK_COUNT.size
    entries = {}
    for _ in range(count):
        worker, step = _VCLOCK_ENTRY.unpack_from(data, pos)
        entries[worker] = step
        pos += _VCLOCK_ENTRY.size
    sender, meta_len = _PAYLOAD_HEAD.unpack_from(data, pos)
    pos += _PAYLOAD_HEAD.size
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    fragment = None
    if pos < end:
        _, fragment = decode_fragment(bytes(data[pos:end]))
    return Message(MessageKind(kind), sender, VectorClock(entries), meta, fragment), end
