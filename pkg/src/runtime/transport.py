"""
消息传输
链路模型（延迟 + 比特数/带宽）、确定性模式下的逐链路 FIFO 投递时刻，以及进程内队列通道
"""
import logging
import math
import queue
import threading
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple

from src.core.errors import ChannelClosedError, RangeError
from src.runtime.messages import Message

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkModel:
    """链路：固定延迟加串行化时间"""
    latency: float = 0.0
    bandwidth_bps: float = math.inf

    def __post_init__(self):
        if self.latency < 0 or self.bandwidth_bps <= 0:
            raise RangeError("延迟必须 ≥ 0，带宽必须 > 0")

    @classmethod
    def from_settings(cls, link) -> "LinkModel":
        return cls(link.latency, link.bandwidth_bps)

    def delay(self, bits: int) -> float:
        if math.isinf(self.bandwidth_bps):
            return self.latency
        return self.latency + bits / self.bandwidth_bps


class DeterministicTransport:
    """
    确定性传输

    每条有向链路记录上一条消息的投递时刻，保证 FIFO：
    delivery = max(now + delay, 上一条的投递时刻)。
    """

    def __init__(self, link: LinkModel):
        self.link = link
        self._last: Dict[Tuple[int, int], float] = {}
        self._closed: Set[int] = set()
        self.sent = 0
        self.dropped = 0

    def close(self, endpoint: int) -> None:
        self._closed.add(endpoint)

    def reopen(self, endpoint: int) -> None:
        self._closed.discard(endpoint)

    def is_closed(self, endpoint: int) -> bool:
        return endpoint in self._closed

    def send(self, now: float, src: int, dst: int, msg: Message) -> Optional[float]:
        """
        计算投递时刻

        Returns:
            投递时刻；目的端已关闭时返回 None 并计入丢弃
        """
        if dst in self._closed:
            self.dropped += 1
            logger.debug(f"通道已关闭，丢弃 {msg.kind.name}: {src} → {dst}")
            return None
        key = (src, dst)
        at = max(now + self.link.delay(msg.bits), self._last.get(key, now))
        self._last[key] = at
        self.sent += 1
        return at


class Channel:
    """进程内 FIFO 通道（实时模式）"""

    def __init__(self, name: str = ""):
        self.name = name
        self._queue: "queue.Queue[Message]" = queue.Queue()
        self._closed = threading.Event()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, msg: Message) -> None:
        if self.closed:
            raise ChannelClosedError(f"通道 {self.name} 已关闭")
        self._queue.put(msg)

    def poll(self, timeout: Optional[float] = None) -> Optional[Message]:
        """取一条消息，超时返回 None"""
        try:
            if timeout is not None and timeout <= 0:
                return self._queue.get_nowait()
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self._closed.set()

    def __len__(self) -> int:
        return self._queue.qsize()
