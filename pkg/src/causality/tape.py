"""
事件磁带
记录因果事件（向量时钟、计数器、故障与恢复），JSON Lines 格式，第 0 行为头部
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, IO, Iterator, List, Optional, Union

from src.causality.vector_clock import VectorClock
from src.core.errors import ReplayIntegrityError, TapeWriteError

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "step",
    "metadata_recv",
    "quorum_close",
    "fragment_pull",
    "fragment_apply",
    "failure",
    "recovery",
    "snapshot_begin",
    "snapshot_end",
    "checkpoint",
)

TAPE_FORMAT = "ddl-tape/1"


@dataclass
class TapeEvent:
    """一条因果事件"""
    seq: int
    worker_id: int
    local_step: int
    vclock: VectorClock
    kind: str
    payload: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ReplayIntegrityError(f"未知事件类型: {self.kind}", self.seq)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seq": self.seq,
            "worker": self.worker_id,
            "step": self.local_step,
            "vclock": self.vclock.to_list(),
            "kind": self.kind,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TapeEvent":
        return cls(
            seq=int(data["seq"]),
            worker_id=int(data["worker"]),
            local_step=int(data["step"]),
            vclock=VectorClock.from_list(data.get("vclock", [])),
            kind=data["kind"],
            payload=data.get("payload") or {},
        )


@dataclass
class TapeHeader:
    """磁带头部"""
    config_hash: str
    seed: int
    M: int
    K: int
    H: int
    P: int
    tau: int
    synthetic: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": TAPE_FORMAT,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "M": self.M, "K": self.K, "H": self.H, "P": self.P, "tau": self.tau,
            "synthetic": self.synthetic,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TapeHeader":
        if data.get("format") != TAPE_FORMAT:
            raise ReplayIntegrityError(f"不支持的磁带格式: {data.get('format')}", 0)
        return cls(data["config_hash"], int(data["seed"]), int(data["M"]), int(data["K"]),
                   int(data["H"]), int(data["P"]), int(data["tau"]), bool(data.get("synthetic", False)))

    @classmethod
    def from_config(cls, config, synthetic: bool = False) -> "TapeHeader":
        from src.core.config import config_hash
        rt = config.runtime
        return cls(config_hash(config), config.seed, rt.num_learners, rt.quorum,
                   rt.sync_interval, rt.fragments, rt.overlap, synthetic)


@dataclass
class Tape:
    header: TapeHeader
    events: List[TapeEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TapeEvent]:
        return iter(self.events)

    def of_kind(self, kind: str) -> List[TapeEvent]:
        return [e for e in self.events if e.kind == kind]

    def of_worker(self, worker: int) -> List[TapeEvent]:
        return [e for e in self.events if e.worker_id == worker]


def record(tape: Tape, event: TapeEvent) -> Tape:
    """追加事件并赋予下一个序号"""
    event.seq = len(tape.events)
    tape.events.append(event)
    return tape


class TapeRecorder:
    """
    磁带记录器

    单一串行写入端；每条事件写入后立即 flush，写入失败抛出 TapeWriteError 终止运行。
    """

    def __init__(self, header: TapeHeader, path: Optional[Union[str, Path]] = None):
        self.tape = Tape(header)
        self.path = Path(path) if path else None
        self._stream: Optional[IO[str]] = None
        if self.path is not None:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._stream = open(self.path, "w", encoding="utf-8")
                self._write(header.to_dict())
            except OSError as e:
                raise TapeWriteError(f"无法创建磁带文件 {self.path}: {e}") from e

    @property
    def next_seq(self) -> int:
        return len(self.tape.events)

    def _write(self, data: Dict[str, Any]) -> None:
        if self._stream is None:
            return
        try:
            self._stream.write(json.dumps(data, separators=(",", ":")) + "\n")
            self._stream.flush()
        except (OSError, ValueError) as e:
            raise TapeWriteError(f"磁带写入失败: {e}") from e

    def record(self, worker_id: int, local_step: int, vclock: VectorClock, kind: str,
               payload: Optional[Dict[str, Any]] = None) -> TapeEvent:
        event = TapeEvent(self.next_seq, worker_id, local_step, vclock.copy(), kind, payload or {})
        record(self.tape, event)
        self._write(event.to_dict())
        return event

    def close(self) -> None:
        if self._stream is not None:
            self._stream.close()
            self._stream = None
            logger.info(f"磁带已保存: {self.path} ({len(self.tape)} 条事件)")

    def __enter__(self) -> "TapeRecorder":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def write_tape(tape: Tape, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(tape.header.to_dict(), separators=(",", ":")) + "\n")
            for event in tape.events:
                f.write(json.dumps(event.to_dict(), separators=(",", ":")) + "\n")
    except OSError as e:
        raise TapeWriteError(f"磁带写入失败 {path}: {e}") from e
    return path


def read_tape(path: Union[str, Path]) -> Tape:
    """
    读取磁带文件

    Args:
        path: .tape.jsonl 文件

    Returns:
        Tape: 序号必须从 0 开始连续递增
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ReplayIntegrityError(f"磁带为空: {path}", 0)
    tape = Tape(TapeHeader.from_dict(json.loads(lines[0])))
    for expected, line in enumerate(lines[1:]):
        try:
            event = TapeEvent.from_dict(json.loads(line))
        except (KeyError, ValueError) as e:
            raise ReplayIntegrityError(f"磁带事件无法解析: {e}", expected) from e
        if event.seq != expected:
            raise ReplayIntegrityError(f"磁带序号不连续: 期望 {expected}", event.seq)
        tape.events.append(event)
    logger.info(f"读取磁带: {path} ({len(tape)} 条事件)")
    return tape


def tape_bytes(tape: Tape) -> bytes:
    """磁带的规范字节表示，用于比较"""
    lines = [json.dumps(tape.header.to_dict(), separators=(",", ":"))]
    lines.extend(json.dumps(e.to_dict(), separators=(",", ":")) for e in tape.events)
    return ("\n".join(lines) + "\n").encode("utf-8")
