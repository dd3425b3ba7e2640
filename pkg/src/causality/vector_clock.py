"""
向量时钟
每个工作者记录自己的步数以及对其他工作者步数的最新了解，按分量取最大值合并
"""
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from src.core.errors import RangeError

# 同步器在向量时钟中的编号
SYNCER_ID = 0xFFFF


class VectorClock:
    """向量时钟：worker_id → step"""

    def __init__(self, entries: Optional[Dict[int, int]] = None):
        self.entries: Dict[int, int] = dict(entries or {})

    def get(self, worker: int) -> int:
        return self.entries.get(worker, 0)

    def update(self, worker: int, step: int) -> None:
        """把 worker 的分量推进到 step，不允许后退"""
        current = self.entries.get(worker)
        if current is not None and step < current:
            raise RangeError(f"工作者 {worker} 的步数从 {current} 后退到 {step}")
        self.entries[worker] = step

    def tick(self, worker: int) -> int:
        step = self.get(worker) + 1
        self.entries[worker] = step
        return step

    def merge_in(self, other: "VectorClock") -> None:
        """原地合并"""
        for worker, step in other.entries.items():
            if step > self.entries.get(worker, -1):
                self.entries[worker] = step

    def merge(self, other: "VectorClock") -> "VectorClock":
        result = self.copy()
        result.merge_in(other)
        return result

    def copy(self) -> "VectorClock":
        return VectorClock(self.entries)

    # 偏序比较：缺失分量视为 0
    def __le__(self, other: "VectorClock") -> bool:
        return all(step <= other.get(worker) for worker, step in self.entries.items())

    def __lt__(self, other: "VectorClock") -> bool:
        return self <= other and self != other

    def __ge__(self, other: "VectorClock") -> bool:
        return other <= self

    def __gt__(self, other: "VectorClock") -> bool:
        return other < self

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorClock):
            return NotImplemented
        workers = set(self.entries) | set(other.entries)
        return all(self.get(w) == other.get(w) for w in workers)

    def __hash__(self):
        return hash(tuple(sorted((w, s) for w, s in self.entries.items() if s)))

    def concurrent_with(self, other: "VectorClock") -> bool:
        return not (self <= other) and not (other <= self)

    def to_list(self) -> List[List[int]]:
        """序列化为 [[worker, step], ...]，按 worker 排序"""
        return [[w, s] for w, s in sorted(self.entries.items())]

    @classmethod
    def from_list(cls, pairs: Iterable[Sequence[int]]) -> "VectorClock":
        return cls({int(w): int(s) for w, s in pairs})

    def __str__(self) -> str:
        parts = []
        for worker, step in sorted(self.entries.items()):
            name = "S" if worker == SYNCER_ID else f"L{worker}"
            parts.append(f"{name}:{step}")
        return "<" + ", ".join(parts) + ">"

    __repr__ = __str__


def vclock_merge(a: VectorClock, b: VectorClock) -> VectorClock:
    """分量取最大值"""
    return a.merge(b)


def combine(clocks: Iterable[VectorClock]) -> VectorClock:
    result = VectorClock()
    for clock in clocks:
        result.merge_in(clock)
    return result


def vclock_pairs(clock: VectorClock) -> List[Tuple[int, int]]:
    return [(w, s) for w, s in sorted(clock.entries.items())]
