"""
分片方案
按层、按张量、按贪心装箱三种策略把模型张量划分为 P 个分片，并分配同步偏移
"""
import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from src.core.errors import InfeasiblePlanError, RangeError
from src.core.params import TensorSpec

logger = logging.getLogger(__name__)


@dataclass
class FragmentPlan:
    """
    分片方案

    fragments[p] 给出分片 p 的张量名（按方案顺序），offsets[p] 是同步偏移 t_p。
    """
    P: int
    fragments: Dict[int, List[str]]
    offsets: Dict[int, int] = field(default_factory=dict)
    H: Optional[int] = None

    def __post_init__(self):
        seen = {}
        for p, names in self.fragments.items():
            if not 0 <= p < self.P:
                raise RangeError(f"分片编号 {p} 超出范围")
            for name in names:
                if name in seen:
                    raise InfeasiblePlanError(f"张量 {name} 同时属于分片 {seen[name]} 和 {p}")
                seen[name] = p
        for p in range(self.P):
            self.fragments.setdefault(p, [])
        if len(set(self.offsets.values())) != len(self.offsets):
            raise InfeasiblePlanError("同步偏移必须互不相同")
        if self.H is not None and self.P > self.H:
            raise InfeasiblePlanError(f"P={self.P} 大于 H={self.H}")

    @property
    def assignment(self) -> Dict[str, int]:
        return {name: p for p, names in self.fragments.items() for name in names}

    def tensors_of(self, p: int) -> List[str]:
        if not 0 <= p < self.P:
            raise RangeError(f"分片编号 {p} 超出范围 [0, {self.P})")
        return list(self.fragments[p])

    def fragment_at(self, t: int) -> Optional[int]:
        """第 t 个同步步需要同步的分片，没有则返回 None"""
        if self.H is None:
            raise InfeasiblePlanError("方案尚未分配偏移")
        phase = t % self.H
        for p, offset in self.offsets.items():
            if offset == phase:
                return p
        return None

    def covers(self, model: Sequence[TensorSpec]) -> bool:
        return sorted(self.assignment) == sorted(t.name for t in model)


def _non_transformer(model: Sequence[TensorSpec]) -> List[str]:
    return [t.name for t in model if t.kind != "transformer"]


def plan_layer(model: Sequence[TensorSpec], L: int, P: int) -> FragmentPlan:
    """
    按层分片：分片 0 放所有非 transformer 张量，其余层按步长轮转

    Args:
        model: 张量列表
        L: transformer 层数
        P: 分片数

    Returns:
        FragmentPlan
    """
    if P < 1 or P - 1 > L:
        raise InfeasiblePlanError(f"P-1={P - 1} 超过层数 L={L}")
    fragments: Dict[int, List[str]] = {0: _non_transformer(model)}
    for spec in model:
        if spec.kind != "transformer":
            continue
        if spec.layer is None or not 1 <= spec.layer <= L:
            raise InfeasiblePlanError(f"张量 {spec.name} 缺少合法层号")
        p = 0 if P == 1 else 1 + (spec.layer % (P - 1))
        fragments.setdefault(p, []).append(spec.name)
    return FragmentPlan(P, fragments)


def plan_tensor(model: Sequence[TensorSpec], P: int) -> FragmentPlan:
    """按张量分片：transformer 张量按序号步长分到 P-1 个分片"""
    transformer = [t.name for t in model if t.kind == "transformer"]
    if P < 1 or len(transformer) < P - 1:
        raise InfeasiblePlanError(f"transformer 张量数 {len(transformer)} 少于 P-1={P - 1}")
    fragments: Dict[int, List[str]] = {0: _non_transformer(model)}
    for j, name in enumerate(transformer, 1):
        p = 0 if P == 1 else 1 + (j % (P - 1))
        fragments.setdefault(p, []).append(name)
    return FragmentPlan(P, fragments)


def plan_balanced(model: Sequence[TensorSpec], P: int) -> FragmentPlan:
    """
    均衡张量分片（贪心数划分）

    张量按大小降序（同大小按名称）依次放入当前最轻的分片，同负载时取编号最小的分片。
    """
    if P < 1 or len(model) < P:
        raise InfeasiblePlanError(f"张量数 {len(model)} 少于分片数 {P}")
    ordered = sorted(model, key=lambda t: (-t.size, t.name))
    heap = [(0, p) for p in range(P)]
    fragments: Dict[int, List[str]] = {p: [] for p in range(P)}
    for spec in ordered:
        load, p = heapq.heappop(heap)
        fragments[p].append(spec.name)
        heapq.heappush(heap, (load + spec.size, p))
    return FragmentPlan(P, fragments)


def assign_offsets(plan: FragmentPlan, H: int) -> FragmentPlan:
    """分片 p 在 t mod H = p 时同步"""
    if plan.P > H:
        raise InfeasiblePlanError(f"P={plan.P} 大于 H={H}")
    return FragmentPlan(plan.P, {p: list(n) for p, n in plan.fragments.items()},
                        {p: p for p in range(plan.P)}, H)


def plan_from_strategy(model: Sequence[TensorSpec], strategy: str, P: int, H: int,
                       layers: Optional[int] = None) -> FragmentPlan:
    """按策略名生成带偏移的方案"""
    if strategy == "layer":
        if layers is None:
            layers = max((t.layer or 0) for t in model)
        plan = plan_layer(model, layers, P)
    elif strategy == "tensor":
        plan = plan_tensor(model, P)
    elif strategy == "balanced":
        plan = plan_balanced(model, P)
    else:
        raise InfeasiblePlanError(f"未知分片策略: {strategy}")
    plan = assign_offsets(plan, H)
    empty = [p for p in range(plan.P) if not plan.fragments[p]]
    if empty:
        logger.warning(f"分片 {empty} 为空，对应同步步不传输数据")
    return plan


def plan_loads(plan: FragmentPlan, model: Sequence[TensorSpec]) -> List[int]:
    """各分片元素总数"""
    sizes = {t.name: t.size for t in model}
    return [sum(sizes[n] for n in plan.fragments[p]) for p in range(plan.P)]


def optimal_max_load(sizes: Sequence[int], P: int) -> int:
    """穷举（分支定界）求最优最大分片负载，用于小规模校验"""
    items = sorted(sizes, reverse=True)
    if not items:
        return 0
    # 贪心结果作为初始上界，max(平均负载, 最大张量) 为下界
    greedy = [0] * P
    for size in items:
        greedy[greedy.index(min(greedy))] += size
    lower = max(items[0], -(-sum(items) // P))
    best = [max(greedy)]
    loads = [0] * P

    def search(i: int, current_max: int) -> None:
        if current_max >= best[0] or best[0] == lower:
            return
        if i == len(items):
            best[0] = current_max
            return
        tried = set()
        for b in range(P):
            if loads[b] in tried:
                continue
            tried.add(loads[b])
            loads[b] += items[i]
            search(i + 1, max(current_max, loads[b]))
            loads[b] -= items[i]

    search(0, 0)
    return best[0]


def plan_to_text(plan: FragmentPlan, model: Sequence[TensorSpec]) -> str:
    """每个分片一行: fragment_id, offset, 张量名, 总大小"""
    loads = plan_loads(plan, model)
    lines = []
    for p in range(plan.P):
        offset = plan.offsets.get(p, "")
        lines.append(f"{p}\t{offset}\t{','.join(plan.fragments[p])}\t{loads[p]}")
    return "\n".join(lines) + "\n"


def plan_from_text(text: str, H: Optional[int] = None) -> FragmentPlan:
    fragments: Dict[int, List[str]] = {}
    offsets: Dict[int, int] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        fid, offset, names, _size = line.split("\t")
        p = int(fid)
        fragments[p] = [n for n in names.split(",") if n]
        if offset != "":
            offsets[p] = int(offset)
    return FragmentPlan(len(fragments), fragments, offsets, H)
