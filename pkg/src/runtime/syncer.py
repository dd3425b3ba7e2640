"""
同步器
元数据表、轮次资格判定、分片合并与外层优化、全局分片广播，以及运行指标
"""
import bisect
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.aggregation.merging import LearnerContribution, MergeConfig, merge_fragment, weight
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.params import ParamStore
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import FragmentPlan
from src.optim.outer import OuterOptState, outer_lr_at, outer_step
from src.runtime.grace import Ema
from src.runtime.messages import Message, MessageKind

logger = logging.getLogger(__name__)


@dataclass
class LearnerInfo:
    """元数据表中一个学习者的最新报告（后写覆盖）"""
    t_m: int = 0
    t_global_known: int = 0
    c_steps: List[int] = field(default_factory=list)
    c_tokens: List[int] = field(default_factory=list)
    fresh: bool = False
    last_time: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "t_m": self.t_m, "t_global_known": self.t_global_known,
            "c_steps": list(self.c_steps), "c_tokens": list(self.c_tokens),
            "fresh": self.fresh, "last_time": self.last_time,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerInfo":
        return cls(int(data["t_m"]), int(data["t_global_known"]), [int(x) for x in data["c_steps"]],
                   [int(x) for x in data["c_tokens"]], bool(data["fresh"]), data.get("last_time"))


@dataclass
class SyncerState:
    """
    同步器状态

    broadcasts 为已发出广播的同步步（升序），history[stamp] = (p, Θ_p)。
    """
    t: int
    theta: ParamStore
    outer: Dict[int, OuterOptState]
    K: int
    shards: int
    table: Dict[int, LearnerInfo] = field(default_factory=dict)
    broadcasts: List[int] = field(default_factory=list)
    history: Dict[int, Tuple[int, np.ndarray]] = field(default_factory=dict)
    vclock: VectorClock = field(default_factory=VectorClock)


@dataclass
class MergeOutcome:
    t: int
    p: int
    contributors: List[int]
    weights: List[float]
    values: Optional[np.ndarray]


@dataclass
class RoundRecord:
    t: int
    p: Optional[int]
    admitted: int
    contributed: int
    quorum_wait: float
    grace: float


@dataclass
class RunMetrics:
    """运行指标：可用性问题只计数与记录日志，不抛异常"""
    rounds: List[RoundRecord] = field(default_factory=list)
    stalls: int = 0
    drops: int = 0
    failed_pulls: int = 0
    xi_step: List[float] = field(default_factory=list)
    xi_quorum: List[float] = field(default_factory=list)
    xi_sync: List[float] = field(default_factory=list)
    grace_windows: List[float] = field(default_factory=list)
    recovery_staleness: List[int] = field(default_factory=list)
    recovery_retries: int = 0
    recoveries: int = 0
    snapshots: List[int] = field(default_factory=list)
    failed_snapshots: int = 0
    learner_steps: Dict[int, int] = field(default_factory=dict)
    # 学习者算完一步到开始下一步之间等待同步器的时间，不含故障停顿
    learner_wait: Dict[int, float] = field(default_factory=dict)

    def sync_rounds(self) -> List[RoundRecord]:
        return [r for r in self.rounds if r.p is not None]

    def mean_admitted(self) -> float:
        rounds = self.sync_rounds()
        return float(np.mean([r.contributed for r in rounds])) if rounds else 0.0


class Syncer:
    """同步器处理逻辑，调度方式由驱动者决定"""

    def __init__(self, state: SyncerState, plan: FragmentPlan, layout: FragmentLayout,
                 merge_config: MergeConfig, tau: int, total_steps: int, optim=None,
                 ema_decay: float = 0.9, computes: bool = True):
        self.state = state
        self.plan = plan
        self.layout = layout
        self.merge_config = merge_config
        self.tau = tau
        self.total_steps = total_steps
        self.optim = optim
        self.computes = computes
        self.xi_step = Ema(ema_decay)
        self.xi_quorum = Ema(ema_decay)
        self.xi_sync = Ema(ema_decay)
        self.state.vclock.update(SYNCER_ID, self.state.t)

    @classmethod
    def create(cls, theta: ParamStore, plan: FragmentPlan, layout: FragmentLayout, config,
               computes: bool = True) -> "Syncer":
        """由实验配置构建，t 从 1 开始"""
        rt, opt = config.runtime, config.optim
        outer = {
            p: OuterOptState.zeros(layout.size(p), opt.outer_lr, opt.outer_momentum, opt.nesterov)
            for p in range(plan.P)
        }
        shards = rt.syncer_shards if rt.syncer_shards > 0 else rt.num_learners
        state = SyncerState(1, theta.copy(), outer, rt.quorum, shards)
        return cls(state, plan, layout, MergeConfig.from_settings(config.merge), rt.overlap,
                   rt.total_steps, opt, config.grace.ema_decay, computes)

    @property
    def t(self) -> int:
        return self.state.t

    @property
    def done(self) -> bool:
        return self.state.t > self.total_steps

    def on_metadata(self, msg: Message, now: float) -> None:
        """记录最新元数据，并据此更新 ξ_step"""
        m = msg.sender
        info = self.state.table.setdefault(m, LearnerInfo())
        t_m = int(msg.meta["t_m"])
        if info.last_time is not None and t_m > info.t_m:
            self.xi_step.update((now - info.last_time) / (t_m - info.t_m))
        info.t_m = t_m
        info.t_global_known = int(msg.meta["t_global_known"])
        info.c_steps = list(msg.meta["c_steps"])
        info.c_tokens = list(msg.meta["c_tokens"])
        info.fresh = True
        info.last_time = now
        self.state.vclock.merge_in(msg.vclock)

    def forget(self, m: int) -> None:
        self.state.table.pop(m, None)

    def required_stamp(self, t: int) -> Optional[int]:
        """t-τ 及之前最近一次广播的同步步，没有则为 None"""
        b = self.state.broadcasts
        i = bisect.bisect_right(b, t - self.tau)
        return b[i - 1] if i > 0 else None

    def eligible(self, t: int, p: Optional[int], members: Sequence[int]) -> List[int]:
        """
        第 t 步的合格学习者

        元数据须为新报告，t_global_known 不早于 required_stamp(t)，同步步还要求 c_steps[p] ≥ 1。
        """
        need = self.required_stamp(t)
        result = []
        for m in sorted(members):
            info = self.state.table.get(m)
            if info is None or not info.fresh:
                continue
            if need is not None and info.t_global_known < need:
                continue
            if p is not None and (p >= len(info.c_steps) or info.c_steps[p] < 1):
                continue
            result.append(m)
        return result

    def close_round(self) -> None:
        for info in self.state.table.values():
            info.fresh = False

    def pull_request(self, p: int) -> Message:
        return Message(MessageKind.PULL_REQUEST, SYNCER_ID, self.state.vclock.copy(),
                       {"fragment": p, "t": self.state.t})

    def merge(self, t: int, p: int, contributions: Sequence[LearnerContribution]) -> MergeOutcome:
        """
        合并分片 p 并执行外层一步，结果写入 Θ_p 与广播历史

        Args:
            t: 同步步
            p: 分片
            contributions: 各学习者贡献

        Returns:
            MergeOutcome
        """
        contribs = sorted(contributions, key=lambda c: c.learner_id)
        ids = [c.learner_id for c in contribs]
        idx = self.layout.indices[p]
        if not self.computes:
            if self.merge_config.weight_mode == "uniform":
                weights = [1.0] * len(contribs)
            else:
                weights = [weight(c.c_tokens, c.c_steps) for c in contribs]
            self._record_broadcast(t, p, None)
            return MergeOutcome(t, p, ids, weights, None)
        prev = self.state.theta.values[idx]
        result = merge_fragment(contribs, prev, self.merge_config, self.layout.embedding_masks[p],
                                self.state.shards)
        lr = None
        if self.optim is not None:
            lr = outer_lr_at(self.optim.outer_lr, t, self.total_steps, self.optim.outer_schedule,
                             self.optim.outer_warmup)
        values, self.state.outer[p] = outer_step(self.state.outer[p], prev, result.delta, result.target, lr)
        self.state.theta.values[idx] = values
        self._record_broadcast(t, p, values.copy())
        logger.debug(f"同步步 {t}: 分片 {p} 合并 {len(ids)} 个学习者")
        return MergeOutcome(t, p, ids, list(result.weights), values)

    def _record_broadcast(self, t: int, p: int, values: Optional[np.ndarray]) -> None:
        if not self.state.broadcasts or self.state.broadcasts[-1] < t:
            self.state.broadcasts.append(t)
        self.state.history[t] = (p, values)

    def broadcast_message(self, outcome: MergeOutcome) -> Message:
        return Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, self.state.vclock.copy(),
                       {"fragment": outcome.p, "stamp": outcome.t},
                       fragment=outcome.values if outcome.values is not None
                       else np.zeros(self.layout.size(outcome.p)))

    def advance(self) -> int:
        self.state.t += 1
        self.state.vclock.update(SYNCER_ID, self.state.t)
        return self.state.t
