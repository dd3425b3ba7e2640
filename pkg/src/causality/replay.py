"""
确定性回放
按磁带顺序驱动同一套学习者与同步器处理函数，完全绕过法定数判定
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Set, Tuple

from src.aggregation.merging import LearnerContribution
from src.causality.tape import Tape, TapeEvent
from src.causality.vector_clock import SYNCER_ID
from src.core.config import config_hash
from src.core.errors import ReplayIntegrityError
from src.core.params import ParamStore, checksum
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import FragmentPlan, plan_from_strategy
from src.optim.inner import InnerOptState
from src.resilience.snapshot import Snapshot, restore_outer
from src.runtime.learner import Learner, LearnerState
from src.runtime.syncer import Syncer

logger = logging.getLogger(__name__)


@dataclass
class ReplayResult:
    theta: ParamStore
    learners: Dict[int, LearnerState]
    final_step: int
    events: int
    skipped: int = 0
    merges: int = 0

    def checksums(self) -> Dict[str, str]:
        sums = {"syncer": checksum(self.theta.values)}
        for m, state in sorted(self.learners.items()):
            sums[f"learner_{m}"] = checksum(state.theta.values)
        return sums


class ReplayEngine:
    """
    回放引擎

    同步器只接纳磁带记录的参与者，拉取内容在 fragment_pull 事件处按 (t, m) 捕获，
    合并时重新计算的权重必须与记录一致。
    """

    def __init__(self, config, tape: Tape, workload, plan: Optional[FragmentPlan] = None):
        expected = config_hash(config)
        if tape.header.config_hash != expected:
            raise ReplayIntegrityError(
                f"磁带配置哈希 {tape.header.config_hash} 与当前配置 {expected} 不一致，拒绝回放")
        rt = config.runtime
        self.config = config
        self.tape = tape
        self.workload = workload
        self.tensors = list(workload.tensors)
        if plan is None:
            plan = plan_from_strategy(self.tensors, rt.fragmentation, rt.fragments, rt.sync_interval)
        self.plan = plan
        self.layout = FragmentLayout.build(self.tensors, plan)
        self.initial = workload.initial_params()
        self.syncer = Syncer.create(self.initial, plan, self.layout, config, computes=workload.computes)
        self.learners: Dict[int, Learner] = {}
        for m in range(tape.header.M):
            self._fresh_learner(m)
        self._pulls: Dict[Tuple[int, int], LearnerContribution] = {}
        self._cuts: Dict[int, int] = {}
        # 快照中缺席的学习者：在下一次恢复事件之前忽略其事件
        self._detached: Set[int] = set()
        self._open_snapshot: Optional[int] = None
        self.skipped = 0
        self.merges = 0

    def _fresh_learner(self, m: int) -> Learner:
        opt = InnerOptState.from_settings(self.initial.total_size, self.config.optim)
        learner = Learner(LearnerState.fresh(m, self.initial, opt, self.plan.P), self.layout,
                          self.workload, self.config.runtime.alpha)
        self.learners[m] = learner
        return learner

    def restore(self, snapshot: Snapshot) -> "ReplayEngine":
        """
        从快照开始回放：恢复各工作者状态，跳过每个工作者切点及之前的事件

        Args:
            snapshot: 带磁带切点的快照

        Returns:
            self
        """
        if SYNCER_ID not in snapshot.cuts:
            raise ReplayIntegrityError(f"快照 {snapshot.snapshot_id} 没有磁带切点，无法按磁带恢复")
        sy = snapshot.syncer
        st = self.syncer.state
        st.t = sy.t
        st.theta = ParamStore(self.tensors, sy.theta.copy())
        st.outer = restore_outer(sy, st.outer)
        st.vclock = sy.vclock.copy()
        st.broadcasts = list(sy.broadcasts)
        st.history = {s: (p, None if v is None else v.copy()) for s, (p, v) in sy.history.items()}
        for cp in snapshot.learners.values():
            for p, stamp, values in cp.inbox:
                st.history.setdefault(stamp, (p, values.copy()))

        for m in list(self.learners):
            if m not in snapshot.learners:
                self._detached.add(m)
        for m, cp in snapshot.learners.items():
            learner = self.learners.get(m) or self._fresh_learner(m)
            state = cp.state.copy()
            state.theta = ParamStore(self.tensors, state.theta.values)
            learner.state = state
            if cp.data_stream:
                self.workload.restore_stream(m, cp.data_stream)
        for m in snapshot.absent:
            if m not in self.learners:
                self._fresh_learner(m)
            self._detached.add(m)
        self._cuts = dict(snapshot.cuts)
        self._open_snapshot = snapshot.snapshot_id
        logger.info(f"从快照 {snapshot.snapshot_id} 开始回放，切点 {self._cuts}")
        return self

    def _learner(self, event: TapeEvent) -> Learner:
        learner = self.learners.get(event.worker_id)
        if learner is None:
            raise ReplayIntegrityError(f"事件引用了未知学习者 {event.worker_id}", event.seq)
        return learner

    def _skip(self, event: TapeEvent) -> bool:
        cut = self._cuts.get(event.worker_id)
        if cut is not None and event.seq <= cut:
            return True
        return event.worker_id in self._detached and event.kind != "recovery"

    def apply(self, event: TapeEvent) -> None:
        """回放一条事件"""
        if self._skip(event):
            self.skipped += 1
            return
        handler = getattr(self, f"_on_{event.kind}", None)
        if handler is None:
            raise ReplayIntegrityError(f"未知事件类型 {event.kind}", event.seq)
        handler(event)

    def _on_step(self, event: TapeEvent) -> None:
        learner = self._learner(event)
        learner.compute(int(event.payload["examples"]))
        if learner.state.t_m != event.local_step:
            raise ReplayIntegrityError(
                f"学习者 {event.worker_id} 本地步 {learner.state.t_m} 与磁带 {event.local_step} 不一致", event.seq)

    def _on_fragment_pull(self, event: TapeEvent) -> None:
        learner = self._learner(event)
        p, t = int(event.payload["fragment"]), int(event.payload["t"])
        c_steps = int(learner.state.c_steps[p])
        if c_steps != int(event.payload["c_steps"]):
            raise ReplayIntegrityError(
                f"学习者 {event.worker_id} 分片 {p} 步数计数 {c_steps} 与磁带 {event.payload['c_steps']} 不一致",
                event.seq)
        self._pulls[(t, event.worker_id)] = LearnerContribution(
            event.worker_id, p, learner.fragment(p).copy(), c_steps, int(learner.state.c_tokens[p]))

    def _on_quorum_close(self, event: TapeEvent) -> None:
        t, p = int(event.payload["t"]), int(event.payload["p"])
        contribs = []
        for m in event.payload["contributors"]:
            contrib = self._pulls.pop((t, int(m)), None)
            if contrib is None:
                raise ReplayIntegrityError(f"同步步 {t} 缺少学习者 {m} 的拉取记录", event.seq)
            contribs.append(contrib)
        self.syncer.state.t = t
        outcome = self.syncer.merge(t, p, contribs)
        recorded = [float(w) for w in event.payload["weights"]]
        if [float(w) for w in outcome.weights] != recorded:
            raise ReplayIntegrityError(f"同步步 {t} 重新计算的权重 {outcome.weights} 与磁带 {recorded} 不一致",
                                       event.seq)
        self.syncer.advance()
        self.merges += 1

    def _on_fragment_apply(self, event: TapeEvent) -> None:
        learner = self._learner(event)
        p, stamp = int(event.payload["fragment"]), int(event.payload["stamp"])
        entry = self.syncer.state.history.get(stamp)
        if entry is None or entry[0] != p:
            raise ReplayIntegrityError(f"学习者 {event.worker_id} 应用了未知的全局分片 (p={p}, t={stamp})",
                                       event.seq)
        values = entry[1] if entry[1] is not None else learner.fragment(p).copy()
        learner.apply_global(p, values, stamp)

    def _on_failure(self, event: TapeEvent) -> None:
        learner = self._learner(event)
        if event.payload.get("mode") == "lost":
            opt = InnerOptState.from_settings(self.initial.total_size, self.config.optim)
            learner.state = LearnerState.fresh(event.worker_id, self.initial, opt, self.plan.P)

    def _on_recovery(self, event: TapeEvent) -> None:
        newcomer = event.worker_id
        peer = self.learners.get(int(event.payload["peer"]))
        if peer is None or int(event.payload["peer"]) in self._detached:
            raise ReplayIntegrityError(f"恢复事件引用了不可用的同伴 {event.payload['peer']}", event.seq)
        learner = self.learners.get(newcomer) or self._fresh_learner(newcomer)
        state = peer.state.copy(learner_id=newcomer)
        state.vclock.entries[newcomer] = state.t_m
        learner.state = state
        learner.inbox = []
        self._detached.discard(newcomer)
        self._cuts.pop(newcomer, None)

    def _on_metadata_recv(self, event: TapeEvent) -> None:
        m = int(event.payload["learner"])
        if m not in self.learners:
            raise ReplayIntegrityError(f"元数据来自未知学习者 {m}", event.seq)

    def _on_checkpoint(self, event: TapeEvent) -> None:
        # 检查点不改变状态，只核对学习者在切点处的本地步
        learner = self._learner(event)
        if learner.state.t_m != event.local_step:
            raise ReplayIntegrityError(
                f"学习者 {event.worker_id} 在快照 {event.payload.get('snapshot')} 的检查点本地步 "
                f"{learner.state.t_m} 与磁带 {event.local_step} 不一致", event.seq)

    def _on_snapshot_begin(self, event: TapeEvent) -> None:
        snapshot_id = int(event.payload["snapshot"])
        if snapshot_id != event.local_step or self.syncer.state.t > snapshot_id:
            raise ReplayIntegrityError(
                f"快照 {snapshot_id} 的开始事件与同步器第 {self.syncer.state.t} 步不一致", event.seq)
        self._open_snapshot = snapshot_id

    def _on_snapshot_end(self, event: TapeEvent) -> None:
        snapshot_id = int(event.payload["snapshot"])
        if self._open_snapshot is not None and snapshot_id != self._open_snapshot:
            raise ReplayIntegrityError(
                f"快照 {snapshot_id} 结束时进行中的快照是 {self._open_snapshot}", event.seq)
        self._open_snapshot = None

    def run(self) -> ReplayResult:
        """回放整条磁带"""
        for event in self.tape:
            self.apply(event)
        if self._pulls:
            logger.debug(f"磁带末尾有 {len(self._pulls)} 个未合并的拉取")
        logger.info(f"回放完成: {len(self.tape)} 条事件，合并 {self.merges} 次，跳过 {self.skipped} 条")
        return ReplayResult(
            theta=self.syncer.state.theta.copy(),
            learners={m: l.state.copy() for m, l in sorted(self.learners.items())},
            final_step=self.syncer.t,
            events=len(self.tape),
            skipped=self.skipped,
            merges=self.merges,
        )


def replay(tape: Tape, config, workload, plan: Optional[FragmentPlan] = None,
           snapshot: Optional[Snapshot] = None) -> ReplayResult:
    """
    回放磁带

    Args:
        tape: 记录或合成的磁带
        config: 实验配置（哈希必须与磁带头一致）
        workload: 与记录时相同的数据与模型
        plan: 分片方案，默认按配置生成
        snapshot: 给定时从该快照的切点开始回放

    Returns:
        ReplayResult
    """
    engine = ReplayEngine(config, tape, workload, plan)
    if snapshot is not None:
        engine.restore(snapshot)
    return engine.run()
