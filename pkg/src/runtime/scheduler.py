"""
确定性调度器
单线程离散事件循环，按 (时刻, 优先级, 序号) 交错执行学习者与同步器的处理函数
"""
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from src.aggregation.merging import LearnerContribution
from src.causality.tape import TapeRecorder
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.chaos.simulator import ChaosTimeline
from src.core.errors import RecoveryBudgetExceeded, RecoveryUnavailableError
from src.core.params import ParamStore, checksum
from src.core.rng import named_stream
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import FragmentPlan, plan_from_strategy
from src.optim.inner import InnerOptState
from src.resilience.recovery import (
    RecoveryAttempt, RecoveryRecord, buffer_broadcast, check_budget, install_recovery,
    peer_ready, recovery_payload, recovery_request, restart_attempt, select_peer,
)
from src.resilience.snapshot import (
    PendingSnapshot, Snapshot, begin_snapshot, learner_on_marker, marker_crossing,
    observe_learner_message, persist_snapshot, restore_outer, should_begin,
    snapshot_complete, syncer_finalize_snapshot,
)
from src.runtime.grace import GraceConfig, grace_window
from src.runtime.learner import Learner, LearnerState
from src.runtime.messages import Message, MessageKind
from src.runtime.syncer import LearnerInfo, RoundRecord, RunMetrics, Syncer
from src.runtime.transport import DeterministicTransport, LinkModel

logger = logging.getLogger(__name__)

ACTIVE = "active"
DEAD = "dead"
RECOVERING = "recovering"

# 同一时刻内: 学习者计算与消息投递 → 同步器判定 → 学习者接收
PRIO_EVENT = 0
PRIO_SYNCER = 1
PRIO_RECEIVE = 2


@dataclass
class _Round:
    t: int
    p: Optional[int]
    opened: float
    phase: str = "wait"  # wait / grace / pull / merge
    quorum_at: Optional[float] = None
    pull_at: Optional[float] = None
    grace: float = 0.0
    admitted: List[int] = field(default_factory=list)
    pending: Set[int] = field(default_factory=set)
    contributions: Dict[int, LearnerContribution] = field(default_factory=dict)


@dataclass
class SimulationResult:
    """一次运行的最终状态"""
    theta: ParamStore
    learners: Dict[int, LearnerState]
    metrics: RunMetrics
    end_time: float
    final_step: int
    statuses: Dict[int, str]
    snapshots: List[Snapshot] = field(default_factory=list)
    recoveries: List[RecoveryRecord] = field(default_factory=list)
    tape: Any = None

    def checksums(self) -> Dict[str, str]:
        sums = {"syncer": checksum(self.theta.values)}
        for m, state in sorted(self.learners.items()):
            sums[f"learner_{m}"] = checksum(state.theta.values)
        return sums


class Simulation:
    """
    确定性模式运行时

    学习者步完成事件先执行计算半步（优先级 0），同一时刻的同步器判定（优先级 1）
    之后再执行接收半步（优先级 2），零延迟下同一时刻产生的全局分片在本步内应用。
    """

    def __init__(self, config, workload, plan: Optional[FragmentPlan] = None,
                 timeline: Optional[ChaosTimeline] = None, recorder: Optional[TapeRecorder] = None,
                 snapshot_dir: Optional[str] = None, observer: Optional[Callable] = None):
        rt = config.runtime
        self.config = config
        self.workload = workload
        self.tensors = list(workload.tensors)
        if plan is None:
            plan = plan_from_strategy(self.tensors, rt.fragmentation, rt.fragments, rt.sync_interval)
        self.plan = plan
        self.layout = FragmentLayout.build(self.tensors, plan)
        self.H = plan.H or rt.sync_interval
        self.initial = workload.initial_params()
        self.model_bits = 64 * self.initial.total_size
        self.syncer = Syncer.create(self.initial, plan, self.layout, config, computes=workload.computes)
        self.transport = DeterministicTransport(LinkModel.from_settings(config.link))
        self.grace = GraceConfig.from_settings(config.grace)
        self.timeline = timeline or ChaosTimeline()
        self.recorder = recorder
        self.snapshot_dir = snapshot_dir
        self.snapshot_interval = config.snapshot.interval
        self.observer = observer
        self.lose_state_on_outage = config.chaos.recover_on_outage

        self.now = 0.0
        self.metrics = RunMetrics()
        self.learners: Dict[int, Learner] = {}
        self.status: Dict[int, str] = {}
        self.lost: Set[int] = set()
        self.snapshots: List[Snapshot] = []
        self.recovery_log: List[RecoveryRecord] = []

        self._queue: List[Tuple[float, int, int, Callable, tuple]] = []
        self._seq = 0
        self._gen: Dict[int, int] = {}
        self._speed_rng: Dict[int, np.random.Generator] = {}
        self._round: Optional[_Round] = None
        self._check_scheduled = False
        self._pending: Optional[PendingSnapshot] = None
        self._skip_snapshot_at: Optional[int] = None
        self._attempts: Dict[int, RecoveryAttempt] = {}
        self._parked: Dict[int, List[Message]] = {}
        self._awaiting_first_pull: Set[int] = set()
        self._finished: Dict[int, float] = {}
        self._reinject: List[Message] = []
        self._started = False
        self._stop_at: Optional[float] = None
        self._halted = False

        for m in range(rt.num_learners):
            self._create_learner(m)
            self.status[m] = ACTIVE

    # ------------------------------------------------------------------ 基础设施

    def _push(self, at: float, priority: int, handler: Callable, *args) -> None:
        heapq.heappush(self._queue, (at, priority, self._seq, handler, args))
        self._seq += 1

    def _record(self, worker: int, step: int, vclock: VectorClock, kind: str,
                payload: Optional[dict] = None) -> Optional[int]:
        if self.recorder is None:
            return None
        return self.recorder.record(worker, step, vclock, kind, payload).seq

    def _record_learner(self, m: int, kind: str, payload: Optional[dict] = None) -> Optional[int]:
        st = self.learners[m].state
        return self._record(m, st.t_m, st.vclock, kind, payload)

    def _record_syncer(self, kind: str, payload: Optional[dict] = None) -> Optional[int]:
        return self._record(SYNCER_ID, self.syncer.t, self.syncer.state.vclock, kind, payload)

    def _send(self, src: int, dst: int, msg: Message) -> bool:
        at = self.transport.send(self.now, src, dst, msg)
        if at is None:
            self.metrics.drops += 1
            return False
        self._push(at, PRIO_EVENT, self._on_deliver, dst, msg)
        return True

    def _create_learner(self, m: int) -> Learner:
        opt = InnerOptState.from_settings(self.initial.total_size, self.config.optim)
        state = LearnerState.fresh(m, self.initial, opt, self.plan.P)
        learner = Learner(state, self.layout, self.workload, self.config.runtime.alpha)
        self.learners[m] = learner
        self._gen[m] = self._gen.get(m, 0) + 1
        self.metrics.learner_steps.setdefault(m, 0)
        self.metrics.learner_wait.setdefault(m, 0.0)
        return learner

    def active(self) -> List[int]:
        return sorted(m for m, s in self.status.items() if s == ACTIVE)

    # ------------------------------------------------------------------ 弹性接口

    def add_learner(self, at: float) -> int:
        """在时刻 at 加入一个新学习者（经恢复协议获取状态），返回其编号"""
        m = max(self.learners) + 1 if self.learners else 0
        self._create_learner(m)
        self.status[m] = DEAD
        self.lost.add(m)
        self.transport.close(m)
        self._push(at, PRIO_EVENT, self._on_join, m)
        return m

    def restart_learner(self, m: int, at: float) -> None:
        """在时刻 at 重启学习者 m：状态丢失后走恢复协议"""
        self._push(at, PRIO_EVENT, self._on_restart, m)

    def _on_join(self, m: int) -> None:
        logger.info(f"学习者 {m} 加入 (t={self.now:.3f})")
        self._begin_recovery(m)

    def _on_restart(self, m: int) -> None:
        self._fail(m, lose_state=True)
        self._begin_recovery(m)

    # ------------------------------------------------------------------ 学习者

    def _schedule_step(self, m: int) -> None:
        rt = self.config.runtime
        start = self.timeline.next_available(m, self.now)
        speed = rt.speed_classes[m % len(rt.speed_classes)]
        duration = rt.step_time / speed
        if rt.speed_jitter > 0:
            rng = self._speed_rng.get(m)
            if rng is None:
                rng = self._speed_rng[m] = named_stream(self.config.seed, "speed", m)
            duration *= 1.0 + rt.speed_jitter * (2.0 * rng.random() - 1.0)
        duration *= self.timeline.slowdown_at(m, start)
        self._push(start + duration, PRIO_EVENT, self._on_compute, m, self._gen[m])

    def _on_compute(self, m: int, gen: int) -> None:
        if gen != self._gen[m] or self.status[m] != ACTIVE:
            return
        learner = self.learners[m]
        n = self.workload.examples_for(m, self.timeline.scale_at(m, self.now))
        metadata = learner.compute(n)
        self.metrics.learner_steps[m] += 1
        self._finished[m] = self.now
        self._record_learner(m, "step", {"examples": n, "tokens": n * self.workload.tokens_per_example})
        self._send(m, SYNCER_ID, metadata)
        self._push(self.now, PRIO_RECEIVE, self._on_receive_half, m, gen)

    def _on_receive_half(self, m: int, gen: int) -> None:
        if gen != self._gen[m] or self.status[m] != ACTIVE:
            return
        learner = self.learners[m]
        for p, stamp in learner.drain():
            self._record_learner(m, "fragment_apply", {"fragment": p, "stamp": stamp})
        self._serve_parked(m)
        self.metrics.learner_wait[m] += self.now - self._finished.pop(m, self.now)
        self._schedule_step(m)

    def _on_deliver(self, dst: int, msg: Message) -> None:
        if dst == SYNCER_ID:
            self._syncer_receive(msg)
        else:
            self._learner_receive(dst, msg)

    def _learner_receive(self, m: int, msg: Message) -> None:
        status = self.status[m]
        learner = self.learners[m]
        if status == DEAD and m in self.lost:
            self.metrics.drops += 1
            self._undeliverable(m, msg)
            return
        if status == RECOVERING:
            self._recovering_receive(m, msg)
            return
        self._maybe_checkpoint(m, msg)
        learner.receive(msg)
        if msg.kind == MessageKind.PULL_REQUEST:
            if status == ACTIVE:
                self._serve_pull(m, msg)
            else:
                failed = Message(MessageKind.PULL_FAILED, m, learner.state.vclock.copy(),
                                 {"t": int(msg.meta["t"])})
                self._send(m, SYNCER_ID, failed)
        elif msg.kind == MessageKind.RECOVERY_REQUEST:
            if status == ACTIVE:
                self._handle_recovery_request(m, msg)
            else:
                self._redirect_recovery(msg)

    def _undeliverable(self, m: int, msg: Message) -> None:
        """目的端已宕机：拉取视为失败，恢复请求需要换同伴"""
        if msg.kind == MessageKind.PULL_REQUEST:
            failed = Message(MessageKind.PULL_FAILED, m, msg.vclock.copy(), {"t": int(msg.meta["t"])})
            self._push(self.now, PRIO_EVENT, self._on_deliver, SYNCER_ID, failed)
        elif msg.kind == MessageKind.RECOVERY_REQUEST:
            self._redirect_recovery(msg)

    def _serve_pull(self, m: int, request: Message) -> None:
        payload = self.learners[m].serve_pull(request)
        meta = payload.meta
        self._record_learner(m, "fragment_pull", {
            "fragment": meta["fragment"], "t": meta["t"],
            "c_steps": meta["c_steps"], "c_tokens": meta["c_tokens"],
        })
        self._send(m, SYNCER_ID, payload)

    # ------------------------------------------------------------------ 故障

    def _fail(self, m: int, lose_state: bool) -> None:
        if self.status.get(m) == DEAD and (m in self.lost or not lose_state):
            return
        self.status[m] = DEAD
        self._gen[m] += 1
        self._attempts.pop(m, None)
        self._record_learner(m, "failure", {"mode": "lost" if lose_state else "pause", "time": self.now})
        if lose_state:
            self.lost.add(m)
            self.transport.close(m)
            self.syncer.forget(m)
            self._reset_state(m)
        logger.warning(f"学习者 {m} 故障 (t={self.now:.3f}, {'状态丢失' if lose_state else '暂停'})")
        for request in self._parked.pop(m, []):
            self._redirect_recovery(request)
        self._check_snapshot()

    def _on_outage_start(self, m: int) -> None:
        self._fail(m, self.lose_state_on_outage)

    def _on_outage_end(self, m: int) -> None:
        if self.status.get(m) != DEAD:
            return
        if m in self.lost:
            self._begin_recovery(m)
            return
        self.status[m] = ACTIVE
        self._gen[m] += 1
        logger.info(f"学习者 {m} 恢复运行，待应用 {len(self.learners[m].inbox)} 个全局分片")
        self._schedule_step(m)
        self._check_snapshot()

    # ------------------------------------------------------------------ 恢复

    def _reset_state(self, m: int) -> None:
        learner = self.learners[m]
        opt = InnerOptState.from_settings(self.initial.total_size, self.config.optim)
        learner.state = LearnerState.fresh(m, self.initial, opt, self.plan.P)
        learner.inbox = []

    def _begin_recovery(self, m: int) -> None:
        if m not in self.learners:
            self._create_learner(m)
        self._reset_state(m)
        self._gen[m] = self._gen.get(m, 0) + 1
        self.status[m] = RECOVERING
        self.lost.discard(m)
        self.transport.reopen(m)
        self._attempts[m] = RecoveryAttempt(m, started_at=self.now)
        logger.info(f"学习者 {m} 开始恢复 (t={self.now:.3f})")

    def _recovering_receive(self, m: int, msg: Message) -> None:
        attempt = self._attempts.get(m)
        learner = self.learners[m]
        if attempt is None:
            return
        if msg.kind == MessageKind.GLOBAL_FRAGMENT:
            learner.state.vclock.merge_in(msg.vclock)
            need_request = buffer_broadcast(attempt, msg)
            try:
                check_budget(attempt, self.H)
            except RecoveryBudgetExceeded as e:
                logger.warning(f"{e}")
                restart_attempt(attempt)
                self.metrics.recovery_retries += 1
                need_request = True
            if need_request or attempt.peer is None:
                self._request_recovery(m)
        elif msg.kind == MessageKind.RECOVERY_PAYLOAD:
            if int(msg.meta.get("attempt", -1)) != attempt.retries or int(msg.meta["t_s"]) != attempt.t_s:
                logger.debug(f"学习者 {m} 丢弃过期的恢复负载")
                return
            self._install(m, msg, attempt)
        elif msg.kind == MessageKind.PULL_REQUEST:
            failed = Message(MessageKind.PULL_FAILED, m, learner.state.vclock.copy(), {"t": int(msg.meta["t"])})
            self._send(m, SYNCER_ID, failed)

    def _request_recovery(self, m: int) -> None:
        attempt = self._attempts[m]
        try:
            peer = select_peer(self.active(), exclude=m)
        except RecoveryUnavailableError as e:
            logger.warning(f"学习者 {m} 暂时无法恢复: {e}，等待下一条全局分片")
            attempt.peer = None
            return
        attempt.peer = peer
        request = recovery_request(attempt, self.learners[m].state.vclock)
        request.meta["attempt"] = attempt.retries
        self._send(m, peer, request)

    def _redirect_recovery(self, request: Message) -> None:
        attempt = self._attempts.get(request.sender)
        if attempt is not None and int(request.meta.get("attempt", -1)) == attempt.retries:
            attempt.peer = None

    def _handle_recovery_request(self, peer: int, request: Message) -> None:
        if peer_ready(self.learners[peer], int(request.meta["t_s"])):
            self._serve_recovery(peer, request)
        else:
            self._parked.setdefault(peer, []).append(request)

    def _serve_parked(self, peer: int) -> None:
        parked = self._parked.pop(peer, [])
        waiting = []
        for request in parked:
            if peer_ready(self.learners[peer], int(request.meta["t_s"])):
                self._serve_recovery(peer, request)
            else:
                waiting.append(request)
        if waiting:
            self._parked[peer] = waiting

    def _serve_recovery(self, peer: int, request: Message) -> None:
        newcomer = request.sender
        attempt = self._attempts.get(newcomer)
        if attempt is None or int(request.meta.get("attempt", -1)) != attempt.retries:
            return
        t_s = int(request.meta["t_s"])
        payload = recovery_payload(self.learners[peer], t_s, self.model_bits)
        payload.meta["attempt"] = attempt.retries
        state = self.learners[peer].state
        self._record(newcomer, state.t_m, state.vclock, "recovery", {
            "peer": peer, "t_s": t_s, "peer_t_global_known": state.t_global_known,
        })
        self._send(peer, newcomer, payload)

    def _install(self, m: int, payload: Message, attempt: RecoveryAttempt) -> None:
        learner = self.learners[m]
        record = install_recovery(learner, payload, attempt)
        for p, stamp in record.applied:
            self._record_learner(m, "fragment_apply", {"fragment": p, "stamp": stamp})
        self._attempts.pop(m, None)
        self.recovery_log.append(record)
        self.metrics.recoveries += 1
        self.status[m] = ACTIVE
        self._gen[m] += 1
        self._awaiting_first_pull.add(m)
        self._schedule_step(m)
        self._check_snapshot()

    # ------------------------------------------------------------------ 快照

    def _maybe_checkpoint(self, m: int, msg: Message) -> None:
        pending = self._pending
        if pending is None or m in pending.learners:
            return
        learner = self.learners[m]
        received = msg.vclock.get(SYNCER_ID)
        if received < pending.snapshot_id:
            return
        if marker_crossing(learner.syncer_step_seen(), received, self.snapshot_interval) is None:
            return
        seq = self._record_learner(m, "checkpoint", {"snapshot": pending.snapshot_id})
        pending.learners[m] = learner_on_marker(learner, pending.snapshot_id,
                                                self.workload.stream_state(m), seq)
        self._check_snapshot()

    def _maybe_begin_snapshot(self) -> None:
        t = self.syncer.t
        if t == self._skip_snapshot_at or not should_begin(t, self.snapshot_interval, self._pending):
            return
        if self._attempts:
            logger.info(f"有学习者正在恢复，跳过快照 {t}")
            return
        seq = self._record_syncer("snapshot_begin", {"snapshot": t})
        self._pending = begin_snapshot(self.syncer, self.snapshot_interval, self.now, seq)

    def _check_snapshot(self) -> None:
        pending = self._pending
        if pending is None:
            return
        paused = [m for m, s in self.status.items() if s == DEAD and m not in self.lost]
        if not snapshot_complete(pending, self.active()):
            return
        if any(m not in pending.learners for m in paused):
            return
        for m in pending.learners:
            if self.status[m] != ACTIVE:
                pending.returned.add(m)
        snapshot = syncer_finalize_snapshot(pending, self.active(), sorted(self.learners))
        self._pending = None
        if self.snapshot_dir:
            try:
                persist_snapshot(snapshot, self.snapshot_dir)
            except OSError as e:
                logger.warning(f"快照 {snapshot.snapshot_id} 保存失败，训练继续: {e}")
                self.metrics.failed_snapshots += 1
                return
        self._record_syncer("snapshot_end", {"snapshot": snapshot.snapshot_id, "absent": snapshot.absent})
        self.snapshots.append(snapshot)
        self.metrics.snapshots.append(snapshot.snapshot_id)
        logger.info(f"快照 {snapshot.snapshot_id} 完成，缺席学习者: {snapshot.absent}")

    # ------------------------------------------------------------------ 同步器

    def _syncer_receive(self, msg: Message) -> None:
        m = msg.sender
        if self._pending is not None and msg.kind != MessageKind.PULL_FAILED:
            observe_learner_message(self._pending, msg)
        if msg.kind == MessageKind.METADATA:
            if m not in self.lost:
                self.syncer.on_metadata(msg, self.now)
                self._record_syncer("metadata_recv", {"learner": m, "t_m": int(msg.meta["t_m"])})
                self._schedule_check()
        elif msg.kind == MessageKind.FRAGMENT_PAYLOAD:
            self.syncer.state.vclock.merge_in(msg.vclock)
            self._on_fragment(msg)
        elif msg.kind == MessageKind.PULL_FAILED:
            self._on_pull_failed(m, int(msg.meta["t"]))
        self._check_snapshot()

    def _schedule_check(self) -> None:
        rnd = self._round
        if rnd is None or rnd.phase != "wait" or self._check_scheduled:
            return
        self._check_scheduled = True
        self._push(self.now, PRIO_SYNCER, self._on_check)

    def _open_round(self) -> None:
        if self.syncer.done:
            if self._stop_at is None:
                self._stop_at = self.now
                logger.info(f"同步器完成 {self.syncer.total_steps} 步 (t={self.now:.3f})")
            self._round = None
            return
        self._maybe_begin_snapshot()
        t = self.syncer.t
        self._round = _Round(t, self.plan.fragment_at(t), self.now)
        self._schedule_check()

    def _on_check(self) -> None:
        self._check_scheduled = False
        rnd = self._round
        if rnd is None or rnd.phase != "wait":
            return
        live = self.active()
        eligible = self.syncer.eligible(rnd.t, rnd.p, live)
        K = self.syncer.state.K
        if len(eligible) < K:
            if not self._quorum_reachable(K):
                self.metrics.stalls += 1
                logger.warning(f"同步步 {rnd.t}: 可用学习者不足 K={K}，运行停止")
                self._halted = True
            return
        rnd.quorum_at = self.now
        self.syncer.xi_quorum.update(self.now - rnd.opened)
        if rnd.p is None:
            self.syncer.close_round()
            self.metrics.rounds.append(RoundRecord(rnd.t, None, len(eligible), len(eligible),
                                                   self.now - rnd.opened, 0.0))
            self._advance()
            return
        self.metrics.xi_quorum.append(self.now - rnd.opened)
        self.metrics.xi_step.append(self.syncer.xi_step.get())
        if self.grace.enabled and len(eligible) < len(live):
            rnd.grace = grace_window(self.grace, self.syncer.xi_step.get(), self.syncer.xi_quorum.get(),
                                     self.syncer.xi_sync.get(), self.syncer.tau)
            if rnd.grace > 0:
                rnd.phase = "grace"
                self.metrics.grace_windows.append(rnd.grace)
                self._push(self.now + rnd.grace, PRIO_SYNCER, self._on_grace_end)
                return
        self._start_pull(eligible)

    def _quorum_reachable(self, K: int) -> bool:
        """当前或将来（暂停结束、加入、重启、恢复中）可用的学习者是否还能凑够 K"""
        possible = {m for m, s in self.status.items() if s in (ACTIVE, RECOVERING)}
        for at, _, _, handler, args in self._queue:
            if handler in (self._on_outage_end, self._on_join, self._on_restart):
                possible.add(args[0])
        return len(possible) >= K

    def _on_grace_end(self) -> None:
        rnd = self._round
        if rnd is None or rnd.phase != "grace":
            return
        eligible = self.syncer.eligible(rnd.t, rnd.p, self.active())
        if not eligible:
            rnd.phase = "wait"
            self._schedule_check()
            return
        self._start_pull(eligible)

    def _start_pull(self, admitted: List[int]) -> None:
        rnd = self._round
        self.syncer.close_round()
        rnd.phase = "pull"
        rnd.pull_at = self.now
        rnd.admitted = list(admitted)
        rnd.pending = set()
        for m in admitted:
            if self._send(SYNCER_ID, m, self.syncer.pull_request(rnd.p)):
                rnd.pending.add(m)
            else:
                self.metrics.failed_pulls += 1
        logger.debug(f"同步步 {rnd.t}: 分片 {rnd.p} 接纳 {admitted}")
        if not rnd.pending:
            self._finish_pull()

    def _on_fragment(self, msg: Message) -> None:
        rnd = self._round
        m = msg.sender
        meta = msg.meta
        if rnd is None or rnd.phase != "pull" or int(meta["t"]) != rnd.t or m not in rnd.pending:
            return
        rnd.pending.discard(m)
        if int(meta["c_steps"]) < 1:
            logger.warning(f"同步步 {rnd.t}: 学习者 {m} 的分片 {rnd.p} 计数为 0，不参与合并")
            self.metrics.failed_pulls += 1
        else:
            rnd.contributions[m] = LearnerContribution(m, rnd.p, msg.fragment, int(meta["c_steps"]),
                                                       int(meta["c_tokens"]))
            if m in self._awaiting_first_pull:
                self._awaiting_first_pull.discard(m)
                self.metrics.recovery_staleness.append(rnd.t - int(meta["stamp"]))
        if not rnd.pending:
            self._finish_pull()

    def _on_pull_failed(self, m: int, t: int) -> None:
        rnd = self._round
        if rnd is None or rnd.phase != "pull" or t != rnd.t or m not in rnd.pending:
            return
        rnd.pending.discard(m)
        self.metrics.failed_pulls += 1
        if not rnd.pending:
            self._finish_pull()

    def _finish_pull(self) -> None:
        rnd = self._round
        if not rnd.contributions:
            self.metrics.stalls += 1
            self.metrics.rounds.append(RoundRecord(rnd.t, rnd.p, len(rnd.admitted), 0,
                                                   (rnd.quorum_at or self.now) - rnd.opened, rnd.grace))
            logger.warning(f"同步步 {rnd.t}: 没有成功拉取的分片，重新等待法定数")
            self._round = _Round(rnd.t, rnd.p, self.now)
            self._schedule_check()
            return
        rnd.phase = "merge"
        self._push(self.now + self.config.runtime.sync_compute_time, PRIO_SYNCER, self._on_merge)

    def _on_merge(self) -> None:
        rnd = self._round
        contribs = [rnd.contributions[m] for m in sorted(rnd.contributions)]
        outcome = self.syncer.merge(rnd.t, rnd.p, contribs)
        self._record_syncer("quorum_close", {
            "t": rnd.t, "p": rnd.p, "contributors": outcome.contributors, "weights": outcome.weights,
        })
        xi_sync = self.now - rnd.pull_at
        self.syncer.xi_sync.update(xi_sync)
        self.metrics.xi_sync.append(xi_sync)
        self.metrics.rounds.append(RoundRecord(rnd.t, rnd.p, len(rnd.admitted), len(contribs),
                                               rnd.quorum_at - rnd.opened, rnd.grace))
        message = self.syncer.broadcast_message(outcome)
        for m in sorted(self.learners):
            self._send(SYNCER_ID, m, message)
        if self.observer is not None:
            self.observer(self, outcome)
        self._advance()

    def _advance(self) -> None:
        self.syncer.advance()
        self._open_round()

    # ------------------------------------------------------------------ 运行

    def _start(self) -> None:
        self._started = True
        for m in sorted(self.learners):
            outages = self.timeline.outages(m)
            current = [(a, b) for a, b in outages if a <= self.now < b]
            if current and self.status[m] == ACTIVE:
                self.status[m] = DEAD
                if self.lose_state_on_outage:
                    self.lost.add(m)
                    self.transport.close(m)
                self._push(current[0][1], PRIO_EVENT, self._on_outage_end, m)
            for a, b in outages:
                if a > self.now:
                    self._push(a, PRIO_EVENT, self._on_outage_start, m)
                    self._push(b, PRIO_EVENT, self._on_outage_end, m)
            if self.status[m] == ACTIVE:
                self._schedule_step(m)
            elif self.status[m] == RECOVERING:
                self._begin_recovery(m)
        for msg in self._reinject:
            self._push(self.now, PRIO_EVENT, self._on_deliver, SYNCER_ID, msg)
        self._reinject = []
        self._open_round()

    def run(self) -> SimulationResult:
        """运行到同步器完成 T 步（同一时刻的剩余事件一并处理）"""
        if not self._started:
            logger.info(f"确定性运行开始: M={len(self.learners)}, K={self.syncer.state.K}, "
                        f"H={self.H}, P={self.plan.P}, τ={self.syncer.tau}, T={self.syncer.total_steps}")
            self._start()
        limit = self.config.runtime.max_virtual_time
        while self._queue and not self._halted:
            at = self._queue[0][0]
            if self._stop_at is not None and at > self._stop_at:
                break
            if limit > 0 and at > limit:
                logger.warning(f"达到虚拟时间上限 {limit}，同步器停在第 {self.syncer.t} 步")
                break
            _, _, _, handler, args = heapq.heappop(self._queue)
            self.now = at
            handler(*args)
        return self.result()

    def result(self) -> SimulationResult:
        tape = self.recorder.tape if self.recorder is not None else None
        return SimulationResult(
            theta=self.syncer.state.theta.copy(),
            learners={m: l.state.copy() for m, l in sorted(self.learners.items())},
            metrics=self.metrics,
            end_time=self.now,
            final_step=self.syncer.t,
            statuses=dict(self.status),
            snapshots=list(self.snapshots),
            recoveries=list(self.recovery_log),
            tape=tape,
        )

    # ------------------------------------------------------------------ 从快照恢复

    @classmethod
    def from_snapshot(cls, config, workload, snapshot: Snapshot, plan: Optional[FragmentPlan] = None,
                      timeline: Optional[ChaosTimeline] = None, recorder: Optional[TapeRecorder] = None,
                      snapshot_dir: Optional[str] = None, observer: Optional[Callable] = None) -> "Simulation":
        """
        从快照重建运行时（无磁带）

        恢复同步器与快照中的学习者，缺席学习者走恢复协议，在途消息重新注入同步器。
        """
        sim = cls(config, workload, plan, timeline, recorder, snapshot_dir, observer)
        sy = snapshot.syncer
        st = sim.syncer.state
        st.t = sy.t
        st.theta = ParamStore(sim.tensors, sy.theta.copy())
        st.outer = restore_outer(sy, st.outer)
        st.vclock = sy.vclock.copy()
        st.table = {m: LearnerInfo.from_dict(info.to_dict()) for m, info in sy.table.items()}
        st.broadcasts = list(sy.broadcasts)
        st.history = dict(sy.history)
        sim.now = sy.time
        sim._skip_snapshot_at = sy.t

        ids = set(snapshot.learners) | set(snapshot.absent)
        for m in sorted(ids):
            if m not in sim.learners:
                sim._create_learner(m)
        for m in sorted(sim.learners):
            cp = snapshot.learners.get(m)
            if cp is None:
                sim.status[m] = RECOVERING
                continue
            learner = sim.learners[m]
            state = cp.state.copy()
            state.theta = ParamStore(sim.tensors, state.theta.values)
            learner.state = state
            learner.inbox = [
                Message(MessageKind.GLOBAL_FRAGMENT, SYNCER_ID, sy.vclock.copy(),
                        {"fragment": p, "stamp": stamp}, fragment=values.copy())
                for p, stamp, values in cp.inbox
            ]
            if cp.data_stream:
                workload.restore_stream(m, cp.data_stream)
            sim.status[m] = ACTIVE
        for record in snapshot.in_flight:
            sim._reinject.append(Message(
                MessageKind(record["kind"]), int(record["sender"]), VectorClock.from_list(record["vclock"]),
                dict(record["meta"]),
                fragment=np.asarray(record["fragment"], dtype=np.float64) if "fragment" in record else None,
            ))
        logger.info(f"从快照 {snapshot.snapshot_id} 恢复: 学习者 {sorted(snapshot.learners)}，"
                    f"缺席 {snapshot.absent}，在途消息 {len(snapshot.in_flight)} 条")
        return sim
