"""
实时模式
每个学习者与同步器各占一个线程，只通过 FIFO 通道交互，时间取墙钟
"""
import logging
import threading
import time
from typing import Callable, Dict, List, Optional, Tuple

from src.aggregation.merging import LearnerContribution
from src.causality.tape import TapeRecorder
from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.errors import ChannelClosedError, LiveRunTimeoutError
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import FragmentPlan, plan_from_strategy
from src.optim.inner import InnerOptState
from src.runtime.grace import GraceConfig, grace_window
from src.runtime.learner import Learner, LearnerState
from src.runtime.messages import Message, MessageKind
from src.runtime.scheduler import ACTIVE, SimulationResult
from src.runtime.syncer import RoundRecord, RunMetrics, Syncer
from src.runtime.tcp import tcp_pipe
from src.runtime.transport import Channel

logger = logging.getLogger(__name__)

# 同步器轮询元数据的粒度（虚拟秒）
_POLL = 0.05


class LiveRunner:
    """
    实时运行器

    学习者线程循环执行 计算 → 发送元数据 → 处理收到的消息 → 应用全局分片；
    同步器线程按步等待 K 个新报告，拉取阶段超过 stall_factor × ξ_step 未响应的学习者
    在本轮视为缺席。处理函数与确定性模式相同。
    """

    def __init__(self, config, workload, plan: Optional[FragmentPlan] = None,
                 recorder: Optional[TapeRecorder] = None, observer: Optional[Callable] = None):
        rt = config.runtime
        self.config = config
        self.workload = workload
        self.tensors = list(workload.tensors)
        if plan is None:
            plan = plan_from_strategy(self.tensors, rt.fragmentation, rt.fragments, rt.sync_interval)
        self.plan = plan
        self.layout = FragmentLayout.build(self.tensors, plan)
        self.initial = workload.initial_params()
        self.syncer = Syncer.create(self.initial, plan, self.layout, config, computes=workload.computes)
        self.grace = GraceConfig.from_settings(config.grace)
        self.recorder = recorder
        self.observer = observer
        self.time_scale = rt.live_time_scale
        self.metrics = RunMetrics()
        if config.chaos.enabled:
            logger.warning("实时模式不模拟故障，chaos 配置将被忽略；请在确定性模式下评估故障")

        self.learners: Dict[int, Learner] = {}
        for m in range(rt.num_learners):
            opt = InnerOptState.from_settings(self.initial.total_size, config.optim)
            self.learners[m] = Learner(LearnerState.fresh(m, self.initial, opt, plan.P), self.layout,
                                       workload, rt.alpha)
        # (写端, 读端)；进程内通道两端相同
        self._to_syncer = self._make_channel("syncer")
        self._to_learner = {m: self._make_channel(f"learner{m}") for m in self.learners}
        self._record_lock = threading.Lock()
        self._stop = threading.Event()
        self._errors: List[BaseException] = []
        self._start = 0.0

    def _make_channel(self, name: str) -> Tuple:
        if self.config.runtime.live_transport == "tcp":
            return tcp_pipe(name)
        channel = Channel(name)
        return channel, channel

    def _now(self) -> float:
        """虚拟秒"""
        return (time.monotonic() - self._start) / self.time_scale

    @property
    def now(self) -> float:
        return self._now()

    def _sleep(self, virtual: float) -> None:
        if virtual > 0:
            self._stop.wait(virtual * self.time_scale)

    def _record(self, worker: int, step: int, vclock: VectorClock, kind: str, payload: dict) -> None:
        if self.recorder is None:
            return
        with self._record_lock:
            self.recorder.record(worker, step, vclock, kind, payload)

    # ------------------------------------------------------------------ 学习者线程

    def _step_time(self, m: int) -> float:
        classes = self.config.runtime.speed_classes
        return self.config.runtime.step_time / classes[m % len(classes)]

    def _learner_loop(self, m: int) -> None:
        learner = self.learners[m]
        inbound = self._to_learner[m][1]
        outbound = self._to_syncer[0]
        try:
            while not self._stop.is_set():
                n = self.workload.examples_for(m)
                meta = learner.compute(n)
                st = learner.state
                self._record(m, st.t_m, st.vclock, "step", {"examples": n, "tokens": n * self.workload.tokens_per_example})
                self._sleep(self._step_time(m))
                outbound.send(meta)
                while (msg := inbound.poll(0)) is not None:
                    learner.receive(msg)
                    if msg.kind == MessageKind.PULL_REQUEST:
                        reply = learner.serve_pull(msg)
                        self._record(m, st.t_m, st.vclock, "fragment_pull", {
                            "fragment": reply.meta["fragment"], "t": reply.meta["t"],
                            "c_steps": reply.meta["c_steps"], "c_tokens": reply.meta["c_tokens"],
                        })
                        outbound.send(reply)
                for p, stamp in learner.drain():
                    self._record(m, st.t_m, st.vclock, "fragment_apply", {"fragment": p, "stamp": stamp})
        except ChannelClosedError as e:
            # 停止后关闭通道属于正常退出
            if not self._stop.is_set():
                logger.error(f"学习者 {m} 的通道在运行中被关闭: {e}")
                self._errors.append(e)
                self._stop.set()
        except BaseException as e:
            logger.error(f"学习者 {m} 线程异常: {e}")
            self._errors.append(e)
            self._stop.set()

    # ------------------------------------------------------------------ 同步器线程

    def _pump(self, timeout: float, payloads: Dict[int, Message]) -> None:
        """处理一条入站消息：元数据进表，分片负载按学习者暂存"""
        msg = self._to_syncer[1].poll(timeout * self.time_scale)
        if msg is None:
            return
        if msg.kind == MessageKind.METADATA:
            self.syncer.on_metadata(msg, self._now())
            self._record(SYNCER_ID, self.syncer.t, self.syncer.state.vclock, "metadata_recv",
                         {"learner": msg.sender, "t_m": int(msg.meta["t_m"])})
        elif msg.kind == MessageKind.FRAGMENT_PAYLOAD:
            self.syncer.state.vclock.merge_in(msg.vclock)
            if int(msg.meta["t"]) == self.syncer.t:
                payloads[msg.sender] = msg

    def _stall_horizon(self) -> float:
        rt = self.config.runtime
        return rt.stall_factor * self.syncer.xi_step.get(rt.step_time)

    def _wait_quorum(self, t: int, p: Optional[int], payloads: Dict[int, Message]) -> List[int]:
        members = sorted(self.learners)
        K = self.syncer.state.K
        warned_at = self._now()
        while not self._stop.is_set():
            eligible = self.syncer.eligible(t, p, members)
            if len(eligible) >= K:
                return eligible
            if self._now() - warned_at > self._stall_horizon():
                self.metrics.stalls += 1
                logger.warning(f"同步步 {t}: 超过 {self._stall_horizon():.2f}s 未达到法定数 K={K}")
                warned_at = self._now()
            self._pump(_POLL, payloads)
        return []

    def syncer_tick(self) -> None:
        """同步器一步：等法定数、宽限、拉取、合并、广播，然后 t ← t+1"""
        sy = self.syncer
        t = sy.t
        p = self.plan.fragment_at(t)
        opened = self._now()
        payloads: Dict[int, Message] = {}
        eligible = self._wait_quorum(t, p, payloads)
        if self._stop.is_set():
            return
        quorum_wait = self._now() - opened
        sy.xi_quorum.update(quorum_wait)
        if p is None:
            sy.close_round()
            self.metrics.rounds.append(RoundRecord(t, None, len(eligible), len(eligible), quorum_wait, 0.0))
            sy.advance()
            return

        self.metrics.xi_quorum.append(quorum_wait)
        self.metrics.xi_step.append(sy.xi_step.get())
        window = 0.0
        if self.grace.enabled and len(eligible) < len(self.learners):
            window = grace_window(self.grace, sy.xi_step.get(), sy.xi_quorum.get(), sy.xi_sync.get(), sy.tau)
            self.metrics.grace_windows.append(window)
            deadline = self._now() + window
            while self._now() < deadline and not self._stop.is_set():
                self._pump(min(_POLL, deadline - self._now()), payloads)
            eligible = sy.eligible(t, p, sorted(self.learners))

        sy.close_round()
        pull_at = self._now()
        request = sy.pull_request(p)
        for m in eligible:
            self._to_learner[m][0].send(request)
        pending = set(eligible)
        deadline = pull_at + self._stall_horizon()
        while pending and not self._stop.is_set():
            if self._now() > deadline:
                logger.warning(f"同步步 {t}: 学习者 {sorted(pending)} 超时未返回分片，本轮视为缺席")
                self.metrics.failed_pulls += len(pending)
                break
            self._pump(_POLL, payloads)
            pending -= set(payloads)

        contribs = []
        for m in sorted(payloads):
            if m not in eligible:
                continue
            meta = payloads[m].meta
            if int(meta["c_steps"]) < 1:
                continue
            contribs.append(LearnerContribution(m, p, payloads[m].fragment, int(meta["c_steps"]),
                                                int(meta["c_tokens"])))
        if not contribs:
            self.metrics.stalls += 1
            logger.warning(f"同步步 {t}: 没有可合并的分片，重新等待法定数")
            return

        outcome = sy.merge(t, p, contribs)
        self._record(SYNCER_ID, t, sy.state.vclock, "quorum_close", {
            "t": t, "p": p, "contributors": outcome.contributors, "weights": outcome.weights,
        })
        xi_sync = self._now() - pull_at
        sy.xi_sync.update(xi_sync)
        self.metrics.xi_sync.append(xi_sync)
        self.metrics.rounds.append(RoundRecord(t, p, len(eligible), len(contribs), quorum_wait, window))
        message = sy.broadcast_message(outcome)
        for m in sorted(self.learners):
            self._to_learner[m][0].send(message)
        if self.observer is not None:
            self.observer(self, outcome)
        sy.advance()

    def _syncer_loop(self) -> None:
        try:
            while not self.syncer.done and not self._stop.is_set():
                self.syncer_tick()
        except BaseException as e:
            logger.error(f"同步器线程异常: {e}")
            self._errors.append(e)
        finally:
            self._stop.set()

    # ------------------------------------------------------------------ 运行

    def run(self, timeout: Optional[float] = None) -> SimulationResult:
        """
        运行到同步器完成 T 步

        Args:
            timeout: 墙钟超时（秒），None 表示不限制

        Returns:
            SimulationResult

        Raises:
            LiveRunTimeoutError: 超时前同步器没有完成
            ChannelClosedError: 运行中通道被关闭
        """
        rt = self.config.runtime
        logger.info(f"实时运行开始: M={len(self.learners)}, K={rt.quorum}, H={self.plan.H}, "
                    f"P={self.plan.P}, 传输={rt.live_transport}, 时间缩放={self.time_scale}")
        self._start = time.monotonic()
        threads = [threading.Thread(target=self._syncer_loop, name="syncer", daemon=True)]
        threads += [threading.Thread(target=self._learner_loop, args=(m,), name=f"learner-{m}", daemon=True)
                    for m in sorted(self.learners)]
        for thread in threads:
            thread.start()
        threads[0].join(timeout)
        timed_out = threads[0].is_alive()
        if timed_out:
            logger.error(f"实时运行超过 {timeout}s，停止于同步步 {self.syncer.t}")
        self._stop.set()
        for thread in threads:
            thread.join(max(1.0, 20 * rt.step_time * self.time_scale))
        for write_end, read_end in [self._to_syncer, *self._to_learner.values()]:
            write_end.close()
            read_end.close()
        if self._errors:
            raise self._errors[0]
        if timed_out:
            raise LiveRunTimeoutError(f"实时运行 {timeout}s 内只完成到同步步 {self.syncer.t}，目标 {rt.total_steps}")
        for m, learner in self.learners.items():
            self.metrics.learner_steps[m] = learner.state.t_m
        logger.info(f"实时运行结束: 同步器第 {self.syncer.t} 步，平均接纳 {self.metrics.mean_admitted():.2f}")
        return SimulationResult(
            theta=self.syncer.state.theta.copy(),
            learners={m: l.state.copy() for m, l in sorted(self.learners.items())},
            metrics=self.metrics,
            end_time=self._now(),
            final_step=self.syncer.t,
            statuses={m: ACTIVE for m in self.learners},
            tape=self.recorder.tape if self.recorder is not None else None,
        )
