"""
学习者
本地内层优化、向同步器发送元数据、响应分片拉取、应用收到的全局分片
"""
import logging
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np

from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.errors import RangeError
from src.core.params import ParamStore
from src.fragmentation.layout import FragmentLayout
from src.optim.inner import InnerOptState, inner_step
from src.optim.outer import apply_received_fragment
from src.runtime.messages import Message, MessageKind

logger = logging.getLogger(__name__)


@dataclass
class LearnerState:
    """
    学习者状态

    counters 在分片 p 的全局更新被应用时清零；fragment_stamps[p] 是最近一次应用的 Θ_p 的同步步。
    """
    learner_id: int
    theta: ParamStore
    inner_opt: InnerOptState
    t_m: int = 0
    t_global_known: int = 0
    c_steps: np.ndarray = None
    c_tokens: np.ndarray = None
    fragment_stamps: np.ndarray = None
    vclock: VectorClock = field(default_factory=VectorClock)

    @classmethod
    def fresh(cls, learner_id: int, theta: ParamStore, inner_opt: InnerOptState, P: int) -> "LearnerState":
        return cls(
            learner_id=learner_id,
            theta=theta.copy(),
            inner_opt=inner_opt.copy(),
            c_steps=np.zeros(P, dtype=np.int64),
            c_tokens=np.zeros(P, dtype=np.int64),
            fragment_stamps=np.zeros(P, dtype=np.int64),
            vclock=VectorClock({learner_id: 0}),
        )

    def copy(self, learner_id: Optional[int] = None) -> "LearnerState":
        return LearnerState(
            learner_id=self.learner_id if learner_id is None else learner_id,
            theta=self.theta.copy(),
            inner_opt=self.inner_opt.copy(),
            t_m=self.t_m,
            t_global_known=self.t_global_known,
            c_steps=self.c_steps.copy(),
            c_tokens=self.c_tokens.copy(),
            fragment_stamps=self.fragment_stamps.copy(),
            vclock=self.vclock.copy(),
        )


class Learner:
    """
    学习者处理逻辑

    确定性调度器、实时线程与回放引擎共用同一套处理函数。
    """

    def __init__(self, state: LearnerState, layout: FragmentLayout, workload, alpha: float = 0.0):
        if not 0.0 <= alpha <= 1.0:
            raise RangeError(f"插值系数 α={alpha} 不在 [0, 1]")
        self.state = state
        self.layout = layout
        self.workload = workload
        self.alpha = alpha
        # 已送达但尚未应用的全局分片
        self.inbox: List[Message] = []
        self.last_loss: Optional[float] = None

    @property
    def learner_id(self) -> int:
        return self.state.learner_id

    def compute(self, n_examples: int) -> Message:
        """
        内层一步并生成元数据消息

        Args:
            n_examples: 本步样本数

        Returns:
            Message: 发往同步器的元数据
        """
        st = self.state
        m = st.learner_id
        if self.workload.computes:
            batch = self.workload.next_batch(m, n_examples)
            loss, grad = self.workload.loss_and_grad(st.theta, batch)
            st.theta, st.inner_opt = inner_step(st.inner_opt, st.theta, grad)
            self.last_loss = loss
        tokens = n_examples * self.workload.tokens_per_example
        st.t_m += 1
        st.c_steps += 1
        st.c_tokens += tokens
        st.vclock.update(m, st.t_m)
        return self.metadata()

    def metadata(self) -> Message:
        st = self.state
        meta = {
            "t_m": st.t_m,
            "t_global_known": st.t_global_known,
            "c_steps": st.c_steps.tolist(),
            "c_tokens": st.c_tokens.tolist(),
        }
        return Message(MessageKind.METADATA, st.learner_id, st.vclock.copy(), meta)

    def receive(self, msg: Message) -> None:
        """通信处理：合并向量时钟，全局分片进入待应用队列"""
        self.state.vclock.merge_in(msg.vclock)
        if msg.kind == MessageKind.GLOBAL_FRAGMENT:
            self.inbox.append(msg)

    def fragment(self, p: int) -> np.ndarray:
        return self.state.theta.values[self.layout.indices[p]]

    def serve_pull(self, request: Message) -> Message:
        """返回当前分片与该分片的计数器（学习者可能已越过元数据中的 t_m）"""
        st = self.state
        p = int(request.meta["fragment"])
        meta = {
            "fragment": p,
            "t": int(request.meta["t"]),
            "c_steps": int(st.c_steps[p]),
            "c_tokens": int(st.c_tokens[p]),
            "t_m": st.t_m,
            "stamp": int(st.fragment_stamps[p]),
        }
        return Message(MessageKind.FRAGMENT_PAYLOAD, st.learner_id, st.vclock.copy(), meta,
                       fragment=self.fragment(p).copy())

    def apply_global(self, p: int, values: np.ndarray, stamp: int) -> None:
        """θ_p ← α θ_p + (1-α) Θ_p，并清零分片 p 的计数器"""
        st = self.state
        idx = self.layout.indices[p]
        st.theta.values[idx] = apply_received_fragment(st.theta.values[idx], values, self.alpha)
        st.c_steps[p] = 0
        st.c_tokens[p] = 0
        st.fragment_stamps[p] = stamp
        st.t_global_known = max(st.t_global_known, stamp)

    def drain(self) -> List[Tuple[int, int]]:
        """按到达顺序应用所有待应用的全局分片，返回 [(p, stamp)]"""
        applied = []
        pending, self.inbox = self.inbox, []
        for msg in pending:
            p, stamp = int(msg.meta["fragment"]), int(msg.meta["stamp"])
            self.apply_global(p, msg.fragment, stamp)
            applied.append((p, stamp))
        return applied

    def syncer_step_seen(self) -> int:
        return self.state.vclock.get(SYNCER_ID)


def learner_tick(learner: Learner, n_examples: int) -> Tuple[Message, List[Tuple[int, int]]]:
    """
    一次完整的学习者循环：先计数后应用

    Returns:
        (元数据消息, 本次应用的 [(p, stamp)])
    """
    metadata = learner.compute(n_examples)
    applied = learner.drain()
    return metadata, applied
