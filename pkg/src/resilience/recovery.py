"""
学习者恢复
新加入（或重启）的学习者等待第一条带 t_s 的全局分片，向健康同伴请求完整状态，
同伴在自己也见到 t_s 后响应；新学习者安装状态后按顺序应用缓冲的全局分片
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from src.core.errors import RecoveryBudgetExceeded, RecoveryUnavailableError
from src.runtime.learner import Learner, LearnerState
from src.runtime.messages import Message, MessageKind

logger = logging.getLogger(__name__)


@dataclass
class RecoveryAttempt:
    """一次恢复尝试；t_s 为 None 表示还在等待第一条全局分片"""
    newcomer: int
    started_at: float = 0.0
    t_s: Optional[int] = None
    peer: Optional[int] = None
    buffer: List[Message] = field(default_factory=list)
    latest_stamp: int = 0
    retries: int = 0

    def reset(self) -> None:
        self.t_s = None
        self.peer = None
        self.buffer = []


@dataclass
class RecoveryRecord:
    """完成的恢复，用于核对与影子学习者的一致性"""
    newcomer: int
    peer: int
    t_s: int
    peer_state: LearnerState
    applied: List[Tuple[int, int]]
    installed: LearnerState
    retries: int


def select_peer(candidates: Sequence[int], exclude: Optional[int] = None) -> int:
    """编号最小的健康学习者"""
    healthy = sorted(m for m in candidates if m != exclude)
    if not healthy:
        raise RecoveryUnavailableError("没有健康的同伴学习者")
    return healthy[0]


def recovery_request(attempt: RecoveryAttempt, vclock) -> Message:
    return Message(MessageKind.RECOVERY_REQUEST, attempt.newcomer, vclock.copy(), {"t_s": attempt.t_s})


def peer_ready(peer: Learner, t_s: int) -> bool:
    """同伴已见到 t_s"""
    return peer.state.t_global_known >= t_s


def recovery_payload(peer: Learner, t_s: int, model_bits: int) -> Message:
    """同伴状态的拷贝；链路上按 3 倍模型大小计（参数与两份优化器矩）"""
    state = peer.state.copy()
    meta = {"t_s": t_s, "peer": peer.learner_id, "peer_t_global_known": state.t_global_known}
    return Message(MessageKind.RECOVERY_PAYLOAD, peer.learner_id, state.vclock.copy(), meta,
                   state=state, size_bits=3 * model_bits)


def check_budget(attempt: RecoveryAttempt, H: int) -> None:
    """恢复必须在 H 个同步步内完成"""
    if attempt.t_s is not None and attempt.latest_stamp - attempt.t_s > H:
        raise RecoveryBudgetExceeded(
            f"学习者 {attempt.newcomer} 的恢复超过 {H} 个同步步 (t_s={attempt.t_s}, 当前 {attempt.latest_stamp})")


def buffer_broadcast(attempt: RecoveryAttempt, msg: Message) -> bool:
    """
    缓冲一条全局分片

    Returns:
        bool: 这是第一条（确定 t_s），调用方应发出恢复请求
    """
    stamp = int(msg.meta["stamp"])
    attempt.latest_stamp = max(attempt.latest_stamp, stamp)
    if attempt.t_s is None:
        attempt.t_s = stamp
        attempt.buffer = [msg]
        return True
    attempt.buffer.append(msg)
    return False


def restart_attempt(attempt: RecoveryAttempt) -> None:
    """放弃当前 t_s，以最近缓冲的全局分片作为新的 t_s"""
    attempt.retries += 1
    latest = [m for m in attempt.buffer if int(m.meta["stamp"]) == attempt.latest_stamp]
    attempt.peer = None
    if latest:
        attempt.t_s = attempt.latest_stamp
        attempt.buffer = latest
    else:
        attempt.reset()
    logger.warning(f"学习者 {attempt.newcomer} 恢复超时，改用 t_s={attempt.t_s} 重试")


def install_recovery(newcomer: Learner, payload: Message, attempt: RecoveryAttempt) -> RecoveryRecord:
    """
    安装同伴状态，然后按顺序应用 stamp 大于同伴 t_global_known 的缓冲分片

    Args:
        newcomer: 新学习者（状态将被替换）
        payload: 恢复负载
        attempt: 当前恢复尝试

    Returns:
        RecoveryRecord
    """
    peer_state: LearnerState = payload.state
    m = newcomer.learner_id
    state = peer_state.copy(learner_id=m)
    state.vclock.entries[m] = state.t_m
    newcomer.state = state
    newcomer.inbox = []
    applied = []
    for msg in attempt.buffer:
        stamp = int(msg.meta["stamp"])
        if stamp <= peer_state.t_global_known:
            continue
        p = int(msg.meta["fragment"])
        newcomer.state.vclock.merge_in(msg.vclock)
        newcomer.apply_global(p, msg.fragment, stamp)
        applied.append((p, stamp))
    logger.info(f"学习者 {m} 从学习者 {payload.meta['peer']} 恢复完成 (t_s={attempt.t_s}, "
                f"补应用 {len(applied)} 个分片)")
    return RecoveryRecord(m, int(payload.meta["peer"]), int(attempt.t_s), peer_state.copy(), applied,
                          newcomer.state.copy(), attempt.retries)


def shadow_state(record: RecoveryRecord, history: Dict[int, Tuple[int, object]], layout, workload,
                 alpha: float = 0.0) -> LearnerState:
    """一直在线、持有同伴 t_s 状态的影子学习者按同样顺序应用分片后的状态"""
    shadow = Learner(record.peer_state.copy(learner_id=record.newcomer), layout, workload, alpha)
    for p, stamp in record.applied:
        shadow.apply_global(p, history[stamp][1], stamp)
    return shadow.state


def recover_learner(newcomer: Learner, peers: Dict[int, Learner], broadcasts: Sequence[Message],
                    model_bits: int = 0) -> RecoveryRecord:
    """
    进程内走完一次恢复：第一条广播确定 t_s，选编号最小的同伴，同伴见到 t_s 后给出状态

    Args:
        newcomer: 新学习者
        peers: 健康同伴，按编号索引（调用方负责让同伴按同样顺序接收广播）
        broadcasts: 新学习者加入后收到的全局分片，按到达顺序
        model_bits: 模型比特数（只影响负载的名义大小）

    Returns:
        RecoveryRecord
    """
    if not broadcasts:
        raise RecoveryUnavailableError(f"学习者 {newcomer.learner_id} 还没有收到任何全局分片")
    attempt = RecoveryAttempt(newcomer.learner_id)
    for msg in broadcasts:
        buffer_broadcast(attempt, msg)
    attempt.peer = select_peer(list(peers), exclude=newcomer.learner_id)
    peer = peers[attempt.peer]
    if not peer_ready(peer, attempt.t_s):
        raise RecoveryUnavailableError(f"同伴 {attempt.peer} 尚未见到 t_s={attempt.t_s}")
    return install_recovery(newcomer, recovery_payload(peer, attempt.t_s, model_bits), attempt)
