"""
一致性快照
基于向量时钟标记的 Chandy-Lamport 快照：同步器发起、学习者收到标记时保存检查点、
同步器收集在途消息并在所有在线学习者返回标记后落盘
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from src.causality.vector_clock import SYNCER_ID, VectorClock
from src.core.errors import SnapshotIntegrityError
from src.core.params import ParamStore, TensorSpec
from src.optim.inner import InnerOptState
from src.optim.outer import OuterOptState
from src.runtime.learner import LearnerState
from src.runtime.messages import Message
from src.runtime.syncer import LearnerInfo, Syncer

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass
class LearnerCheckpoint:
    """学习者检查点：状态、已送达未应用的全局分片、数据流位置"""
    snapshot_id: int
    state: LearnerState
    inbox: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    data_stream: Dict[str, Any] = field(default_factory=dict)
    tape_seq: Optional[int] = None


@dataclass
class SyncerCheckpoint:
    t: int
    theta: np.ndarray
    momenta: Dict[int, np.ndarray]
    vclock: VectorClock
    table: Dict[int, LearnerInfo]
    broadcasts: List[int]
    history: Dict[int, Tuple[int, np.ndarray]]
    time: float = 0.0
    tape_seq: Optional[int] = None


@dataclass
class PendingSnapshot:
    snapshot_id: int
    syncer: SyncerCheckpoint
    learners: Dict[int, LearnerCheckpoint] = field(default_factory=dict)
    returned: Set[int] = field(default_factory=set)
    absent: Set[int] = field(default_factory=set)
    in_flight: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class Snapshot:
    """完成的快照"""
    snapshot_id: int
    syncer: SyncerCheckpoint
    learners: Dict[int, LearnerCheckpoint]
    in_flight: List[Dict[str, Any]]
    absent: List[int]
    cuts: Dict[int, int] = field(default_factory=dict)
    path: Optional[Path] = None


def should_begin(t_s: int, interval: int, pending: Optional[PendingSnapshot]) -> bool:
    """t_s mod T_c = 0 且没有进行中的快照"""
    return interval > 0 and t_s > 0 and t_s % interval == 0 and pending is None


def begin_snapshot(syncer: Syncer, interval: int, now: float = 0.0,
                   tape_seq: Optional[int] = None) -> Optional[PendingSnapshot]:
    """
    同步器在第 t_s 步开始时发起快照，保存自身参数、外层优化器状态与元数据表

    Returns:
        PendingSnapshot；t_s 不是 T_c 的倍数时返回 None
    """
    st = syncer.state
    if not should_begin(st.t, interval, None):
        return None
    # 保留足以覆盖在途与恢复缓冲的最近广播
    keep = 2 * syncer.plan.H + syncer.tau + 1 if syncer.plan.H else len(st.broadcasts)
    recent = st.broadcasts[-keep:]
    checkpoint = SyncerCheckpoint(
        t=st.t,
        theta=st.theta.values.copy(),
        momenta={p: o.momentum.copy() for p, o in st.outer.items()},
        vclock=st.vclock.copy(),
        table={m: LearnerInfo.from_dict(info.to_dict()) for m, info in st.table.items()},
        broadcasts=list(st.broadcasts),
        history={s: (st.history[s][0], None if st.history[s][1] is None else st.history[s][1].copy())
                 for s in recent if s in st.history},
        time=now,
        tape_seq=tape_seq,
    )
    logger.info(f"开始快照 {st.t}")
    return PendingSnapshot(st.t, checkpoint)


def marker_crossing(previous: int, received: int, interval: int) -> Optional[int]:
    """
    学习者收到同步器消息时判断是否越过新的快照标记

    Args:
        previous: 此前已知的同步器步
        received: 消息携带的同步器步
        interval: T_c

    Returns:
        应保存检查点的快照编号；没有越过新的倍数时返回 None
    """
    if interval <= 0 or received < interval:
        return None
    new_epoch, old_epoch = received // interval, previous // interval
    if new_epoch <= old_epoch:
        return None
    if new_epoch - old_epoch > 1:
        logger.warning(f"跳过快照标记 {(old_epoch + 1) * interval}..{(new_epoch - 1) * interval}，"
                       f"按 {new_epoch * interval} 保存检查点")
    return new_epoch * interval


def learner_on_marker(learner, snapshot_id: int, data_stream: Optional[Dict[str, Any]] = None,
                      tape_seq: Optional[int] = None) -> LearnerCheckpoint:
    """在处理标记消息之前保存学习者检查点（含待应用的全局分片）"""
    inbox = [(int(m.meta["fragment"]), int(m.meta["stamp"]), np.array(m.fragment, copy=True))
             for m in learner.inbox]
    return LearnerCheckpoint(snapshot_id, learner.state.copy(), inbox, data_stream or {}, tape_seq)


def message_record(msg: Message) -> Dict[str, Any]:
    record = {"kind": int(msg.kind), "sender": msg.sender, "vclock": msg.vclock.to_list(), "meta": msg.meta}
    if msg.fragment is not None:
        record["fragment"] = [float(x) for x in msg.fragment]
    return record


def observe_learner_message(pending: PendingSnapshot, msg: Message) -> None:
    """同步器侧：早于快照的消息记为在途，携带新步数的消息表示标记已返回"""
    if msg.vclock.get(SYNCER_ID) < pending.snapshot_id:
        pending.in_flight.append(message_record(msg))
    elif msg.sender in pending.learners:
        pending.returned.add(msg.sender)
    else:
        # 没有检查点却已越过标记（例如刚完成恢复），本次快照视为缺席
        pending.absent.add(msg.sender)


def snapshot_complete(pending: PendingSnapshot, live_learners: Sequence[int]) -> bool:
    return all(m in pending.returned or m in pending.absent for m in live_learners)


def syncer_finalize_snapshot(pending: PendingSnapshot, live_learners: Sequence[int],
                             all_learners: Sequence[int]) -> Snapshot:
    """所有在线学习者返回标记后生成快照，宕机或恢复中的学习者列为缺席"""
    included = {m: cp for m, cp in pending.learners.items() if m in pending.returned}
    absent = sorted(set(all_learners) - set(included))
    cuts = {SYNCER_ID: pending.syncer.tape_seq} if pending.syncer.tape_seq is not None else {}
    for m, cp in included.items():
        if cp.tape_seq is not None:
            cuts[m] = cp.tape_seq
    return Snapshot(pending.snapshot_id, pending.syncer, included, list(pending.in_flight), absent, cuts)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _learner_arrays(cp: LearnerCheckpoint) -> Dict[str, np.ndarray]:
    st = cp.state
    arrays = {
        "theta": st.theta.values,
        "c_steps": st.c_steps,
        "c_tokens": st.c_tokens,
        "fragment_stamps": st.fragment_stamps,
    }
    if st.inner_opt.m is not None:
        arrays["opt_m"] = st.inner_opt.m
        arrays["opt_v"] = st.inner_opt.v
    for i, (_, _, values) in enumerate(cp.inbox):
        arrays[f"inbox_{i}"] = values
    return arrays


def persist_snapshot(snapshot: Snapshot, directory: Union[str, Path]) -> Path:
    """
    落盘: <dir>/snap_<t_s>/syncer.npz、learner_<m>.npz、manifest.json

    Returns:
        快照目录
    """
    root = Path(directory) / f"snap_{snapshot.snapshot_id}"
    root.mkdir(parents=True, exist_ok=True)
    sy = snapshot.syncer
    syncer_arrays = {"theta": sy.theta}
    for p, mom in sy.momenta.items():
        syncer_arrays[f"momentum_{p}"] = mom
    for stamp, (_, values) in sy.history.items():
        if values is not None:
            syncer_arrays[f"history_{stamp}"] = values
    np.savez(root / "syncer.npz", **syncer_arrays)
    files = {"syncer.npz": _sha256(root / "syncer.npz")}

    learners = {}
    for m, cp in sorted(snapshot.learners.items()):
        name = f"learner_{m}.npz"
        np.savez(root / name, **_learner_arrays(cp))
        files[name] = _sha256(root / name)
        st = cp.state
        learners[str(m)] = {
            "file": name,
            "t_m": st.t_m,
            "t_global_known": st.t_global_known,
            "vclock": st.vclock.to_list(),
            "inner": {
                "kind": st.inner_opt.kind, "lr": st.inner_opt.lr, "beta1": st.inner_opt.beta1,
                "beta2": st.inner_opt.beta2, "eps": st.inner_opt.eps,
                "weight_decay": st.inner_opt.weight_decay, "step": st.inner_opt.step,
            },
            "inbox": [[p, stamp] for p, stamp, _ in cp.inbox],
            "data_stream": cp.data_stream,
        }

    manifest = {
        "snapshot_id": snapshot.snapshot_id,
        "files": files,
        "absent_learners": snapshot.absent,
        "in_flight": snapshot.in_flight,
        "cuts": {str(k): v for k, v in snapshot.cuts.items()},
        "syncer": {
            "t": sy.t,
            "time": sy.time,
            "vclock": sy.vclock.to_list(),
            "table": {str(m): info.to_dict() for m, info in sy.table.items()},
            "broadcasts": sy.broadcasts,
            "history": {str(s): p for s, (p, _) in sy.history.items()},
            "fragments": sorted(sy.momenta),
        },
        "learners": learners,
    }
    with open(root / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
    snapshot.path = root
    logger.info(f"快照 {snapshot.snapshot_id} 已保存: {root}")
    return root


def load_snapshot(path: Union[str, Path], tensors=None) -> Snapshot:
    """
    读取快照并校验 sha256

    Args:
        path: snap_<t_s> 目录
        tensors: 模型张量列表；为 None 时参数以单个扁平张量表示

    Returns:
        Snapshot
    """
    root = Path(path)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise SnapshotIntegrityError(f"快照清单不存在: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise SnapshotIntegrityError(f"快照清单无法解析: {e}") from e
    for name, digest in manifest["files"].items():
        file = root / name
        if not file.exists() or _sha256(file) != digest:
            raise SnapshotIntegrityError(f"快照文件校验失败: {file}")

    sy = manifest["syncer"]
    with np.load(root / "syncer.npz") as data:
        theta = data["theta"].copy()
        momenta = {p: data[f"momentum_{p}"].copy() for p in sy["fragments"]}
        history = {}
        for s, p in sy["history"].items():
            key = f"history_{s}"
            history[int(s)] = (int(p), data[key].copy() if key in data.files else None)
    if tensors is None:
        tensors = [TensorSpec("params", theta.size)]
    syncer = SyncerCheckpoint(
        t=int(sy["t"]), theta=theta, momenta=momenta, vclock=VectorClock.from_list(sy["vclock"]),
        table={int(m): LearnerInfo.from_dict(info) for m, info in sy["table"].items()},
        broadcasts=[int(s) for s in sy["broadcasts"]], history=history, time=float(sy["time"]),
    )

    learners = {}
    for key, info in manifest["learners"].items():
        m = int(key)
        with np.load(root / info["file"]) as data:
            inner = info["inner"]
            opt = InnerOptState(inner["kind"], inner["lr"], inner["beta1"], inner["beta2"], inner["eps"],
                                inner["weight_decay"],
                                data["opt_m"].copy() if "opt_m" in data.files else None,
                                data["opt_v"].copy() if "opt_v" in data.files else None,
                                int(inner["step"]))
            state = LearnerState(
                learner_id=m,
                theta=ParamStore(tensors, data["theta"]),
                inner_opt=opt,
                t_m=int(info["t_m"]),
                t_global_known=int(info["t_global_known"]),
                c_steps=data["c_steps"].astype(np.int64),
                c_tokens=data["c_tokens"].astype(np.int64),
                fragment_stamps=data["fragment_stamps"].astype(np.int64),
                vclock=VectorClock.from_list(info["vclock"]),
            )
            inbox = [(int(p), int(stamp), data[f"inbox_{i}"].copy())
                     for i, (p, stamp) in enumerate(info["inbox"])]
        learners[m] = LearnerCheckpoint(manifest["snapshot_id"], state, inbox, info.get("data_stream", {}))

    cuts = {int(k): int(v) for k, v in manifest.get("cuts", {}).items()}
    syncer.tape_seq = cuts.get(SYNCER_ID)
    for m, cp in learners.items():
        cp.tape_seq = cuts.get(m)
    return Snapshot(int(manifest["snapshot_id"]), syncer, learners, manifest["in_flight"],
                    [int(m) for m in manifest["absent_learners"]], cuts, root)


def latest_snapshot(directory: Union[str, Path]) -> Optional[Path]:
    """目录下编号最大的快照，没有则返回 None"""
    root = Path(directory)
    if not root.exists():
        return None
    candidates = []
    for child in root.glob("snap_*"):
        try:
            candidates.append((int(child.name.split("_", 1)[1]), child))
        except ValueError:
            continue
    candidates = [(sid, p) for sid, p in candidates if (p / MANIFEST).exists()]
    return max(candidates)[1] if candidates else None


def restore_outer(checkpoint: SyncerCheckpoint, template: Dict[int, OuterOptState]) -> Dict[int, OuterOptState]:
    """用检查点中的动量替换外层优化器状态（超参数沿用当前配置）"""
    return {p: replace(template[p], momentum=checkpoint.momenta[p].copy()) for p in template}
