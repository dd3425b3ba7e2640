"""
从快照恢复运行
有磁带时按切点回放剩余事件；没有磁带时从快照重建运行时继续确定性运行
"""
import logging
from pathlib import Path
from typing import Callable, Optional, Union

from src.causality.replay import ReplayEngine, ReplayResult
from src.causality.tape import Tape, TapeRecorder
from src.chaos.simulator import ChaosTimeline
from src.fragmentation.planners import FragmentPlan
from src.resilience.snapshot import Snapshot, load_snapshot
from src.runtime.scheduler import Simulation, SimulationResult

logger = logging.getLogger(__name__)


def resume(snapshot: Union[Snapshot, str, Path], config, workload, tape: Optional[Tape] = None,
           plan: Optional[FragmentPlan] = None, timeline: Optional[ChaosTimeline] = None,
           recorder: Optional[TapeRecorder] = None, snapshot_dir: Optional[str] = None,
           observer: Optional[Callable] = None) -> Union[ReplayResult, SimulationResult]:
    """
    从快照继续

    Args:
        snapshot: 快照对象或 snap_<t_s> 目录
        config: 实验配置
        workload: 工作负载（张量列表必须与快照一致）
        tape: 给定时按磁带回放切点之后的事件
        plan: 分片方案
        timeline: 无磁带恢复时使用的停顿时间线
        recorder: 无磁带恢复时继续记录的磁带
        snapshot_dir: 无磁带恢复时新快照的目录
        observer: 每次合并后的回调

    Returns:
        ReplayResult 或 SimulationResult
    """
    if not isinstance(snapshot, Snapshot):
        snapshot = load_snapshot(snapshot, workload.tensors)
    if tape is not None:
        logger.info(f"按磁带从快照 {snapshot.snapshot_id} 恢复")
        return ReplayEngine(config, tape, workload, plan).restore(snapshot).run()
    sim = Simulation.from_snapshot(config, workload, snapshot, plan, timeline, recorder, snapshot_dir, observer)
    return sim.run()
