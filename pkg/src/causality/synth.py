"""
合成磁带
不做数值计算，只用计时负载与故障时间线跑一遍确定性调度，得到可回放的磁带
"""
import logging
from pathlib import Path
from typing import Optional, Union

from src.causality.tape import Tape, TapeHeader, TapeRecorder
from src.chaos.simulator import ChaosTimeline, simulate_for
from src.harness.tasks import TaskWorkload
from src.runtime.scheduler import Simulation
from src.runtime.workload import TimingWorkload

logger = logging.getLogger(__name__)


def timing_workload(config) -> TimingWorkload:
    """与真实任务张量、批量一致的计时负载"""
    task = TaskWorkload.from_config(config)
    return TimingWorkload(task.tensors, task.batch_size or 1, task.tokens_per_example, task.batch_sizes())


def generate_synthetic_tape(config, path: Optional[Union[str, Path]] = None,
                            timeline: Optional[ChaosTimeline] = None) -> Tape:
    """
    生成合成磁带

    Args:
        config: 实验配置；启用故障时按配置模拟时间线
        path: 给定时边生成边写入 JSON Lines 文件
        timeline: 显式指定的停顿时间线（优先于配置）

    Returns:
        Tape: 头部带 synthetic 标记
    """
    if timeline is None:
        run = simulate_for(config)
        timeline = run.timeline if run is not None else None
    recorder = TapeRecorder(TapeHeader.from_config(config, synthetic=True), path)
    try:
        sim = Simulation(config, timing_workload(config), timeline=timeline, recorder=recorder)
        result = sim.run()
    finally:
        recorder.close()
    logger.info(f"合成磁带完成: {len(recorder.tape)} 条事件，同步器到达第 {result.final_step} 步")
    return recorder.tape
