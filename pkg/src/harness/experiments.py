"""
实验驱动
数据并行参考、阻塞式流式参考与完整解耦协议运行，统一产出 ExperimentReport
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from src.aggregation.merging import LearnerContribution
from src.causality.replay import replay
from src.causality.tape import Tape, TapeHeader, TapeRecorder
from src.chaos.cluster import ChaosConfig
from src.chaos.simulator import ChaosRun, ChaosTimeline, dp_elastic_baseline, goodput, simulate_for, uptime
from src.core.config import config_hash
from src.core.params import ParamStore, checksum
from src.fragmentation.layout import FragmentLayout
from src.fragmentation.planners import FragmentPlan, plan_from_strategy
from src.harness.tasks import TaskWorkload
from src.optim.inner import InnerOptState, inner_step
from src.runtime.learner import Learner, LearnerState
from src.runtime.scheduler import Simulation, SimulationResult
from src.runtime.syncer import Syncer

logger = logging.getLogger(__name__)


@dataclass
class ReferenceResult:
    """参考循环的结果"""
    theta: ParamStore
    losses: List[float]
    learners: Dict[int, LearnerState] = field(default_factory=dict)

    def checksum(self) -> str:
        return checksum(self.theta.values)


@dataclass
class ExperimentReport:
    """一次实验的汇总"""
    method: str
    mode: str
    seed: int
    num_learners: int
    quorum: int
    final_step: int
    end_time: float
    final_loss: float
    final_accuracy: Optional[float] = None
    goodput: float = 1.0
    uptime: float = 1.0
    baseline_goodput: Optional[float] = None
    mean_admitted: float = 0.0
    admitted: List[int] = field(default_factory=list)
    stalls: int = 0
    recoveries: int = 0
    snapshots: List[int] = field(default_factory=list)
    loss_curve: List[Tuple[int, float, float]] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def summary(self) -> Dict[str, Any]:
        """一行表格用的标量字段"""
        return {
            "method": self.method, "mode": self.mode, "seed": self.seed, "M": self.num_learners,
            "K": self.quorum, "final_step": self.final_step, "end_time": self.end_time,
            "final_loss": self.final_loss, "final_accuracy": self.final_accuracy,
            "goodput": self.goodput, "uptime": self.uptime, "baseline_goodput": self.baseline_goodput,
            "mean_admitted": self.mean_admitted, "stalls": self.stalls, "recoveries": self.recoveries,
            "syncer_checksum": self.checksums.get("syncer", ""), "config_hash": self.config_hash,
        }


def _workload(config, workload: Optional[TaskWorkload]) -> TaskWorkload:
    return workload if workload is not None else TaskWorkload.from_config(config)


def run_dp_reference(config, workload: Optional[TaskWorkload] = None, steps: Optional[int] = None) -> ReferenceResult:
    """
    数据并行参考：每步对 M 个分片的梯度求平均后做一次内层更新

    Args:
        config: 实验配置
        workload: 任务负载，默认按配置构建
        steps: 步数，默认 runtime.total_steps

    Returns:
        ReferenceResult
    """
    workload = _workload(config, workload)
    steps = config.runtime.total_steps if steps is None else steps
    M = config.runtime.num_learners
    theta = workload.initial_params()
    opt = InnerOptState.from_settings(theta.total_size, config.optim)
    losses = []
    for _ in range(steps):
        total_loss, total_grad = 0.0, np.zeros(theta.total_size)
        for m in range(M):
            loss, grad = workload.loss_and_grad(theta, workload.next_batch(m, workload.examples_for(m)))
            total_loss += loss
            total_grad = total_grad + grad
        theta, opt = inner_step(opt, theta, total_grad / M)
        losses.append(total_loss / M)
    logger.info(f"数据并行参考完成: {steps} 步, 最终批量损失 {losses[-1] if losses else float('nan'):.6f}")
    return ReferenceResult(theta, losses)


def run_streaming_reference(config, workload: Optional[TaskWorkload] = None,
                            plan: Optional[FragmentPlan] = None) -> ReferenceResult:
    """
    阻塞式流式参考：每步所有学习者先各走一步，需要同步的分片立即合并所有学习者并广播

    与 K=M、τ=0、零延迟、同速、无故障的解耦运行逐位一致。
    """
    workload = _workload(config, workload)
    rt = config.runtime
    tensors = list(workload.tensors)
    if plan is None:
        plan = plan_from_strategy(tensors, rt.fragmentation, rt.fragments, rt.sync_interval)
    layout = FragmentLayout.build(tensors, plan)
    initial = workload.initial_params()
    syncer = Syncer.create(initial, plan, layout, config, computes=True)
    learners = {}
    for m in range(rt.num_learners):
        opt = InnerOptState.from_settings(initial.total_size, config.optim)
        learners[m] = Learner(LearnerState.fresh(m, initial, opt, plan.P), layout, workload, rt.alpha)

    losses = []
    for t in range(1, rt.total_steps + 1):
        step_losses = []
        for m, learner in learners.items():
            learner.compute(workload.examples_for(m))
            step_losses.append(learner.last_loss)
        losses.append(float(np.mean(step_losses)))
        p = plan.fragment_at(t)
        if p is not None:
            contribs = [_contribution(learner, p) for learner in learners.values()]
            outcome = syncer.merge(t, p, contribs)
            message = syncer.broadcast_message(outcome)
            for learner in learners.values():
                learner.receive(message)
                learner.drain()
        syncer.advance()
    return ReferenceResult(syncer.state.theta.copy(), losses,
                           {m: l.state.copy() for m, l in learners.items()})


def _contribution(learner: Learner, p: int) -> LearnerContribution:
    st = learner.state
    return LearnerContribution(st.learner_id, p, learner.fragment(p).copy(), int(st.c_steps[p]),
                               int(st.c_tokens[p]))


class LossTracker:
    """合并回调：每 every 次合并评估一次全局模型"""

    def __init__(self, workload: TaskWorkload, every: int = 1):
        self.workload = workload
        self.every = max(1, every)
        self.curve: List[Tuple[int, float, float]] = []
        self._merges = 0

    def __call__(self, runner, outcome) -> None:
        self._merges += 1
        if self._merges % self.every:
            return
        loss = self.workload.evaluate(runner.syncer.state.theta)["loss"]
        self.curve.append((int(outcome.t), float(runner.now), float(loss)))


def _chaos_metrics(config, run: Optional[ChaosRun], end_time: float) -> Tuple[float, float, Optional[float]]:
    if run is None or end_time <= 0:
        return 1.0, 1.0, None
    meter = run.meter_until(end_time)
    chaos = ChaosConfig.from_settings(config.chaos, config.runtime.num_learners)
    baseline = dp_elastic_baseline(chaos, end_time, config.runtime.step_time, config.seed)
    return goodput(meter), uptime(meter), goodput(baseline)


def _report(config, method: str, mode: str, theta: ParamStore, workload: TaskWorkload,
            result: Optional[SimulationResult] = None, final_step: int = 0, end_time: float = 0.0,
            checksums: Optional[Dict[str, str]] = None, run: Optional[ChaosRun] = None,
            curve: Optional[List[Tuple[int, float, float]]] = None) -> ExperimentReport:
    metrics = workload.evaluate(theta)
    admitted, stalls, recoveries, snapshots = [], 0, 0, []
    if result is not None:
        admitted = [r.contributed for r in result.metrics.sync_rounds()]
        stalls = result.metrics.stalls
        recoveries = result.metrics.recoveries
        snapshots = list(result.metrics.snapshots)
        final_step, end_time = result.final_step, result.end_time
        checksums = result.checksums()
    good, up, base = _chaos_metrics(config, run, end_time)
    rt = config.runtime
    return ExperimentReport(
        method=method, mode=mode, seed=config.seed, num_learners=rt.num_learners, quorum=rt.quorum,
        final_step=final_step, end_time=end_time, final_loss=float(metrics["loss"]),
        final_accuracy=metrics.get("accuracy"), goodput=good, uptime=up, baseline_goodput=base,
        mean_admitted=float(np.mean(admitted)) if admitted else 0.0, admitted=admitted,
        stalls=stalls, recoveries=recoveries, snapshots=snapshots, loss_curve=list(curve or []),
        checksums=dict(checksums or {}), config_hash=config_hash(config),
    )


def run_decoupled(config, workload: Optional[TaskWorkload] = None, tape: Optional[Tape] = None,
                  record: Optional[Union[str, Path]] = None, timeline: Optional[ChaosTimeline] = None,
                  snapshot_dir: Optional[str] = None, eval_every: Optional[int] = None) -> ExperimentReport:
    """
    完整协议运行

    Args:
        config: 实验配置
        workload: 任务负载，默认按配置构建
        tape: 给定时按磁带回放，不再模拟
        record: 磁带输出路径
        timeline: 显式停顿时间线（默认按 chaos 配置模拟）
        snapshot_dir: 快照目录（snapshot.interval > 0 时生效）
        eval_every: 损失曲线的采样间隔（合并次数），默认 H

    Returns:
        ExperimentReport
    """
    workload = _workload(config, workload)
    rt = config.runtime
    if tape is not None:
        result = replay(tape, config, workload)
        return _report(config, "decoupled", "replay", result.theta, workload, final_step=result.final_step,
                       checksums=result.checksums())

    run = simulate_for(config) if timeline is None else None
    if run is not None:
        timeline = run.timeline
    recorder = TapeRecorder(TapeHeader.from_config(config), record) if record else None
    tracker = LossTracker(workload, eval_every or rt.sync_interval)
    try:
        if rt.mode == "live":
            from src.runtime.live import LiveRunner
            result = LiveRunner(config, workload, recorder=recorder, observer=tracker).run()
        else:
            sim = Simulation(config, workload, timeline=timeline, recorder=recorder,
                             snapshot_dir=snapshot_dir if config.snapshot.interval > 0 else None,
                             observer=tracker)
            result = sim.run()
    finally:
        if recorder is not None:
            recorder.close()
    report = _report(config, "decoupled", rt.mode, result.theta, workload, result=result, run=run,
                     curve=tracker.curve)
    logger.info(f"解耦运行完成: 损失 {report.final_loss:.6f}, goodput {report.goodput:.4f}, "
                f"平均接纳 {report.mean_admitted:.2f}")
    return report


def run_experiment(config, workload: Optional[TaskWorkload] = None, **kwargs) -> ExperimentReport:
    """按 runtime.method 分派到数据并行参考或解耦运行"""
    workload = _workload(config, workload)
    if config.runtime.method == "dp":
        ref = run_dp_reference(config, workload)
        # 数据并行作业的停顿按整体弹性基线计
        end = config.runtime.total_steps * config.runtime.step_time
        report = _report(config, "dp", "det", ref.theta, workload, final_step=config.runtime.total_steps,
                         end_time=end, checksums={"syncer": ref.checksum()})
        if config.chaos.enabled:
            chaos = ChaosConfig.from_settings(config.chaos, config.runtime.num_learners)
            meter = dp_elastic_baseline(chaos, end, config.runtime.step_time, config.seed)
            report.goodput = report.baseline_goodput = goodput(meter)
            report.uptime = uptime(meter)
        report.loss_curve = [(t + 1, float(t + 1), loss) for t, loss in enumerate(ref.losses)]
        return report
    return run_decoupled(config, workload, **kwargs)
