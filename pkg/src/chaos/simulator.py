"""
故障模拟器
连续时间的切片故障、修复与重配置模拟，统计 goodput 与 uptime，并生成供运行时使用的停顿时间线
"""
import bisect
import heapq
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.chaos.cluster import ChaosConfig, ClusterState, SECONDS_PER_YEAR, sample_repair_times
from src.core.errors import RangeError
from src.core.rng import named_stream

logger = logging.getLogger(__name__)

# 同一时刻的事件顺序：修复、重配置结束、故障
_REPAIR, _RECONF_END, _FAILURE = 0, 1, 2


@dataclass
class GoodputMeter:
    """goodput 与 uptime 的累计量"""
    useful_slice_time: float = 0.0
    allocated_slice_time: float = 0.0
    stepping_time: float = 0.0
    wall_time: float = 0.0

    def add(self, duration: float, useful_slices: float, total_slices: float, stepping: bool) -> None:
        self.useful_slice_time += duration * useful_slices
        self.allocated_slice_time += duration * total_slices
        self.wall_time += duration
        if stepping:
            self.stepping_time += duration


def goodput(meter: GoodputMeter) -> float:
    """有效切片时间 / 分配切片时间"""
    if meter.allocated_slice_time <= 0:
        raise RangeError("分配时间为 0，goodput 无定义")
    return meter.useful_slice_time / meter.allocated_slice_time


def uptime(meter: GoodputMeter) -> float:
    """至少一个学习者在训练的时间占比"""
    if meter.wall_time <= 0:
        raise RangeError("墙钟时间为 0，uptime 无定义")
    return meter.stepping_time / meter.wall_time


@dataclass
class LearnerTimeline:
    """单个学习者的停顿区间与规模变化"""
    stalls: List[Tuple[float, float]] = field(default_factory=list)
    outages: List[Tuple[float, float]] = field(default_factory=list)
    scale_changes: List[Tuple[float, float]] = field(default_factory=list)
    slowdowns: List[Tuple[float, float, float]] = field(default_factory=list)


class ChaosTimeline:
    """
    运行时消费的故障时间线

    stalls 为重配置区间（学习者暂停计算但仍能响应拉取），
    outages 为所有切片失效的区间（学习者宕机）。
    """

    def __init__(self, learners: Optional[Dict[int, LearnerTimeline]] = None):
        self.learners: Dict[int, LearnerTimeline] = learners or {}

    def _of(self, m: int) -> Optional[LearnerTimeline]:
        return self.learners.get(m)

    def next_available(self, m: int, t: float) -> float:
        """t 之后第一个不处于重配置区间的时刻"""
        line = self._of(m)
        if line is None:
            return t
        starts = [a for a, _ in line.stalls]
        i = bisect.bisect_right(starts, t) - 1
        while 0 <= i < len(line.stalls) and line.stalls[i][0] <= t < line.stalls[i][1]:
            t = line.stalls[i][1]
            i += 1
        return t

    def scale_at(self, m: int, t: float) -> float:
        line = self._of(m)
        if line is None or not line.scale_changes:
            return 1.0
        times = [a for a, _ in line.scale_changes]
        i = bisect.bisect_right(times, t) - 1
        return 1.0 if i < 0 else line.scale_changes[i][1]

    def slowdown_at(self, m: int, t: float) -> float:
        line = self._of(m)
        if line is None:
            return 1.0
        factor = 1.0
        for a, b, f in line.slowdowns:
            if a <= t < b:
                factor = max(factor, f)
        return factor

    def outages(self, m: int) -> List[Tuple[float, float]]:
        line = self._of(m)
        return list(line.outages) if line else []

    def is_dead(self, m: int, t: float) -> bool:
        return any(a <= t < b for a, b in self.outages(m))

    def stall_time(self, m: int) -> float:
        line = self._of(m)
        return sum(b - a for a, b in line.stalls) if line else 0.0


@dataclass
class ChaosRun:
    """一次模拟的结果：累计量、时间线与分段速率"""
    num_learners: int
    total_slices: int
    meter: GoodputMeter
    timeline: ChaosTimeline
    segments: List[Tuple[float, float, float, bool]]
    failures: int = 0

    def meter_until(self, horizon: float) -> GoodputMeter:
        """截止到 horizon 的累计量"""
        meter = GoodputMeter()
        for t0, t1, rate, stepping in self.segments:
            if t0 >= horizon:
                break
            meter.add(min(t1, horizon) - t0, rate, self.total_slices, stepping)
        if horizon > self.meter.wall_time:
            meter.add(horizon - max(self.meter.wall_time, 0.0), self.total_slices, self.total_slices, True)
        return meter


class ChaosSimulator:
    """
    故障模拟器

    每个时间步的故障数按泊松分布批量采样，步内时刻均匀分布；
    修复完成与重配置结束放在事件堆中按时间处理。
    """

    def __init__(self, config: ChaosConfig, step_time: float = 1.0, seed: int = 0, stream: str = "chaos"):
        if step_time <= 0:
            raise RangeError(f"step_time={step_time} 必须为正")
        self.config = config
        self.step_time = step_time
        self.seed = seed
        self.stream = stream

    def _failure_times(self, rng: np.random.Generator, horizon: float) -> np.ndarray:
        steps = int(np.ceil(horizon / self.step_time))
        lam = self.step_time / self.config.mtbf
        counts = rng.poisson(lam, size=steps)
        index = np.repeat(np.arange(steps, dtype=np.float64), counts)
        offsets = rng.random(index.size)
        times = np.sort((index + offsets) * self.step_time)
        return times[times < horizon]

    def _slowdowns(self, M: int, horizon: float) -> Dict[int, List[Tuple[float, float, float]]]:
        cfg = self.config
        result: Dict[int, List[Tuple[float, float, float]]] = {m: [] for m in range(M)}
        if cfg.slowdown_rate <= 0:
            return result
        for m in range(M):
            rng = named_stream(self.seed, "slowdown", m)
            n = int(rng.poisson(cfg.slowdown_rate * horizon))
            starts = np.sort(rng.random(n) * horizon)
            result[m] = [(float(a), float(a + cfg.slowdown_duration), cfg.slowdown_factor) for a in starts]
        return result

    def run(self, num_learners: int, horizon: float, worker: int = 0) -> ChaosRun:
        """
        模拟 [0, horizon)

        Args:
            num_learners: 学习者数 M
            horizon: 模拟时长
            worker: 随机流编号

        Returns:
            ChaosRun
        """
        if horizon <= 0:
            raise RangeError(f"horizon={horizon} 必须为正")
        rng = named_stream(self.seed, self.stream, worker)
        times = self._failure_times(rng, horizon)
        picks = rng.random(times.size)
        repairs = sample_repair_times(self.config, rng, times.size)
        if self.config.elastic:
            run = self._run_elastic(num_learners, horizon, times, picks, repairs)
        else:
            run = self._run_rigid(num_learners, horizon, times)
        for m, items in self._slowdowns(num_learners, horizon).items():
            run.timeline.learners[m].slowdowns = items
        logger.debug(f"故障模拟完成: M={num_learners}, 故障 {run.failures} 次, "
                     f"goodput={goodput(run.meter):.4f}")
        return run

    def _run_elastic(self, M: int, horizon: float, times: np.ndarray, picks: np.ndarray,
                     repairs: np.ndarray) -> ChaosRun:
        cfg = self.config
        S = cfg.slices_per_learner
        state = ClusterState(M, S)
        # up: 在线切片；joined: 当前配置里参与计算的切片（joined ≤ up）
        up = np.full(M, S, dtype=np.int64)
        joined = up.copy()
        lines = {m: LearnerTimeline() for m in range(M)}
        meter = GoodputMeter()
        segments: List[Tuple[float, float, float, bool]] = []
        events: List[Tuple[float, int, int]] = []
        total = M * S
        i, t_prev, failures = 0, 0.0, 0

        def integrate(t: float) -> None:
            if t <= t_prev:
                return
            active = (state.reconfiguring_until <= t_prev) & (joined > 0)
            rate = float(joined[active].sum())
            stepping = bool(active.any())
            meter.add(t - t_prev, rate, total, stepping)
            segments.append((t_prev, t, rate, stepping))

        def reconfigure(m: int, t: float, duration: float) -> None:
            if state.request_reconfiguration(m, t, duration):
                lines[m].stalls.append((t, t + duration))
                heapq.heappush(events, (t + duration, _RECONF_END, m))

        def rejoin(m: int, t: float) -> None:
            joined[m] = up[m]
            lines[m].scale_changes.append((t, joined[m] / S))

        while True:
            next_failure = times[i] if i < times.size else np.inf
            next_event = events[0][0] if events else np.inf
            t = min(next_failure, next_event, horizon)
            integrate(t)
            t_prev = t
            if t >= horizon:
                break
            if next_event <= next_failure:
                _, kind, key = heapq.heappop(events)
                if kind == _REPAIR:
                    m = state.learner_of(key)
                    up[m] += 1
                    if joined[m] == 0:
                        rejoin(m, t)
                        if lines[m].outages and lines[m].outages[-1][1] == np.inf:
                            lines[m].outages[-1] = (lines[m].outages[-1][0], t)
                        reconfigure(m, t, cfg.upscale_time)
                    elif state.is_reconfiguring(m, t):
                        rejoin(m, t)
                    elif up[m] - joined[m] >= cfg.rejoin_threshold:
                        rejoin(m, t)
                        reconfigure(m, t, cfg.upscale_time)
                continue
            slice_id = state.fail_slice(float(picks[i]), t, float(repairs[i]))
            i += 1
            if slice_id is None:
                continue
            failures += 1
            m = state.learner_of(slice_id)
            up[m] -= 1
            # 缩容时顺带并入已修好的切片
            rejoin(m, t)
            if up[m] == 0:
                lines[m].outages.append((t, np.inf))
            heapq.heappush(events, (float(state.failed_until[slice_id]), _REPAIR, slice_id))
            reconfigure(m, t, cfg.downscale_time)

        for line in lines.values():
            line.outages = [(a, b if b != np.inf else horizon) for a, b in line.outages]
        return ChaosRun(M, total, meter, ChaosTimeline(lines), segments, failures)

    def _run_rigid(self, M: int, horizon: float, times: np.ndarray) -> ChaosRun:
        """无弹性：每次故障整个作业停顿到满规模恢复，停顿期间的故障被吸收"""
        cfg = self.config
        total = M * cfg.slices_per_learner
        lines = {m: LearnerTimeline() for m in range(M)}
        meter = GoodputMeter()
        segments: List[Tuple[float, float, float, bool]] = []
        t_prev, stall_until, failures = 0.0, 0.0, 0
        for t in list(times) + [horizon]:
            t = float(min(t, horizon))
            # [t_prev, t) 内先停顿到 stall_until 再恢复
            boundary = min(max(stall_until, t_prev), t)
            if boundary > t_prev:
                meter.add(boundary - t_prev, 0.0, total, False)
                segments.append((t_prev, boundary, 0.0, False))
            if t > boundary:
                meter.add(t - boundary, float(total), total, True)
                segments.append((boundary, t, float(total), True))
            t_prev = t
            if t >= horizon:
                break
            failures += 1
            if t >= stall_until:
                stall_until = t + cfg.restore_time
                for line in lines.values():
                    line.stalls.append((t, stall_until))
        return ChaosRun(M, total, meter, ChaosTimeline(lines), segments, failures)


def dp_elastic_baseline(config: ChaosConfig, horizon: float, step_time: float = 1.0,
                        seed: int = 0) -> GoodputMeter:
    """
    数据并行基线：M=1 的整体作业，每次故障与修复都让全部切片停顿

    Args:
        config: 故障参数（n_chip 与分布式运行相同）
        horizon: 模拟时长
        step_time: 采样步长
        seed: 种子

    Returns:
        GoodputMeter
    """
    slices = max(1, round(config.n_chip / config.chips_per_slice))
    single = replace(config, slices_per_learner=slices)
    return ChaosSimulator(single, step_time, seed).run(1, horizon).meter


def upsize_downtime(model_bytes: float, bandwidth: float, step_time: float, H: int) -> Tuple[float, float]:
    """
    扩容停机时间

    数据并行至少要传输 3 倍模型（参数与两份优化器矩）；
    解耦方案只要 3 份拷贝能在 H 个同步步内传完就没有停机。

    Returns:
        (dp_downtime, decoupled_downtime)
    """
    if model_bytes <= 0 or bandwidth <= 0 or step_time <= 0 or H <= 0:
        raise RangeError("upsize_downtime 的参数必须为正")
    transfer = 3.0 * model_bytes * 8.0 / bandwidth
    return transfer, max(0.0, transfer - H * step_time)


DEFAULT_TABLE_M = (1, 2, 4, 8, 16)
DEFAULT_TABLE_N = (150_000, 300_000, 600_000, 1_200_000, 2_400_000)


def chaos_table(base: ChaosConfig, m_values: Sequence[int] = DEFAULT_TABLE_M,
                n_values: Sequence[int] = DEFAULT_TABLE_N, steps: int = 100_000,
                step_time: float = 1.0, seed: int = 0, include_rigid: bool = True) -> pd.DataFrame:
    """
    goodput / uptime 网格

    Args:
        base: 基础故障参数
        m_values: 学习者数
        n_values: 芯片数
        steps: 每格模拟步数
        step_time: 步长（秒）
        seed: 种子
        include_rigid: 是否追加 M=1 无弹性行

    Returns:
        DataFrame: 列 M, n_chip, mtbi, elastic, goodput, uptime
    """
    rows = []
    horizon = steps * step_time
    variants = [(M, True) for M in m_values]
    if include_rigid:
        variants.append((1, False))
    for M, elastic in variants:
        for n_chip in n_values:
            slices = max(1, round(n_chip / (M * base.chips_per_slice)))
            cell = replace(base, n_chip=n_chip, slices_per_learner=slices, elastic=elastic)
            run = ChaosSimulator(cell, step_time, seed, stream=f"chaos-table-{n_chip}").run(M, horizon, worker=M)
            rows.append({
                "M": M,
                "n_chip": n_chip,
                "mtbi": base.mtbi_chip / SECONDS_PER_YEAR,
                "elastic": elastic,
                "goodput": goodput(run.meter),
                "uptime": uptime(run.meter),
            })
            logger.info(f"M={M}, N={n_chip}, elastic={elastic}: goodput={rows[-1]['goodput']:.3f}")
    return pd.DataFrame(rows)


def run_horizon(config) -> float:
    """覆盖一次运行所需的模拟时长：按最慢速度等级完成 T 步的 4 倍"""
    rt = config.runtime
    slowest = min(rt.speed_classes) if rt.speed_classes else 1.0
    return 4.0 * rt.total_steps * rt.step_time / max(slowest, 1e-9)


def simulate_for(config) -> Optional[ChaosRun]:
    """
    按实验配置生成故障时间线；未启用故障时返回 None

    Args:
        config: 实验配置

    Returns:
        Optional[ChaosRun]
    """
    if not config.chaos.enabled:
        return None
    M = config.runtime.num_learners
    chaos = ChaosConfig.from_settings(config.chaos, M)
    return ChaosSimulator(chaos, config.runtime.step_time, config.seed).run(M, run_horizon(config))
