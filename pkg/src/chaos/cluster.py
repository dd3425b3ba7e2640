"""
集群故障模型
芯片、切片、泊松中断、指数化 Weibull 修复时间与弹性重配置代价
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy.stats import exponweib

from src.core.errors import RangeError

logger = logging.getLogger(__name__)

SECONDS_PER_YEAR = 365 * 24 * 3600.0


@dataclass(frozen=True)
class ChaosConfig:
    """
    故障模拟参数（时间单位: 秒）

    repair_median 决定指数化 Weibull 的尺度参数，使修复时间中位数等于该值。
    修好的切片等到学习者下一次重配置时再并入；学习者已无在线切片，
    或等待并入的切片达到名义切片数的 rejoin_fraction 时，立即扩容。
    无弹性时一次故障停顿 spare_swap_time + upscale_time，整体以满规模重启。
    """
    mtbi_chip: float = SECONDS_PER_YEAR
    n_chip: int = 1_200_000
    chips_per_slice: int = 256
    slices_per_learner: int = 586
    downscale_time: float = 30.0
    upscale_time: float = 30.0
    spare_swap_time: float = 50.0
    rejoin_fraction: float = 0.25
    repair_alpha: float = 2.0
    repair_k: float = 1.5
    repair_median: float = 600.0
    elastic: bool = True
    slowdown_rate: float = 0.0
    slowdown_factor: float = 2.0
    slowdown_duration: float = 10.0

    def __post_init__(self):
        positive = {
            "mtbi_chip": self.mtbi_chip, "n_chip": self.n_chip,
            "chips_per_slice": self.chips_per_slice, "slices_per_learner": self.slices_per_learner,
            "repair_alpha": self.repair_alpha, "repair_k": self.repair_k,
            "repair_median": self.repair_median,
        }
        for name, value in positive.items():
            if value <= 0:
                raise RangeError(f"{name}={value} 必须为正")
        for name in ("downscale_time", "upscale_time", "spare_swap_time"):
            if getattr(self, name) < 0:
                raise RangeError(f"{name} 不能为负")
        if not 0 < self.rejoin_fraction <= 1:
            raise RangeError(f"rejoin_fraction={self.rejoin_fraction} 必须在 (0, 1] 内")

    @classmethod
    def from_settings(cls, settings, num_learners: int) -> "ChaosConfig":
        return cls(
            mtbi_chip=settings.mtbi_chip,
            n_chip=settings.n_chip,
            chips_per_slice=settings.chips_per_slice,
            slices_per_learner=settings.slices_for(num_learners),
            downscale_time=settings.downscale_time,
            upscale_time=settings.upscale_time,
            spare_swap_time=settings.spare_swap_time,
            rejoin_fraction=settings.rejoin_fraction,
            repair_alpha=settings.repair_alpha,
            repair_k=settings.repair_k,
            repair_median=settings.repair_median,
            elastic=settings.elastic,
            slowdown_rate=settings.slowdown_rate,
            slowdown_factor=settings.slowdown_factor,
            slowdown_duration=settings.slowdown_duration,
        )

    @property
    def mtbf(self) -> float:
        return cluster_mtbf(self.mtbi_chip, self.n_chip)

    @property
    def repair_scale(self) -> float:
        """F(x) = (1 - exp(-(x/λ)^k))^α 的中位数等于 repair_median 时的 λ"""
        inner = -math.log(1.0 - 0.5 ** (1.0 / self.repair_alpha))
        return self.repair_median / inner ** (1.0 / self.repair_k)

    @property
    def restore_time(self) -> float:
        """无弹性时一次故障的整体停顿：换备件 + 满规模重启"""
        return self.spare_swap_time + self.upscale_time

    @property
    def rejoin_threshold(self) -> int:
        """触发单独扩容所需的等待切片数"""
        return max(1, math.ceil(self.rejoin_fraction * self.slices_per_learner))


def cluster_mtbf(mtbi_chip: float, n_chip: int) -> float:
    """MTBF_cluster = MTBI_chip / N_chip"""
    if n_chip < 1:
        raise RangeError(f"n_chip={n_chip} 必须 ≥ 1")
    return mtbi_chip / n_chip


def sample_repair_times(config: ChaosConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """按指数化 Weibull 逆变换采样修复时间"""
    u = rng.random(size)
    return exponweib.ppf(u, config.repair_alpha, config.repair_k, scale=config.repair_scale)


@dataclass
class SliceFailure:
    slice_id: int
    learner: int
    at: float
    repaired_at: float


class ClusterState:
    """
    集群状态

    failed_until[s] 为切片 s 的修复完成时刻（≤ now 表示在线），
    reconfiguring_until[m] 为学习者 m 的重配置结束时刻。
    """

    def __init__(self, num_learners: int, slices_per_learner: int):
        if num_learners < 1 or slices_per_learner < 1:
            raise RangeError("学习者数与切片数必须 ≥ 1")
        self.num_learners = num_learners
        self.slices_per_learner = slices_per_learner
        self.failed_until = np.zeros(num_learners * slices_per_learner, dtype=np.float64)
        self.reconfiguring_until = np.zeros(num_learners, dtype=np.float64)

    @property
    def total_slices(self) -> int:
        return self.failed_until.size

    def learner_of(self, slice_id: int) -> int:
        return slice_id // self.slices_per_learner

    def up_mask(self, now: float) -> np.ndarray:
        return self.failed_until <= now

    def effective_slices(self, m: int, now: float) -> int:
        s = self.slices_per_learner
        return int(np.count_nonzero(self.failed_until[m * s:(m + 1) * s] <= now))

    def is_reconfiguring(self, m: int, now: float) -> bool:
        return bool(self.reconfiguring_until[m] > now)

    def request_reconfiguration(self, m: int, now: float, duration: float) -> bool:
        """
        发起重配置

        正在进行中的重配置会吸收新的请求。

        Returns:
            bool: 是否开启了新的重配置区间
        """
        if duration <= 0 or self.reconfiguring_until[m] > now:
            return False
        self.reconfiguring_until[m] = now + duration
        return True

    def fail_slice(self, u: float, now: float, repair_time: float) -> Optional[int]:
        """在在线切片中按均匀数 u 选择一个失效，没有在线切片时返回 None"""
        up = np.flatnonzero(self.failed_until <= now)
        if up.size == 0:
            return None
        slice_id = int(up[min(int(u * up.size), up.size - 1)])
        self.failed_until[slice_id] = now + repair_time
        return slice_id


def sample_failures(state: ClusterState, dt: float, rng: np.random.Generator,
                    config: ChaosConfig, now: float = 0.0) -> List[SliceFailure]:
    """
    一个时间步内的切片故障

    Args:
        state: 集群状态（原地更新）
        dt: 步长
        rng: 随机流
        config: 故障参数
        now: 步开始时刻

    Returns:
        List[SliceFailure]
    """
    if dt <= 0:
        raise RangeError(f"dt={dt} 必须为正")
    count = int(rng.poisson(dt / config.mtbf))
    failures = []
    if count == 0:
        return failures
    picks = rng.random(count)
    repairs = sample_repair_times(config, rng, count)
    for u, repair in zip(picks, repairs):
        slice_id = state.fail_slice(float(u), now, float(repair))
        if slice_id is None:
            break
        m = state.learner_of(slice_id)
        state.request_reconfiguration(m, now, config.downscale_time)
        failures.append(SliceFailure(slice_id, m, now, now + float(repair)))
    return failures


def effective_batch_scale(state: ClusterState, m: int, now: float = 0.0) -> float:
    """在线切片 / 名义切片，0 表示学习者本步缺席"""
    if not 0 <= m < state.num_learners:
        raise RangeError(f"学习者编号 {m} 超出范围")
    return state.effective_slices(m, now) / state.slices_per_learner
