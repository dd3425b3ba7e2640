"""
宽限窗口
达到最小法定数后，用重叠步提供的网络余量再等待一段时间，接纳更多学习者
"""
from dataclasses import dataclass
from typing import Optional

from src.core.errors import RangeError


@dataclass(frozen=True)
class GraceConfig:
    """γ 为安全系数，cap=0 表示以 ξ_step 为上限"""
    gamma: float = 0.8
    ema_decay: float = 0.9
    cap: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise RangeError(f"γ={self.gamma} 必须在 (0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise RangeError(f"ema_decay={self.ema_decay} 必须在 [0, 1)")

    @classmethod
    def from_settings(cls, settings) -> "GraceConfig":
        return cls(settings.gamma, settings.ema_decay, settings.cap, settings.enabled)


class Ema:
    """指数滑动平均，第一次观测直接作为初值"""

    def __init__(self, decay: float, value: Optional[float] = None):
        self.decay = decay
        self.value = value

    def update(self, x: float) -> float:
        if self.value is None:
            self.value = float(x)
        else:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(x)
        return self.value

    def get(self, default: float = 0.0) -> float:
        return default if self.value is None else self.value


def grace_window(grace: GraceConfig, xi_step: float, xi_quorum: float, xi_sync: float, tau: int) -> float:
    """
    宽限时长

    ξ_slack = τ·ξ_step - (ξ_quorum + ξ_sync)，返回 min(γ·max(ξ_slack, 0), cap)。

    Args:
        grace: 宽限配置
        xi_step: 学习者步长 EMA
        xi_quorum: 达到法定数耗时 EMA
        xi_sync: 合并与广播耗时 EMA
        tau: 重叠步数

    Returns:
        float: 宽限时长
    """
    if tau < 0 or xi_step < 0 or xi_quorum < 0 or xi_sync < 0:
        raise RangeError("τ 与各 EMA 必须非负")
    slack = tau * xi_step - (xi_quorum + xi_sync)
    cap = grace.cap if grace.cap > 0 else xi_step
    return min(grace.gamma * max(slack, 0.0), cap)
