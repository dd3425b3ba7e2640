"""
外层优化器
同步器侧带 Nesterov 动量的 SGD，以及学习者收到全局分片时的插值
"""
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from src.core.errors import DimensionError, RangeError


@dataclass
class OuterOptState:
    """单个分片的外层优化器状态"""
    momentum: np.ndarray
    lr: float = 0.7
    mu: float = 0.9
    nesterov: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise RangeError(f"动量系数 μ={self.mu} 不在 [0, 1)")

    @classmethod
    def zeros(cls, size: int, lr: float = 0.7, mu: float = 0.9, nesterov: bool = True) -> "OuterOptState":
        return cls(np.zeros(size, dtype=np.float64), lr, mu, nesterov)

    @property
    def is_replacement(self) -> bool:
        """μ=0 且 η=1：外层更新等价于直接采用合并后的权重"""
        return self.mu == 0.0 and self.lr == 1.0


def outer_step(state: OuterOptState, theta_prev, delta, target: Optional[np.ndarray] = None,
               lr: Optional[float] = None) -> Tuple[np.ndarray, OuterOptState]:
    """
    外层一步

    v ← μv + Δ；update = μv + Δ（Nesterov）或 v；Θ ← Θ_prev - η·update

    Args:
        state: 优化器状态（不被修改）
        theta_prev: Θ_p(t-H)
        delta: 合并后的外梯度 Δ_p(t)
        target: 学习者分片加权平均，μ=0、η=1 时直接作为结果
        lr: 覆盖学习率（学习率调度）

    Returns:
        (Θ_p(t), 新状态)
    """
    prev = np.asarray(theta_prev, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if prev.shape != d.shape or state.momentum.shape != d.shape:
        raise DimensionError(f"外层更新长度不一致: {prev.size}, {d.size}, {state.momentum.size}")
    eta = state.lr if lr is None else lr
    momentum = state.mu * state.momentum + d
    update = state.mu * momentum + d if state.nesterov else momentum
    if state.mu == 0.0 and eta == 1.0 and target is not None:
        theta = np.asarray(target, dtype=np.float64).copy()
    else:
        theta = prev - eta * update
    return theta, replace(state, momentum=momentum)


def outer_lr_at(base_lr: float, step: int, total: int, schedule: str = "constant", warmup: int = 0) -> float:
    """外层学习率调度：常数，或线性预热后余弦衰减"""
    if schedule == "constant":
        return base_lr
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(total - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_received_fragment(theta_local, theta_global, alpha: float = 0.0) -> np.ndarray:
    """θ_p ← α θ_p + (1-α) Θ_p；α=0 为直接覆盖"""
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"插值系数 α={alpha} 不在 [0, 1]")
    local = np.asarray(theta_local, dtype=np.float64)
    glob = np.asarray(theta_global, dtype=np.float64)
    if local.shape != glob.shape:
        raise DimensionError(f"分片长度不一致: {local.size} vs {glob.size}")
    if alpha == 0.0:
        return glob.copy()
    if alpha == 1.0:
        return local.copy()
    return alpha * local + (1.0 - alpha) * glob
