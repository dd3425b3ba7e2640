"""
内层优化器
学习者本地使用的 SGD 与 AdamW（解耦权重衰减）
"""
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np

from src.core.errors import DimensionError, RangeError
from src.core.params import ParamStore


@dataclass
class InnerOptState:
    """内层优化器状态"""
    kind: str = "adamw"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise RangeError(f"未知内层优化器: {self.kind}")

    @classmethod
    def create(cls, size: int, kind: str = "adamw", lr: float = 3e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> "InnerOptState":
        if kind == "adamw":
            return cls(kind, lr, beta1, beta2, eps, weight_decay,
                       np.zeros(size, dtype=np.float64), np.zeros(size, dtype=np.float64))
        return cls(kind, lr, beta1, beta2, eps, weight_decay)

    @classmethod
    def from_settings(cls, size: int, optim) -> "InnerOptState":
        return cls.create(size, optim.inner, optim.inner_lr, optim.beta1, optim.beta2,
                          optim.eps, optim.weight_decay)

    def copy(self) -> "InnerOptState":
        return replace(
            self,
            m=None if self.m is None else self.m.copy(),
            v=None if self.v is None else self.v.copy(),
        )


Params = Union[ParamStore, np.ndarray]


def inner_step(state: InnerOptState, theta: Params, grad) -> Tuple[Params, InnerOptState]:
    """
    内层一步

    Args:
        state: 优化器状态（不被修改）
        theta: 当前参数
        grad: 与参数同长的梯度

    Returns:
        (新参数, 新状态)，参数类型与输入一致
    """
    values = theta.values if isinstance(theta, ParamStore) else np.asarray(theta, dtype=np.float64)
    g = np.asarray(grad.values if isinstance(grad, ParamStore) else grad, dtype=np.float64).reshape(-1)
    if g.shape != values.shape:
        raise DimensionError(f"梯度长度 {g.size} 与参数长度 {values.size} 不符")

    step = state.step + 1
    if state.kind == "sgd":
        new_values = values - state.lr * g
        new_state = replace(state, step=step)
    else:
        m = state.beta1 * state.m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** step)
        v_hat = v / (1.0 - state.beta2 ** step)
        decayed = values * (1.0 - state.lr * state.weight_decay) if state.weight_decay else values
        new_values = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = replace(state, m=m, v=v, step=step)

    if isinstance(theta, ParamStore):
        return ParamStore(theta.tensors, new_values), new_state
    return new_values, new_state
