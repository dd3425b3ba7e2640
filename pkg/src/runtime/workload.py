"""
工作负载接口
运行时通过它取数据批次、计算损失与梯度；仅计时的负载不做任何数值计算
"""
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from src.core.params import ParamStore, TensorSpec


class Workload(Protocol):
    tensors: List[TensorSpec]
    tokens_per_example: int
    computes: bool

    def initial_params(self) -> ParamStore: ...

    def examples_for(self, m: int, scale: float = 1.0) -> int: ...

    def next_batch(self, m: int, n: int) -> Any: ...

    def loss_and_grad(self, params: ParamStore, batch: Any) -> Tuple[float, np.ndarray]: ...

    def stream_state(self, m: int) -> Dict[str, Any]: ...

    def restore_stream(self, m: int, state: Dict[str, Any]) -> None: ...


def scaled_examples(batch_size: int, scale: float) -> int:
    """按有效切片比例缩小批量，至少 1 个样本"""
    return max(1, int(round(batch_size * scale)))


class TimingWorkload:
    """只推进计数器的负载，用于合成磁带"""

    computes = False

    def __init__(self, tensors: Sequence[TensorSpec], batch_size: int, tokens_per_example: int,
                 batch_sizes: Optional[Mapping[int, int]] = None):
        self.tensors = list(tensors)
        self.batch_size = batch_size
        self.tokens_per_example = tokens_per_example
        # 按学习者覆盖批量（例如整个数据分片作为一批）
        self.batch_sizes = dict(batch_sizes or {})

    def initial_params(self) -> ParamStore:
        return ParamStore(self.tensors)

    def examples_for(self, m: int, scale: float = 1.0) -> int:
        return scaled_examples(self.batch_sizes.get(m, self.batch_size), scale)

    def next_batch(self, m: int, n: int) -> Any:
        return None

    def loss_and_grad(self, params: ParamStore, batch: Any) -> Tuple[float, np.ndarray]:
        return 0.0, np.zeros(params.total_size)

    def stream_state(self, m: int) -> Dict[str, Any]:
        return {}

    def restore_stream(self, m: int, state: Dict[str, Any]) -> None:
        pass
