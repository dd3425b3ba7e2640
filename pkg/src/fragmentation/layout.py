"""
分片布局
分片方案落到扁平参数向量上的下标，以及每个分片内属于 embedding 张量的元素掩码
"""
from dataclasses import dataclass
from typing import Dict, Sequence

import numpy as np

from src.core.params import ParamStore, TensorSpec
from src.fragmentation.planners import FragmentPlan


@dataclass
class FragmentLayout:
    """indices[p] 是分片 p 在参数向量中的下标（按方案中张量顺序拼接）"""
    indices: Dict[int, np.ndarray]
    embedding_masks: Dict[int, np.ndarray]

    @classmethod
    def build(cls, tensors: Sequence[TensorSpec], plan: FragmentPlan) -> "FragmentLayout":
        store = ParamStore(tensors)
        indices, masks = {}, {}
        for p in range(plan.P):
            names = plan.tensors_of(p)
            indices[p] = store.index_of(names)
            parts = [np.full(store.spec(n).size, store.spec(n).kind == "embedding") for n in names]
            masks[p] = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
        return cls(indices, masks)

    def size(self, p: int) -> int:
        return int(self.indices[p].size)

    def bits(self, p: int) -> int:
        return 64 * self.size(p)
