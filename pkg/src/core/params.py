"""
参数存储
扁平 float64 参数向量、张量视图、分片视图，以及各模块共用的少量向量运算
"""
import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import DimensionError, RangeError

TENSOR_KINDS = ("embedding", "transformer", "other")

# fragment_id: u32, element_count: u64
_FRAGMENT_HEADER = struct.Struct("<IQ")


@dataclass(frozen=True)
class TensorSpec:
    """模型中的一个命名张量"""
    name: str
    size: int
    kind: str = "other"
    layer: Optional[int] = None
    shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.size < 1:
            raise DimensionError(f"张量 {self.name} 大小必须 ≥ 1")
        if self.kind not in TENSOR_KINDS:
            raise RangeError(f"未知张量类型: {self.kind}")
        if self.shape is not None and int(np.prod(self.shape)) != self.size:
            raise DimensionError(f"张量 {self.name} 形状 {self.shape} 与大小 {self.size} 不符")

    @property
    def byte_size(self) -> int:
        return self.size * 8


@dataclass(frozen=True)
class FragmentView:
    """分片 p 的描述"""
    fragment_id: int
    tensor_ids: Tuple[str, ...]
    byte_size: int


class ParamStore:
    """
    参数存储

    values 是连续的 float64 向量，按 tensors 的顺序依次排布，每个张量占据一段不相交区间。
    """

    def __init__(self, tensors: Sequence[TensorSpec], values: Optional[np.ndarray] = None):
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise DimensionError("模型中张量名称重复")
        self.tensors: List[TensorSpec] = list(tensors)
        self._offsets: Dict[str, Tuple[int, int]] = {}
        start = 0
        for spec in self.tensors:
            self._offsets[spec.name] = (start, spec.size)
            start += spec.size
        self.total_size = start
        if values is None:
            self.values = np.zeros(start, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (start,):
                raise DimensionError(f"参数长度 {values.shape} 与张量总大小 {start} 不符")
            self.values = values.copy()

    @property
    def byte_size(self) -> int:
        return self.total_size * 8

    def spec(self, name: str) -> TensorSpec:
        for spec in self.tensors:
            if spec.name == name:
                return spec
        raise RangeError(f"未知张量: {name}")

    def offset(self, name: str) -> Tuple[int, int]:
        if name not in self._offsets:
            raise RangeError(f"未知张量: {name}")
        return self._offsets[name]

    def tensor(self, name: str) -> np.ndarray:
        """张量视图（写入会修改存储）"""
        start, size = self.offset(name)
        view = self.values[start:start + size]
        spec = self.spec(name)
        return view.reshape(spec.shape) if spec.shape else view

    def index_of(self, names: Iterable[str]) -> np.ndarray:
        parts = [np.arange(start, start + size) for start, size in (self.offset(n) for n in names)]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def copy(self) -> "ParamStore":
        return ParamStore(self.tensors, self.values)

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.tensors)

    def __len__(self) -> int:
        return self.total_size

    def __repr__(self) -> str:
        return f"ParamStore(tensors={len(self.tensors)}, size={self.total_size})"


class FragmentSlice:
    """
    分片切片

    按方案中张量顺序拼接的视图；读取得到副本，通过下标赋值写回底层存储。
    """

    def __init__(self, store: ParamStore, fragment_id: int, tensor_ids: Sequence[str]):
        self.store = store
        self.fragment_id = fragment_id
        self.tensor_ids = tuple(tensor_ids)
        self.index = store.index_of(self.tensor_ids)

    def __len__(self) -> int:
        return int(self.index.size)

    def __array__(self, dtype=None, copy=None):
        values = self.store.values[self.index]
        return values if dtype is None else values.astype(dtype)

    @property
    def values(self) -> np.ndarray:
        return self.store.values[self.index]

    def __getitem__(self, key):
        return self.store.values[self.index[key]]

    def __setitem__(self, key, value):
        self.store.values[self.index[key]] = value

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.index.shape:
            raise DimensionError(f"分片 {self.fragment_id} 长度 {len(self)} 与写入长度 {values.size} 不符")
        self.store.values[self.index] = values


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def axpy(a: float, x, y) -> np.ndarray:
    """返回 a·x + y，不修改输入"""
    xv, yv = _as_vector(x), _as_vector(y)
    if xv.shape != yv.shape:
        raise DimensionError(f"axpy 长度不一致: {xv.size} vs {yv.size}")
    return a * xv + yv


def l2_norm(x) -> float:
    """欧氏范数"""
    return float(np.linalg.norm(_as_vector(x)))


def fragment_slice(store: ParamStore, plan, p: int) -> FragmentSlice:
    """
    取分片 p 的切片

    Args:
        store: 参数存储
        plan: 分片方案（需提供 P 与 tensors_of）
        p: 分片编号

    Returns:
        FragmentSlice: 写入会修改 store
    """
    if not 0 <= p < plan.P:
        raise RangeError(f"分片编号 {p} 超出范围 [0, {plan.P})")
    return FragmentSlice(store, p, plan.tensors_of(p))


def fragment_views(store: ParamStore, plan) -> List[FragmentView]:
    views = []
    for p in range(plan.P):
        names = tuple(plan.tensors_of(p))
        views.append(FragmentView(p, names, sum(store.spec(n).byte_size for n in names)))
    return views


def checksum(values) -> str:
    """float64 小端字节的 sha256"""
    data = np.ascontiguousarray(_as_vector(values), dtype="<f8").tobytes()
    return hashlib.sha256(data).hexdigest()


def encode_fragment(fragment_id: int, values) -> bytes:
    """分片负载: (u32 fragment_id, u64 element_count) + 小端 f64"""
    vec = np.ascontiguousarray(_as_vector(values), dtype="<f8")
    return _FRAGMENT_HEADER.pack(fragment_id, vec.size) + vec.tobytes()


def decode_fragment(data: bytes) -> Tuple[int, np.ndarray]:
    if len(data) < _FRAGMENT_HEADER.size:
        raise DimensionError("分片负载过短")
    fragment_id, count = _FRAGMENT_HEADER.unpack_from(data, 0)
    body = data[_FRAGMENT_HEADER.size:]
    if len(body) != count * 8:
        raise DimensionError(f"分片负载长度 {len(body)} 与元素个数 {count} 不符")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return fragment_id, values
