"""
分片合并
权重计算、外梯度构造、加权直接平均与径向-方向平均（RDA），以及分片级合并入口
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.aggregation.compression import int4_roundtrip
from src.core.errors import (
    DegenerateDirectionError, DimensionError, NoQuorumError, UndefinedWeightError,
)

logger = logging.getLogger(__name__)

EPS_DIR = 1e-12


@dataclass
class LearnerContribution:
    """学习者对某个分片的贡献"""
    learner_id: int
    fragment_id: int
    theta_frag: np.ndarray
    c_steps: int
    c_tokens: int


@dataclass(frozen=True)
class MergeConfig:
    """合并方式"""
    method: str = "rda"
    embedding_method: str = "avg"
    compression: str = "f64"
    weight_mode: str = "token_quality"

    @classmethod
    def from_settings(cls, settings) -> "MergeConfig":
        return cls(settings.method, settings.embedding_method, settings.compression, settings.weight_mode)


@dataclass
class MergeResult:
    delta: np.ndarray
    # 直接平均时为学习者分片的加权平均，供外层优化器的整体替换不动点使用
    target: Optional[np.ndarray]
    weights: List[float]


def weight(c_tokens: int, c_steps: int) -> float:
    """
    学习者权重 = 数量 × 质量 = c_tokens × (c_tokens / c_steps)

    Args:
        c_tokens: 上次更新以来的 token 数
        c_steps: 上次更新以来的步数

    Returns:
        float: 非负权重
    """
    if c_steps <= 0:
        raise UndefinedWeightError(f"c_steps={c_steps} 时权重无定义")
    return float(c_tokens) * (float(c_tokens) / float(c_steps))


def outer_gradient(prev_global, learner_frag) -> np.ndarray:
    """Δ = Θ_p(t-H) - θ_{m,p}(t)"""
    prev = np.asarray(prev_global, dtype=np.float64)
    local = np.asarray(learner_frag, dtype=np.float64)
    if prev.shape != local.shape:
        raise DimensionError(f"外梯度长度不一致: {prev.size} vs {local.size}")
    return prev - local


def _normalized(weights: Sequence[float], count: int) -> np.ndarray:
    if count == 0:
        raise NoQuorumError("没有可合并的贡献")
    if len(weights) != count:
        raise DimensionError(f"权重个数 {len(weights)} 与贡献个数 {count} 不符")
    w = np.asarray(weights, dtype=np.float64)
    total = float(np.sum(w))
    if total <= 0.0:
        raise UndefinedWeightError("权重之和为 0")
    return w / total


def shard_bounds(n: int, shards: int) -> List[Tuple[int, int]]:
    """把长度 n 的向量切成 shards 段连续区间"""
    shards = max(1, min(shards, n)) if n else 1
    edges = np.linspace(0, n, shards + 1).round().astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(shards)]


def _sharded_norm(vec: np.ndarray, bounds: Sequence[Tuple[int, int]]) -> float:
    # 各分片段求部分平方和后归约
    total = 0.0
    for a, b in bounds:
        part = vec[a:b]
        total += float(part.dot(part))
    return float(np.sqrt(total))


def _weighted_sum(vectors: Sequence[np.ndarray], w: np.ndarray) -> np.ndarray:
    out = w[0] * vectors[0]
    for wi, vec in zip(w[1:], vectors[1:]):
        out = out + wi * vec
    return out


def _deltas(contribs: Sequence[LearnerContribution], prev_global) -> List[np.ndarray]:
    return [outer_gradient(prev_global, c.theta_frag) for c in contribs]


def merge_avg(contribs: Sequence[LearnerContribution], weights: Sequence[float],
              prev_global, deltas: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """加权直接平均外梯度"""
    w = _normalized(weights, len(contribs))
    deltas = list(deltas) if deltas is not None else _deltas(contribs, prev_global)
    if len(deltas) == 1:
        return deltas[0].copy()
    return _weighted_sum(deltas, w)


def merge_rda(contribs: Sequence[LearnerContribution], weights: Sequence[float],
              prev_global, deltas: Optional[Sequence[np.ndarray]] = None,
              shards: int = 1) -> np.ndarray:
    """
    径向-方向平均

    范数取加权平均，方向取单位向量加权平均后再归一化。
    零外梯度不参与方向平均，但以 0 计入范数平均。
    """
    w = _normalized(weights, len(contribs))
    deltas = list(deltas) if deltas is not None else _deltas(contribs, prev_global)
    if len(deltas) == 1:
        return deltas[0].copy()
    bounds = shard_bounds(deltas[0].size, shards)
    norms = np.array([_sharded_norm(d, bounds) for d in deltas])
    mean_norm = float(np.dot(w, norms))
    nonzero = [i for i, n in enumerate(norms) if n > 0.0]
    if not nonzero:
        return np.zeros_like(deltas[0])
    direction = _weighted_sum([deltas[i] / norms[i] for i in nonzero], w[nonzero])
    dir_norm = _sharded_norm(direction, bounds)
    if dir_norm < EPS_DIR:
        raise DegenerateDirectionError(f"平均方向范数 {dir_norm:.3e} 低于阈值")
    return mean_norm * (direction / dir_norm)


def merge_fragment(contribs: Sequence[LearnerContribution], prev_global,
                   config: MergeConfig, embedding_mask: Optional[np.ndarray] = None,
                   shards: int = 1) -> MergeResult:
    """
    分片级合并入口

    Args:
        contribs: 按学习者编号排序的贡献
        prev_global: Θ_p(t-H)
        config: 合并方式
        embedding_mask: 属于 embedding 张量的元素
        shards: 同步器分片数

    Returns:
        MergeResult
    """
    if not contribs:
        raise NoQuorumError("没有可合并的贡献")
    prev = np.asarray(prev_global, dtype=np.float64)
    if config.weight_mode == "uniform":
        weights = [1.0] * len(contribs)
    else:
        weights = [weight(c.c_tokens, c.c_steps) for c in contribs]
    deltas = _deltas(contribs, prev)
    if config.compression == "int4":
        deltas = [int4_roundtrip(d) for d in deltas]

    if embedding_mask is None or not np.any(embedding_mask):
        segments = [(np.ones(prev.shape, dtype=bool), config.method)]
    elif np.all(embedding_mask):
        segments = [(embedding_mask, config.embedding_method)]
    else:
        segments = [(embedding_mask, config.embedding_method), (~embedding_mask, config.method)]

    delta = np.zeros_like(prev)
    for mask, method in segments:
        part = [d[mask] for d in deltas]
        if method == "rda":
            try:
                delta[mask] = merge_rda(contribs, weights, None, part, shards)
                continue
            except DegenerateDirectionError as e:
                logger.warning(f"RDA 方向退化，改用直接平均: {e}")
        delta[mask] = merge_avg(contribs, weights, None, part)

    target = None
    if config.compression == "f64" and all(m == "avg" for _, m in segments):
        if len(contribs) == 1:
            target = np.asarray(contribs[0].theta_frag, dtype=np.float64).copy()
        else:
            w = _normalized(weights, len(contribs))
            target = _weighted_sum([np.asarray(c.theta_frag, dtype=np.float64) for c in contribs], w)
    return MergeResult(delta, target, weights)
