"""
带宽模型
环形 all-reduce 下的计算利用率 T_math / (T_math + T_comm) 及其在带宽上的反函数
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import pandas as pd

from src.core.errors import RangeError

logger = logging.getLogger(__name__)

METHODS = ("dp", "decoupled", "decoupled_int4")
DEFAULT_TARGETS = (0.5, 0.75, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class BandwidthQuery:
    """
    带宽查询

    fragment_bits 为 None 时取 model_bits / H（P = H 时的平均分片）；
    overhead 是协议开销倍率，默认 1。
    """
    model_bits: float
    step_time: float
    datacenters: int = 2
    bandwidth: float = 1e9
    method: str = "dp"
    H: int = 24
    tau: int = 2
    fragment_bits: Optional[float] = None
    overhead: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise RangeError(f"未知方法: {self.method}")
        if self.model_bits <= 0 or self.step_time <= 0 or self.bandwidth <= 0 or self.overhead <= 0:
            raise RangeError("model_bits、step_time、bandwidth、overhead 必须为正")
        if self.datacenters < 2:
            raise RangeError(f"数据中心数 {self.datacenters} 必须 ≥ 2")
        if self.H < 1 or self.tau < 0:
            raise RangeError("H 必须 ≥ 1，τ 必须 ≥ 0")

    @property
    def payload_bits(self) -> float:
        """每次通信的比特数"""
        if self.method == "dp":
            return self.model_bits
        bits = self.fragment_bits if self.fragment_bits is not None else self.model_bits / self.H
        return bits / 4 if self.method == "decoupled_int4" else bits


def ring_factor(D: int) -> float:
    """环形 all-reduce 的流量系数 2(D-1)/D"""
    if D < 2:
        raise RangeError(f"数据中心数 {D} 必须 ≥ 2")
    return 2.0 * (D - 1) / D


def _traffic(q: BandwidthQuery) -> float:
    return q.overhead * q.payload_bits * ring_factor(q.datacenters)


def exposed_comm_time(q: BandwidthQuery) -> float:
    """
    每步暴露在计算之外的通信时间

    数据并行每步同步整个模型；解耦方案每步同步一个分片，可以藏在 τ 个计算步之下。
    """
    transfer = _traffic(q) / q.bandwidth
    if q.method == "dp":
        return transfer
    return max(0.0, transfer - q.tau * q.step_time)


def compute_utilization(q: BandwidthQuery) -> float:
    """T_math / (T_math + T_comm)"""
    return q.step_time / (q.step_time + exposed_comm_time(q))


def required_bandwidth(q: BandwidthQuery, target_cu: float) -> float:
    """
    达到目标利用率所需的最小带宽（bit/s），q.bandwidth 被忽略

    Args:
        q: 查询
        target_cu: 目标利用率；数据并行须在 (0, 1)，解耦方案可为 1

    Returns:
        float: 带宽
    """
    if not 0.0 < target_cu <= 1.0:
        raise RangeError(f"目标利用率 {target_cu} 必须在 (0, 1]")
    exposed = q.step_time * (1.0 / target_cu - 1.0)
    if q.method == "dp":
        if target_cu >= 1.0:
            raise RangeError("数据并行无法达到 100% 利用率")
        return _traffic(q) / exposed
    window = exposed + q.tau * q.step_time
    if window <= 0:
        raise RangeError("τ=0 时解耦方案无法完全隐藏通信")
    return _traffic(q) / window


def bandwidth_table(params: float, precision_bits: int = 16, step_times: Sequence[float] = (1.0, 5.0),
                    dcs: Sequence[int] = (2, 8), targets: Sequence[float] = DEFAULT_TARGETS,
                    H: int = 24, tau: int = 2, overhead: float = 1.0) -> pd.DataFrame:
    """
    每种 (步长, 数据中心数) 组合下三种方法达到各目标利用率所需的带宽（Gbit/s）

    Args:
        params: 参数量
        precision_bits: 每个参数的比特数
        step_times: 计算步长（秒）
        dcs: 数据中心数
        targets: 目标利用率
        H: 同步周期
        tau: 重叠步数
        overhead: 协议开销倍率

    Returns:
        DataFrame: 列 step_time, datacenters, method, 以及每个目标的 cu_XX
    """
    rows = []
    for step_time in step_times:
        for D in dcs:
            for method in METHODS:
                q = BandwidthQuery(params * precision_bits, step_time, D, 1.0, method, H, tau, overhead=overhead)
                row = {"step_time": step_time, "datacenters": D, "method": method}
                for cu in targets:
                    row[f"cu_{int(round(cu * 100))}"] = required_bandwidth(q, cu) / 1e9
                rows.append(row)
    logger.debug(f"带宽表: {len(rows)} 行")
    return pd.DataFrame(rows)


def utilization_curve(q: BandwidthQuery, bandwidths: Sequence[float]) -> pd.DataFrame:
    """给定带宽序列下的利用率曲线"""
    return pd.DataFrame({
        "bandwidth_gbps": [b / 1e9 for b in bandwidths],
        "cu": [compute_utilization(replace(q, bandwidth=b)) for b in bandwidths],
    })


def hidden_threshold(q: BandwidthQuery) -> float:
    """解耦方案通信被完全隐藏所需的最小带宽"""
    if q.method == "dp" or q.tau == 0:
        return math.inf
    return required_bandwidth(q, 1.0)
