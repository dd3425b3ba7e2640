# 解耦分片训练桌面实现 - 带宽模型模块
from src.bandwidth.model import (
    BandwidthQuery, METHODS, DEFAULT_TARGETS, ring_factor, exposed_comm_time, compute_utilization,
    required_bandwidth, bandwidth_table, utilization_curve, hidden_threshold,
)
