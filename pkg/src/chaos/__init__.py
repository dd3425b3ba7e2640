# 解耦分片训练桌面实现 - 故障模拟模块
from src.chaos.cluster import (
    ChaosConfig, ClusterState, SliceFailure, cluster_mtbf, sample_failures,
    sample_repair_times, effective_batch_scale, SECONDS_PER_YEAR,
)
from src.chaos.simulator import (
    GoodputMeter, ChaosRun, ChaosSimulator, ChaosTimeline, LearnerTimeline,
    goodput, uptime, dp_elastic_baseline, upsize_downtime, chaos_table, run_horizon, simulate_for,
)
