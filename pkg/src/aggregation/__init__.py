# 解耦分片训练桌面实现 - 合并模块
from src.aggregation.merging import (
    LearnerContribution, MergeConfig, MergeResult, weight, outer_gradient,
    merge_avg, merge_rda, merge_fragment, shard_bounds, EPS_DIR,
)
from src.aggregation.compression import (
    quantize_int4, dequantize_int4, int4_roundtrip, pack_int4, unpack_int4,
)
