# 解耦分片训练桌面实现 - 分片模块
from src.fragmentation.planners import (
    FragmentPlan, plan_layer, plan_tensor, plan_balanced, assign_offsets,
    plan_from_strategy, plan_loads, optimal_max_load, plan_to_text, plan_from_text,
)
from src.fragmentation.layout import FragmentLayout
