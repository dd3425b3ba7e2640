# 解耦分片训练桌面实现 - 优化器模块
from src.optim.outer import OuterOptState, outer_step, outer_lr_at, apply_received_fragment
from src.optim.inner import InnerOptState, inner_step
