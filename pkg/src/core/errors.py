"""
异常定义
各模块共用的错误类型，CLI 根据类型决定退出码
"""
from typing import Optional


class DecoupledError(Exception):
    """所有错误的基类"""


class DimensionError(DecoupledError):
    """向量长度不一致"""


class RangeError(DecoupledError):
    """索引或参数越界"""


class InfeasiblePlanError(DecoupledError):
    """分片方案不可行"""


class UndefinedWeightError(DecoupledError):
    """权重无定义（c_steps 为 0 或权重和为 0）"""


class NoQuorumError(DecoupledError):
    """没有任何可合并的学习者贡献"""


class DegenerateDirectionError(DecoupledError):
    """RDA 平均方向退化"""


class ConfigError(DecoupledError):
    """配置错误，附带字段级信息"""

    def __init__(self, message: str, fields: Optional[dict] = None):
        super().__init__(message)
        self.fields = fields or {}

    def __str__(self) -> str:
        base = super().__str__()
        if not self.fields:
            return base
        details = "; ".join(f"{k}: {v}" for k, v in sorted(self.fields.items()))
        return f"{base} ({details})"


class ReplayIntegrityError(DecoupledError):
    """回放时磁带与系统状态不一致"""

    def __init__(self, message: str, seq: Optional[int] = None):
        super().__init__(message if seq is None else f"{message} (seq={seq})")
        self.seq = seq


class SnapshotIntegrityError(DecoupledError):
    """快照文件损坏或校验失败"""


class RecoveryUnavailableError(DecoupledError):
    """没有健康的同伴学习者可供恢复"""


class RecoveryBudgetExceeded(DecoupledError):
    """恢复超过 H 个同步步"""


class ChannelClosedError(DecoupledError):
    """通道已关闭"""


class LiveRunTimeoutError(DecoupledError):
    """实时运行在超时前没有完成全部同步步"""


class TapeWriteError(DecoupledError):
    """磁带写入失败"""
