"""
测试辅助函数
小规模配置与常用构件
"""
import os
import sys
from typing import Any, Dict

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.config import ExperimentConfig, build_config

# 慢速测试（完整网格、多种子实验）需要 DDL_SLOW_TESTS=1
SLOW = os.environ.get("DDL_SLOW_TESTS", "") == "1"

TINY_TASK = {
    "family": "mlp_classifier",
    "n_examples": 256,
    "n_features": 4,
    "n_classes": 3,
    "hidden": 8,
    "blocks": 2,
    "batch_size": 16,
}

TINY_RUNTIME = {
    "num_learners": 2,
    "quorum": 1,
    "sync_interval": 12,
    "fragments": 12,
    "overlap": 2,
    "total_steps": 36,
}


def tiny_config(**sections: Dict[str, Any]) -> ExperimentConfig:
    """
    小规模实验配置（12 个张量，P=H=12）

    Args:
        sections: 按节覆盖，例如 runtime={"num_learners": 4}；非字典值覆盖顶层字段

    Returns:
        ExperimentConfig
    """
    data: Dict[str, Any] = {"task": dict(TINY_TASK), "runtime": dict(TINY_RUNTIME)}
    for name, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(name, {}).update(values)
        else:
            data[name] = values
    return build_config(data)


def degenerate_config(**sections: Dict[str, Any]) -> ExperimentConfig:
    """M=1, H=P=1, μ=0, η=1：整体替换的不动点"""
    base = {
        "runtime": {"num_learners": 1, "quorum": 1, "sync_interval": 1, "fragments": 1, "overlap": 0,
                    "total_steps": 20},
        "optim": {"outer_lr": 1.0, "outer_momentum": 0.0, "nesterov": False},
        "merge": {"method": "avg", "embedding_method": "avg"},
        "grace": {"enabled": False},
    }
    for name, values in sections.items():
        base.setdefault(name, {}).update(values)
    return tiny_config(**base)
