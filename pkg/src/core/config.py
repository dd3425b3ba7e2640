"""
解耦分片训练实验配置管理
各模块的子配置、key=value 配置文件读取、跨模块校验与配置哈希
"""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from src.core.errors import ConfigError
from src.core.rng import fnv1a64

logger = logging.getLogger(__name__)


class TaskConfig(BaseSettings):
    """学习任务配置"""
    family: str = "mlp_classifier"  # mlp_classifier / linear_regression
    n_examples: int = 2048
    n_features: int = 8
    n_classes: int = 4
    hidden: int = 64
    blocks: int = 2
    linear_blocks: int = 4  # 线性回归权重切成的张量数
    noise: float = 0.1
    label_noise: float = 0.1
    batch_size: int = 32  # 0 表示整个数据分片
    dataset_seed: int = 0
    init_scale: float = 0.1

    class Config:
        extra = "ignore"


class RuntimeConfig(BaseSettings):
    """运行时配置（P、H 按玩具模型的张量数缩小）"""
    method: str = "decoupled"  # decoupled / dp
    mode: str = "det"  # det / live
    num_learners: int = 4
    quorum: int = 1
    sync_interval: int = 12
    fragments: int = 12
    overlap: int = 2
    total_steps: int = 240
    fragmentation: str = "balanced"  # layer / tensor / balanced
    alpha: float = 0.0
    step_time: float = 1.0
    speed_classes: List[float] = [1.0]
    speed_jitter: float = 0.0
    sync_compute_time: float = 0.0
    syncer_shards: int = 0  # 0 表示与学习者数相同
    stall_factor: float = 10.0
    max_virtual_time: float = 0.0  # 0 表示不限制
    live_time_scale: float = 0.01  # 实时模式下每个虚拟秒对应的墙钟秒数
    live_transport: str = "inproc"  # inproc / tcp

    class Config:
        extra = "ignore"


class LinkConfig(BaseSettings):
    """链路模型"""
    latency: float = 0.0
    bandwidth_bps: float = math.inf

    class Config:
        extra = "ignore"


class GraceSettings(BaseSettings):
    """宽限窗口配置"""
    enabled: bool = True
    gamma: float = 0.8
    ema_decay: float = 0.9
    cap: float = 0.0  # 0 表示以 ξ_step 为上限

    class Config:
        extra = "ignore"


class MergeSettings(BaseSettings):
    """合并配置"""
    method: str = "rda"
    embedding_method: str = "avg"
    compression: str = "f64"
    weight_mode: str = "token_quality"

    class Config:
        extra = "ignore"


class OptimConfig(BaseSettings):
    """内外层优化器配置"""
    inner: str = "adamw"
    inner_lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    outer_lr: float = 0.7
    outer_momentum: float = 0.9
    nesterov: bool = True
    outer_schedule: str = "constant"  # constant / cosine
    outer_warmup: int = 0

    class Config:
        extra = "ignore"


class ChaosSettings(BaseSettings):
    """故障模拟配置（时间单位: 秒）"""
    enabled: bool = False
    mtbi_chip: float = 365 * 24 * 3600.0
    n_chip: int = 1_200_000
    chips_per_slice: int = 256
    slices_per_learner: int = 0  # 0 表示由 n_chip 推导
    downscale_time: float = 30.0
    upscale_time: float = 30.0
    spare_swap_time: float = 50.0
    rejoin_fraction: float = 0.25
    repair_alpha: float = 2.0
    repair_k: float = 1.5
    repair_median: float = 600.0
    elastic: bool = True
    slowdown_rate: float = 0.0
    slowdown_factor: float = 2.0
    slowdown_duration: float = 10.0
    recover_on_outage: bool = False

    class Config:
        extra = "ignore"

    def slices_for(self, num_learners: int) -> int:
        """每个学习者的切片数"""
        if self.slices_per_learner > 0:
            return self.slices_per_learner
        return max(1, round(self.n_chip / (num_learners * self.chips_per_slice)))


class SnapshotConfig(BaseSettings):
    """快照配置"""
    interval: int = 0  # T_c，0 表示关闭
    directory: str = "checkpoints"

    class Config:
        extra = "ignore"


class LoggingConfig(BaseSettings):
    """日志配置"""
    level: str = "INFO"
    log_file: str = ""

    class Config:
        env_prefix = "DDL_LOG_"
        extra = "ignore"


class ExperimentConfig(BaseSettings):
    """主配置类"""
    project_name: str = "解耦分片训练桌面实验"
    version: str = "1.0.0"

    seed: int = 0
    output_dir: str = "output"
    record: str = ""

    # 子配置
    task: TaskConfig = Field(default_factory=TaskConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)
    link: LinkConfig = Field(default_factory=LinkConfig)
    grace: GraceSettings = Field(default_factory=GraceSettings)
    merge: MergeSettings = Field(default_factory=MergeSettings)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    chaos: ChaosSettings = Field(default_factory=ChaosSettings)
    snapshot: SnapshotConfig = Field(default_factory=SnapshotConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = False
        extra = "ignore"

    def updated(self, **sections: Dict[str, Any]) -> "ExperimentConfig":
        """返回按节覆盖后的新配置，例如 updated(runtime={"num_learners": 2})"""
        data = self.model_dump()
        for name, values in sections.items():
            if isinstance(values, dict):
                data.setdefault(name, {}).update(values)
            else:
                data[name] = values
        return build_config(data)


SECTIONS = ("task", "runtime", "link", "grace", "merge", "optim", "chaos", "snapshot", "logging")
_TOP_LEVEL = ("seed", "output_dir", "record", "project_name", "version")
# 不影响训练轨迹的字段不参与哈希
_HASH_EXCLUDED = {"logging", "snapshot", "output_dir", "record", "project_name", "version"}
_HASH_EXCLUDED_FIELDS = {
    ("runtime", "mode"), ("runtime", "max_virtual_time"),
    ("runtime", "live_time_scale"), ("runtime", "live_transport"),
}
_LIST_FIELDS = {("runtime", "speed_classes")}


def _parse_value(section: Optional[str], key: str, raw: str) -> Any:
    raw = raw.strip()
    if (section, key) in _LIST_FIELDS:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def parse_key_values(text: str) -> Dict[str, Any]:
    """
    解析 key=value 文本

    Args:
        text: 形如 "runtime.num_learners = 4" 的多行文本

    Returns:
        Dict: 按节嵌套的字典
    """
    data: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"第 {lineno} 行缺少 '='", {f"line {lineno}": line})
        key, value = line.split("=", 1)
        key = key.strip()
        if "." in key:
            section, field = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"未知配置节: {section}", {key: "unknown section"})
            data.setdefault(section, {})[field] = _parse_value(section, field, value)
        else:
            if key not in _TOP_LEVEL:
                raise ConfigError(f"未知配置项: {key}", {key: "unknown key"})
            data[key] = _parse_value(None, key, value)
    return data


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    """由嵌套字典构建并校验配置"""
    try:
        sections = {name: data[name] for name in SECTIONS if name in data}
        top = {k: v for k, v in data.items() if k in _TOP_LEVEL}
        if "logging" in sections:
            # 通过构造函数读取 DDL_LOG_ 环境变量
            sections["logging"] = LoggingConfig(**sections["logging"])
        config = ExperimentConfig(**top, **sections)
    except ValidationError as e:
        fields = {".".join(str(part) for part in err["loc"]): err["msg"] for err in e.errors()}
        raise ConfigError("配置校验失败", fields) from e
    validate_experiment(config)
    return config


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """
    读取实验配置文件

    Args:
        path: key=value 文本或 YAML 文件；None 时返回默认配置

    Returns:
        ExperimentConfig
    """
    if path is None:
        config = ExperimentConfig()
        validate_experiment(config)
        return config
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}", {"config": str(path)})
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("YAML 配置必须是映射", {"config": str(path)})
    else:
        data = parse_key_values(text)
    logger.info(f"读取配置文件: {path}")
    return build_config(data)


def validate_experiment(config: ExperimentConfig) -> None:
    """跨模块校验，违反时抛出带字段信息的 ConfigError"""
    errors: Dict[str, str] = {}
    rt = config.runtime
    if rt.method not in ("decoupled", "dp"):
        errors["runtime.method"] = "必须是 decoupled 或 dp"
    if rt.mode not in ("det", "live"):
        errors["runtime.mode"] = "必须是 det 或 live"
    if rt.fragmentation not in ("layer", "tensor", "balanced"):
        errors["runtime.fragmentation"] = "必须是 layer、tensor 或 balanced"
    if rt.num_learners < 1:
        errors["runtime.num_learners"] = "必须 ≥ 1"
    if not 1 <= rt.quorum <= max(rt.num_learners, 1):
        errors["runtime.quorum"] = "必须满足 1 ≤ K ≤ M"
    if rt.fragments < 1 or rt.fragments > rt.sync_interval:
        errors["runtime.fragments"] = "必须满足 1 ≤ P ≤ H"
    if rt.overlap < 0:
        errors["runtime.overlap"] = "τ 必须 ≥ 0"
    if not 0.0 <= rt.alpha <= 1.0:
        errors["runtime.alpha"] = "α 必须在 [0, 1]"
    if rt.step_time <= 0:
        errors["runtime.step_time"] = "必须 > 0"
    if not rt.speed_classes or any(s <= 0 for s in rt.speed_classes):
        errors["runtime.speed_classes"] = "速度倍率必须为正"
    if not 0.0 <= rt.speed_jitter < 1.0:
        errors["runtime.speed_jitter"] = "必须在 [0, 1)"
    if rt.live_time_scale <= 0:
        errors["runtime.live_time_scale"] = "必须 > 0"
    if rt.live_transport not in ("inproc", "tcp"):
        errors["runtime.live_transport"] = "必须是 inproc 或 tcp"
    if config.task.family not in ("mlp_classifier", "linear_regression"):
        errors["task.family"] = "必须是 mlp_classifier 或 linear_regression"
    if config.task.n_examples < rt.num_learners:
        errors["task.n_examples"] = "样本数不足以切分给所有学习者"
    if not 0.0 <= config.optim.outer_momentum < 1.0:
        errors["optim.outer_momentum"] = "μ 必须在 [0, 1)"
    if config.optim.inner not in ("sgd", "adamw"):
        errors["optim.inner"] = "必须是 sgd 或 adamw"
    if config.optim.outer_schedule not in ("constant", "cosine"):
        errors["optim.outer_schedule"] = "必须是 constant 或 cosine"
    if not 0.0 < config.grace.gamma < 1.0:
        errors["grace.gamma"] = "γ 必须在 (0, 1)"
    if not 0.0 <= config.grace.ema_decay < 1.0:
        errors["grace.ema_decay"] = "必须在 [0, 1)"
    for name in ("method", "embedding_method"):
        if getattr(config.merge, name) not in ("avg", "rda"):
            errors[f"merge.{name}"] = "必须是 avg 或 rda"
    if config.merge.compression not in ("f64", "int4"):
        errors["merge.compression"] = "必须是 f64 或 int4"
    if config.merge.weight_mode not in ("token_quality", "uniform"):
        errors["merge.weight_mode"] = "必须是 token_quality 或 uniform"
    chaos = config.chaos
    if chaos.mtbi_chip <= 0 or chaos.n_chip < 1 or chaos.chips_per_slice < 1:
        errors["chaos"] = "MTBI、芯片数和切片大小必须为正"
    elif chaos.slices_per_learner > 0:
        expected = rt.num_learners * chaos.slices_per_learner * chaos.chips_per_slice
        if expected != chaos.n_chip:
            errors["chaos.n_chip"] = f"应等于 M × slices × chips_per_slice = {expected}"
    if not 0.0 < chaos.rejoin_fraction <= 1.0:
        errors["chaos.rejoin_fraction"] = "必须在 (0, 1]"
    if config.link.latency < 0 or config.link.bandwidth_bps <= 0:
        errors["link"] = "延迟必须 ≥ 0，带宽必须 > 0"
    if config.snapshot.interval < 0:
        errors["snapshot.interval"] = "必须 ≥ 0"
    if errors:
        raise ConfigError("配置跨模块校验失败", errors)


def canonical_text(config: ExperimentConfig) -> str:
    """影响训练轨迹的配置项，按 section.key=value 排序"""
    data = config.model_dump()
    lines = []
    for key in sorted(data):
        if key in _HASH_EXCLUDED:
            continue
        value = data[key]
        if isinstance(value, dict):
            for field in sorted(value):
                if (key, field) in _HASH_EXCLUDED_FIELDS:
                    continue
                lines.append(f"{key}.{field}={value[field]!r}")
        else:
            lines.append(f"{key}={value!r}")
    return "\n".join(lines)


def config_hash(config: ExperimentConfig) -> str:
    """64 位 FNV-1a 配置哈希（16 位十六进制）"""
    return f"{fnv1a64(canonical_text(config).encode('utf-8')):016x}"


def setup_logging(level: str = "INFO", log_file: str = "") -> None:
    """配置日志"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


# 创建全局配置实例
settings = ExperimentConfig()


def ensure_directories(config: Optional[ExperimentConfig] = None) -> None:
    """确保输出目录存在"""
    config = config or settings
    dirs = [config.output_dir]
    if config.snapshot.interval > 0:
        dirs.append(config.snapshot.directory)
    for dir_path in dirs:
        Path(dir_path).mkdir(parents=True, exist_ok=True)
