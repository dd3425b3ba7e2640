"""
玩具学习任务
确定性合成数据集、按学习者切分的数据分片、小型 MLP 分类器与分块线性回归
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.core.errors import ConfigError, DimensionError
from src.core.params import ParamStore, TensorSpec
from src.core.rng import named_stream

logger = logging.getLogger(__name__)

TASK_FAMILIES = ("mlp_classifier", "linear_regression")


@dataclass(frozen=True)
class TaskSpec:
    """任务描述"""
    family: str = "mlp_classifier"
    n_examples: int = 2048
    n_features: int = 8
    n_classes: int = 4
    hidden: int = 64
    blocks: int = 2
    linear_blocks: int = 4
    noise: float = 0.1
    label_noise: float = 0.1
    batch_size: int = 32
    dataset_seed: int = 0
    init_scale: float = 0.1

    @classmethod
    def from_config(cls, task) -> "TaskSpec":
        if task.family not in TASK_FAMILIES:
            raise ConfigError(f"未知任务类型: {task.family}", {"task.family": task.family})
        return cls(task.family, task.n_examples, task.n_features, task.n_classes, task.hidden,
                   task.blocks, task.linear_blocks, task.noise, task.label_noise, task.batch_size,
                   task.dataset_seed, task.init_scale)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.X.shape[0])

    def take(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.X[index], self.y[index])


def build_model(spec: TaskSpec) -> List[TensorSpec]:
    """
    模型张量列表

    MLP: 输入层为 embedding 类，每个残差块的 w/b/gain/shift 为 transformer 类（层号从 1 开始），
    输出层为 other 类。线性回归: 权重按特征切成 linear_blocks 个 transformer 张量加一个偏置。
    """
    if spec.family == "linear_regression":
        if not 1 <= spec.linear_blocks <= spec.n_features:
            raise ConfigError(f"linear_blocks={spec.linear_blocks} 必须在 [1, {spec.n_features}] 内",
                              {"task.linear_blocks": spec.linear_blocks})
        tensors = []
        for i, cols in enumerate(np.array_split(np.arange(spec.n_features), spec.linear_blocks)):
            tensors.append(TensorSpec(f"w{i}", len(cols), "transformer", i + 1, (len(cols),)))
        tensors.append(TensorSpec("b", 1, "other", None, (1,)))
        return tensors

    d, h, c = spec.n_features, spec.hidden, spec.n_classes
    tensors = [
        TensorSpec("in_w", d * h, "embedding", None, (d, h)),
        TensorSpec("in_b", h, "embedding", None, (h,)),
    ]
    for i in range(spec.blocks):
        layer = i + 1
        tensors += [
            TensorSpec(f"block{layer}_w", h * h, "transformer", layer, (h, h)),
            TensorSpec(f"block{layer}_b", h, "transformer", layer, (h,)),
            TensorSpec(f"block{layer}_gain", h, "transformer", layer, (h,)),
            TensorSpec(f"block{layer}_shift", h, "transformer", layer, (h,)),
        ]
    tensors += [
        TensorSpec("out_w", h * c, "other", None, (h, c)),
        TensorSpec("out_b", c, "other", None, (c,)),
    ]
    return tensors


def make_dataset(spec: TaskSpec) -> Dataset:
    """由 dataset_seed 唯一确定的数据集"""
    rng = named_stream(spec.dataset_seed, "dataset")
    X = rng.standard_normal((spec.n_examples, spec.n_features))
    if spec.family == "linear_regression":
        w = rng.standard_normal(spec.n_features)
        b = rng.standard_normal()
        y = X @ w + b + spec.noise * rng.standard_normal(spec.n_examples)
        return Dataset(X, y)

    # 标签来自一个随机的两层网络，再按 label_noise 随机替换
    W1 = rng.standard_normal((spec.n_features, spec.hidden)) / np.sqrt(spec.n_features)
    W2 = rng.standard_normal((spec.hidden, spec.n_classes)) / np.sqrt(spec.hidden)
    y = np.argmax(np.tanh(X @ W1) @ W2, axis=1)
    flip = rng.random(spec.n_examples) < spec.label_noise
    y[flip] = rng.integers(0, spec.n_classes, int(flip.sum()))
    return Dataset(X, y.astype(np.int64))


def make_shards(data: Dataset, M: int) -> List[Dataset]:
    """不相交的连续分片"""
    if M < 1 or M > len(data):
        raise DimensionError(f"无法把 {len(data)} 个样本切成 {M} 份")
    return [data.take(idx) for idx in np.array_split(np.arange(len(data)), M)]


def init_params(tensors: List[TensorSpec], spec: TaskSpec, seed: int) -> ParamStore:
    """
    初始参数

    权重按 1/sqrt(fan_in) 缩放，偏置与 shift 为 0，残差块 gain 取 init_scale。
    """
    store = ParamStore(tensors)
    rng = named_stream(seed, "init")
    for t in tensors:
        view = store.tensor(t.name)
        if t.name.endswith("_gain"):
            view[...] = spec.init_scale
        elif t.name.endswith("_w") or (spec.family == "linear_regression" and t.name.startswith("w")):
            fan_in = t.shape[0] if t.shape else t.size
            view[...] = rng.standard_normal(view.shape) / np.sqrt(fan_in)
            if spec.family == "linear_regression":
                view[...] *= spec.init_scale
    return store


def _mlp_forward(spec: TaskSpec, params: ParamStore, X: np.ndarray):
    h = np.tanh(X @ params.tensor("in_w") + params.tensor("in_b"))
    cache = [h]
    for i in range(spec.blocks):
        layer = i + 1
        z = h @ params.tensor(f"block{layer}_w") + params.tensor(f"block{layer}_b")
        a = np.maximum(z, 0.0)
        h = h + params.tensor(f"block{layer}_gain") * a + params.tensor(f"block{layer}_shift")
        cache.append((z, a, h))
    logits = h @ params.tensor("out_w") + params.tensor("out_b")
    return logits, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _mlp_loss_and_grad(spec: TaskSpec, params: ParamStore, data: Dataset) -> Tuple[float, np.ndarray]:
    n = len(data)
    logits, cache = _mlp_forward(spec, params, data.X)
    probs = _softmax(logits)
    loss = float(-np.mean(np.log(probs[np.arange(n), data.y] + 1e-12)))

    grad = params.zeros_like()
    dlogits = probs
    dlogits[np.arange(n), data.y] -= 1.0
    dlogits /= n
    h_last = cache[-1][2] if spec.blocks else cache[0]
    grad.tensor("out_w")[...] = h_last.T @ dlogits
    grad.tensor("out_b")[...] = dlogits.sum(axis=0)
    dh = dlogits @ params.tensor("out_w").T

    for i in reversed(range(spec.blocks)):
        layer = i + 1
        z, a, _ = cache[i + 1]
        h_in = cache[0] if i == 0 else cache[i][2]
        gain = params.tensor(f"block{layer}_gain")
        grad.tensor(f"block{layer}_gain")[...] = (dh * a).sum(axis=0)
        grad.tensor(f"block{layer}_shift")[...] = dh.sum(axis=0)
        dz = dh * gain * (z > 0)
        grad.tensor(f"block{layer}_w")[...] = h_in.T @ dz
        grad.tensor(f"block{layer}_b")[...] = dz.sum(axis=0)
        dh = dh + dz @ params.tensor(f"block{layer}_w").T

    dpre = dh * (1.0 - cache[0] ** 2)
    grad.tensor("in_w")[...] = data.X.T @ dpre
    grad.tensor("in_b")[...] = dpre.sum(axis=0)
    return loss, grad.values


def _linear_weights(spec: TaskSpec, params: ParamStore) -> np.ndarray:
    return np.concatenate([params.tensor(f"w{i}") for i in range(spec.linear_blocks)])


def _linear_loss_and_grad(spec: TaskSpec, params: ParamStore, data: Dataset) -> Tuple[float, np.ndarray]:
    n = len(data)
    residual = data.X @ _linear_weights(spec, params) + params.tensor("b")[0] - data.y
    loss = float(0.5 * np.mean(residual ** 2))
    gw = data.X.T @ residual / n
    grad = params.zeros_like()
    for i, cols in enumerate(np.array_split(np.arange(spec.n_features), spec.linear_blocks)):
        grad.tensor(f"w{i}")[...] = gw[cols]
    grad.tensor("b")[...] = residual.mean()
    return loss, grad.values


def loss_and_grad(spec: TaskSpec, params: ParamStore, data: Dataset) -> Tuple[float, np.ndarray]:
    """
    批量损失与对扁平参数向量的梯度

    Returns:
        (loss, grad): grad 与 params.values 同长
    """
    if len(data) == 0:
        return 0.0, np.zeros(params.total_size)
    if spec.family == "linear_regression":
        return _linear_loss_and_grad(spec, params, data)
    return _mlp_loss_and_grad(spec, params, data)


def evaluate(spec: TaskSpec, params: ParamStore, data: Dataset) -> Dict[str, float]:
    """全量评估；分类任务附带准确率"""
    loss, _ = loss_and_grad(spec, params, data)
    metrics = {"loss": loss}
    if spec.family == "mlp_classifier":
        logits, _ = _mlp_forward(spec, params, data.X)
        metrics["accuracy"] = float(np.mean(np.argmax(logits, axis=1) == data.y))
    return metrics


class TaskWorkload:
    """
    真实计算的工作负载

    学习者 m 只读取分片 m % M；batch_size 为 0 时每步按顺序使用整个分片，
    否则从各自的命名随机流中有放回抽样。
    """

    computes = True
    tokens_per_example = 1

    def __init__(self, spec: TaskSpec, M: int, seed: int, dataset: Optional[Dataset] = None):
        self.spec = spec
        self.M = M
        self.seed = seed
        self.dataset = dataset if dataset is not None else make_dataset(spec)
        self.shards = make_shards(self.dataset, M)
        self.tensors = build_model(spec)
        self._initial = init_params(self.tensors, spec, seed)
        self._streams: Dict[int, np.random.Generator] = {}
        logger.debug(f"任务 {spec.family}: {len(self.dataset)} 个样本, {M} 个分片, "
                     f"{self._initial.total_size} 个参数")

    @classmethod
    def from_config(cls, config) -> "TaskWorkload":
        return cls(TaskSpec.from_config(config.task), config.runtime.num_learners, config.seed)

    @property
    def batch_size(self) -> int:
        return self.spec.batch_size

    def shard(self, m: int) -> Dataset:
        return self.shards[m % self.M]

    def batch_sizes(self) -> Dict[int, int]:
        """各学习者每步的样本数（整分片模式下分片大小不一定相等）"""
        return {m: self.examples_for(m) for m in range(self.M)}

    def _stream(self, m: int) -> np.random.Generator:
        if m not in self._streams:
            self._streams[m] = named_stream(self.seed, "data", m)
        return self._streams[m]

    def initial_params(self) -> ParamStore:
        return self._initial.copy()

    def examples_for(self, m: int, scale: float = 1.0) -> int:
        if self.spec.batch_size == 0:
            return len(self.shard(m))
        return max(1, int(round(self.spec.batch_size * scale)))

    def next_batch(self, m: int, n: int) -> Dataset:
        shard = self.shard(m)
        if self.spec.batch_size == 0 and n >= len(shard):
            return shard
        return shard.take(self._stream(m).integers(0, len(shard), n))

    def loss_and_grad(self, params: ParamStore, batch: Any) -> Tuple[float, np.ndarray]:
        return loss_and_grad(self.spec, params, batch)

    def evaluate(self, params: ParamStore) -> Dict[str, float]:
        return evaluate(self.spec, params, self.dataset)

    def stream_state(self, m: int) -> Dict[str, Any]:
        return dict(self._stream(m).bit_generator.state)

    def restore_stream(self, m: int, state: Dict[str, Any]) -> None:
        if not state:
            return
        rng = named_stream(self.seed, "data", m)
        rng.bit_generator.state = state
        self._streams[m] = rng
