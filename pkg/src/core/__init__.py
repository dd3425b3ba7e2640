# 解耦分片训练桌面实现 - 核心模块
from src.core.params import (
    TensorSpec, ParamStore, FragmentView, FragmentSlice,
    axpy, l2_norm, fragment_slice, fragment_views, checksum, encode_fragment, decode_fragment,
)
from src.core.rng import fnv1a64, named_stream
