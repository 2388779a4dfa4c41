"""模型参数与检查点文件"""
import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from kgfr.exceptions import CheckpointError, ConfigurationError, NumericError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'KGFRCKPT'
CHECKPOINT_VERSION = 1

LAYER_MATRICES = ('W1', 'W2', 'W3', 'W4', 'W5', 'W6')

PathLike = Union[str, Path]


def layer_shapes(dim: int, dim_attn: int) -> Dict[str, Tuple[int, int]]:
    return {
        'W1': (dim, 2 * dim),
        'W2': (dim, dim),
        'W3': (1, dim_attn),
        'W4': (dim_attn, dim),
        'W5': (dim_attn, dim),
        'W6': (dim_attn, dim),
    }


def parameter_names(layers: int) -> List[str]:
    """检查点中的矩阵顺序：逐层 W1..W6，最后 W7"""
    names = [f'{m}[{i}]' for i in range(layers) for m in LAYER_MATRICES]
    names.append('W7')
    return names


class ModelParams:
    """
    全部可学习参数。按名称访问: params['W4', 0] 或 params['W7']。
    """

    def __init__(self, tensors: Dict[str, np.ndarray], layers: int, dim: int, dim_attn: int):
        if layers < 1 or dim < 1 or dim_attn < 1:
            raise ConfigurationError(f"无效的模型尺寸: L={layers}, d={dim}, d_attn={dim_attn}")
        self.layers = layers
        self.dim = dim
        self.dim_attn = dim_attn
        self.tensors: Dict[str, np.ndarray] = {name: tensors[name] for name in parameter_names(layers)}
        self.validate()

    # ---- 构造 ----

    @classmethod
    def zeros(cls, layers: int, dim: int, dim_attn: int, dtype=np.float32) -> 'ModelParams':
        tensors = {}
        shapes = layer_shapes(dim, dim_attn)
        for i in range(layers):
            for m in LAYER_MATRICES:
                tensors[f'{m}[{i}]'] = np.zeros(shapes[m], dtype=dtype)
        tensors['W7'] = np.zeros((1, dim), dtype=dtype)
        return cls(tensors, layers, dim, dim_attn)

    @classmethod
    def initialize(cls, layers: int, dim: int, dim_attn: int, seed: int = 0,
                   dtype=np.float32) -> 'ModelParams':
        """Xavier 均匀初始化，固定种子"""
        rng = np.random.default_rng(seed)
        params = cls.zeros(layers, dim, dim_attn, dtype=dtype)
        for name in parameter_names(layers):
            fan_out, fan_in = params.tensors[name].shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.tensors[name] = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        return params

    def zeros_like(self) -> 'ModelParams':
        return ModelParams.zeros(self.layers, self.dim, self.dim_attn, dtype=self.dtype)

    def astype(self, dtype) -> 'ModelParams':
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()},
                           self.layers, self.dim, self.dim_attn)

    def copy(self) -> 'ModelParams':
        return self.astype(self.dtype)

    # ---- 访问 ----

    @property
    def dtype(self):
        return self.tensors['W7'].dtype

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, tuple):
            name, layer = key
            key = f'{name}[{layer}]'
        return self.tensors[key]

    def __setitem__(self, key, value: np.ndarray) -> None:
        if isinstance(key, tuple):
            name, layer = key
            key = f'{name}[{layer}]'
        if key not in self.tensors:
            raise KeyError(key)
        self.tensors[key] = value

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name in parameter_names(self.layers):
            yield name, self.tensors[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def validate(self) -> None:
        shapes = layer_shapes(self.dim, self.dim_attn)
        for name, tensor in self.items():
            expected = (1, self.dim) if name == 'W7' else shapes[name.split('[')[0]]
            if tensor.shape != expected:
                raise ConfigurationError(f"参数 {name} 形状为 {tensor.shape}，应为 {expected}")
            if not np.all(np.isfinite(tensor)):
                raise NumericError(f"参数 {name} 含有非有限数值")

    def equals(self, other: 'ModelParams') -> bool:
        if (self.layers, self.dim, self.dim_attn) != (other.layers, other.dim, other.dim_attn):
            return False
        return all(np.array_equal(a, other.tensors[name]) for name, a in self.items())

    def __repr__(self):
        return (f"ModelParams(L={self.layers}, d={self.dim}, d_attn={self.dim_attn}, "
                f"dtype={self.dtype}, parameters={self.num_parameters()})")


def save_checkpoint(params: ModelParams, path: PathLike) -> None:
    """写入检查点：魔数、版本、(L, d, d_attn)，随后按固定顺序的小端 float32 矩阵"""
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<IIII', CHECKPOINT_VERSION, params.layers, params.dim, params.dim_attn))
        for _, tensor in params.items():
            f.write(np.ascontiguousarray(tensor, dtype='<f4').tobytes())
    logger.info(f"保存检查点 {path}: {params}")


def load_checkpoint(path: PathLike) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"检查点文件不存在: {path}")
    data = path.read_bytes()
    header_size = len(CHECKPOINT_MAGIC) + 16
    if len(data) < header_size or data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"不是有效的检查点文件: {path}")
    version, layers, dim, dim_attn = struct.unpack_from('<IIII', data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"不支持的检查点版本: {version}")
    if layers < 1 or dim < 1 or dim_attn < 1:
        raise CheckpointError(f"检查点尺寸无效: L={layers}, d={dim}, d_attn={dim_attn}")

    shapes = layer_shapes(dim, dim_attn)
    shapes['W7'] = (1, dim)
    tensors = {}
    offset = header_size
    for name in parameter_names(layers):
        shape = shapes[name.split('[')[0]]
        count = shape[0] * shape[1]
        if offset + 4 * count > len(data):
            raise CheckpointError(f"检查点被截断: {path} (读取 {name} 时)")
        tensors[name] = np.frombuffer(data, dtype='<f4', count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"检查点末尾有多余数据: {path}")

    params = ModelParams(tensors, layers, dim, dim_attn)
    logger.info(f"加载检查点 {path.name}: {params}")
    return params
