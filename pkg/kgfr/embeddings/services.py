import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import numpy as np
import requests
from django.conf import settings
from tenacity import retry, retry_if_exception, stop_after_attempt, wait_fixed

from configs.config_loader import get_model_config
from kgfr.exceptions import (
    CheckpointError, ConfigurationError, GraphFormatError, LlmError, ProviderError, UnknownIdError
)
from kgfr.graph_store.services import KnowledgeGraph

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b'KGFREMB1'
EMBEDDING_VERSION = 1
DEFAULT_CACHE_SIZE = 10000

PathLike = Union[str, Path]


@dataclass(frozen=True)
class TextEmbedding:
    """文本嵌入向量及其来源后端"""
    vector: np.ndarray
    source_tag: str


class EmbeddingProvider:
    """
    嵌入后端基类。子类实现 _encode，基类负责维度校验、有限性检查和缓存。
    缓存按最近使用淘汰，容量取 configs.yaml 的 embedding.cache_size。
    初始化后只读，可并发调用 encode。
    """
    source_tag = 'base'

    def __init__(self, dim: int, cache_size: Optional[int] = None):
        if dim < 1:
            raise ConfigurationError(f"嵌入维度必须为正数: {dim}")
        self.dim = dim
        if cache_size is None:
            try:
                cache_size = get_model_config('embedding').get('cache_size', DEFAULT_CACHE_SIZE)
            except KeyError:
                cache_size = DEFAULT_CACHE_SIZE
        if cache_size < 0:
            raise ConfigurationError(f"嵌入缓存容量不能为负数: {cache_size}")
        self._cached_encode = lru_cache(maxsize=cache_size)(self._checked_encode)

    def _encode(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def _checked_encode(self, text: str) -> np.ndarray:
        vector = np.asarray(self._encode(text), dtype=np.float32).reshape(-1)
        if vector.shape[0] != self.dim:
            raise ConfigurationError(
                f"{self.source_tag} 返回的向量维度为 {vector.shape[0]}，配置维度为 {self.dim}")
        if not np.all(np.isfinite(vector)):
            raise ProviderError(f"{self.source_tag} 返回了非有限数值: {text[:50]!r}")
        vector.setflags(write=False)
        return vector

    def encode(self, text: str) -> TextEmbedding:
        return TextEmbedding(vector=self._cached_encode(text), source_tag=self.source_tag)

    def cache_info(self):
        return self._cached_encode.cache_info()

    def encode_many(self, texts: Iterable[str]) -> np.ndarray:
        rows = [self.encode(text).vector for text in texts]
        if not rows:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack(rows)


class HashEmbeddingProvider(EmbeddingProvider):
    """测试后端：以文本字节为种子的伪随机单位向量，跨平台可复现，不携带语义"""
    source_tag = 'hash'

    def __init__(self, dim: int, seed: int = 0, cache_size: Optional[int] = None):
        super().__init__(dim, cache_size)
        self.seed = seed

    def _encode(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00".encode('utf-8') + text.encode('utf-8')).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], 'little'))
        vector = rng.standard_normal(self.dim)
        return vector / np.linalg.norm(vector)


class PrecomputedEmbeddingProvider(EmbeddingProvider):
    """从预计算文件提供精确存储的向量"""
    source_tag = 'precomputed'

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int):
        super().__init__(dim)
        self.vectors: Dict[str, np.ndarray] = {}
        for key, vector in vectors.items():
            vector = np.asarray(vector, dtype=np.float32).reshape(-1)
            if vector.shape[0] != dim:
                raise ConfigurationError(f"键 {key!r} 的向量维度为 {vector.shape[0]}，配置维度为 {dim}")
            self.vectors[key] = vector

    def _encode(self, text: str) -> np.ndarray:
        try:
            return self.vectors[text]
        except KeyError:
            raise UnknownIdError(f"预计算嵌入中不存在该键: {text[:80]!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def save_precomputed(vectors: Mapping[str, np.ndarray], dim: int, path: PathLike) -> None:
    """写入预计算嵌入文件：魔数、版本、维度、条目数，随后每条为 长度前缀UTF-8键 + d个小端float32"""
    with open(path, 'wb') as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack('<III', EMBEDDING_VERSION, dim, len(vectors)))
        for key, vector in vectors.items():
            vector = np.asarray(vector, dtype='<f4').reshape(-1)
            if vector.shape[0] != dim:
                raise ConfigurationError(f"键 {key!r} 的向量维度为 {vector.shape[0]}，文件维度为 {dim}")
            encoded = key.encode('utf-8')
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(vector.tobytes())


def load_precomputed(path: PathLike, dim: int) -> PrecomputedEmbeddingProvider:
    """
    加载预计算嵌入文件。
    :param dim: 引擎配置的维度，与文件头不一致时抛出 ConfigurationError
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"嵌入文件不存在: {path}")
    data = path.read_bytes()
    header_size = len(EMBEDDING_MAGIC) + 12
    if len(data) < header_size or data[:len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise CheckpointError(f"不是有效的嵌入文件: {path}")
    version, file_dim, count = struct.unpack_from('<III', data, len(EMBEDDING_MAGIC))
    if version != EMBEDDING_VERSION:
        raise CheckpointError(f"不支持的嵌入文件版本: {version}")
    if file_dim != dim:
        raise ConfigurationError(f"嵌入文件维度为 {file_dim}，引擎配置维度为 {dim}")

    vectors = {}
    offset = header_size
    row_bytes = 4 * dim
    try:
        for _ in range(count):
            (key_len,) = struct.unpack_from('<I', data, offset)
            offset += 4
            key = data[offset:offset + key_len].decode('utf-8')
            offset += key_len
            if offset + row_bytes > len(data):
                raise CheckpointError(f"嵌入文件被截断: {path}")
            vectors[key] = np.frombuffer(data, dtype='<f4', count=dim, offset=offset).astype(np.float32)
            offset += row_bytes
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"嵌入文件损坏: {path} ({e})") from e

    logger.info(f"加载预计算嵌入 {path.name}: {len(vectors)} 条, 维度 {dim}")
    return PrecomputedEmbeddingProvider(vectors, dim)


def _is_retryable(exc: BaseException) -> bool:
    return isinstance(exc, ProviderError) and exc.retryable


class RemoteEncoderProvider(EmbeddingProvider):
    """远程编码服务：POST 文本，返回向量；并发请求数受信号量限制"""
    source_tag = 'remote'

    def __init__(self, dim: int, url: Optional[str] = None, api_key: Optional[str] = None,
                 model: Optional[str] = None, timeout: Optional[float] = None,
                 max_in_flight: Optional[int] = None, retry_budget: Optional[int] = None):
        super().__init__(dim)
        try:
            cfg = get_model_config('embedding')
        except KeyError:
            cfg = {}
        self.url = url or getattr(settings, 'KGFR_ENCODER_URL', '')
        self.api_key = api_key if api_key is not None else getattr(settings, 'KGFR_ENCODER_API_KEY', '')
        self.model = model or getattr(settings, 'KGFR_ENCODER_MODEL', '') or cfg.get('model_id', '')
        self.timeout = timeout or cfg.get('timeout', 30)
        self.retry_budget = retry_budget or cfg.get('retry_budget', 3)
        self._semaphore = threading.BoundedSemaphore(max_in_flight or cfg.get('max_in_flight', 4))
        if not self.url:
            raise ConfigurationError("未配置远程编码服务地址 KGFR_ENCODER_URL")

    def _headers(self) -> Dict[str, str]:
        headers = {'Content-Type': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f'Bearer {self.api_key}'
        return headers

    def _post(self, text: str) -> np.ndarray:
        try:
            with self._semaphore:
                response = requests.post(
                    self.url,
                    headers=self._headers(),
                    json={'model': self.model, 'input': text},
                    timeout=self.timeout,
                )
        except (requests.exceptions.Timeout, requests.exceptions.ConnectionError) as e:
            logger.error(f"编码服务请求失败: {e}")
            raise ProviderError(f"无法连接编码服务: {self.url}", retryable=True) from e

        if response.status_code != 200:
            retryable = response.status_code == 429 or response.status_code >= 500
            logger.error(f"编码服务返回 HTTP {response.status_code}")
            raise ProviderError(f"编码服务请求失败: HTTP {response.status_code}", retryable=retryable)

        try:
            body = response.json()
            if 'embedding' in body:
                return np.asarray(body['embedding'], dtype=np.float32)
            if body.get('data'):
                return np.asarray(body['data'][0]['embedding'], dtype=np.float32)
        except (ValueError, KeyError, IndexError, TypeError, AttributeError) as e:
            logger.error(f"编码服务响应无法解析: {e}")
            raise ProviderError(f"编码服务响应格式无效: {e}") from e
        raise ProviderError("编码服务响应中没有 embedding 字段")

    def _encode(self, text: str) -> np.ndarray:
        call = retry(
            stop=stop_after_attempt(self.retry_budget),
            wait=wait_fixed(1),
            retry=retry_if_exception(_is_retryable),
            reraise=True,
        )(self._post)
        return call(text)


def create_provider(spec: str, dim: int, seed: int = 0) -> EmbeddingProvider:
    """
    按命令行写法创建后端：
    'hash' / 'hash:<seed>' 测试后端；'remote' 远程服务；其余视为预计算文件路径
    """
    spec = (spec or 'hash').strip()
    if spec == 'hash':
        return HashEmbeddingProvider(dim, seed=seed)
    if spec.startswith('hash:'):
        try:
            return HashEmbeddingProvider(dim, seed=int(spec.split(':', 1)[1]))
        except ValueError:
            raise ConfigurationError(f"无效的哈希后端种子: {spec}") from None
    if spec == 'remote':
        return RemoteEncoderProvider(dim)
    return load_precomputed(spec, dim)


# ---- 关系描述 ----

class Provenance(str, Enum):
    LLM_GENERATED = 'llm-generated'
    FILE_LOADED = 'file-loaded'
    FALLBACK_NAME = 'fallback-name'


@dataclass
class RelationDescriptionTable:
    """关系编号 -> 描述文本 u_r，附带每条描述的来源"""
    entries: Dict[int, str] = field(default_factory=dict)
    provenance: Dict[int, Provenance] = field(default_factory=dict)

    def set(self, relation: int, text: str, provenance: Provenance) -> None:
        self.entries[relation] = text
        self.provenance[relation] = provenance

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, graph: KnowledgeGraph) -> None:
        """描述表必须恰好覆盖关系词表"""
        expected = set(range(graph.num_relations))
        actual = set(self.entries)
        if actual != expected:
            missing = sorted(expected - actual)
            extra = sorted(actual - expected)
            raise ConfigurationError(f"关系描述表与词表不一致: 缺少 {missing[:5]}, 多余 {extra[:5]}")

    def texts(self, graph: KnowledgeGraph):
        self.validate(graph)
        return [self.entries[r] for r in range(graph.num_relations)]

    def save_tsv(self, graph: KnowledgeGraph, path: PathLike) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for r in range(graph.num_relations):
                text = ' '.join(self.entries[r].split())
                f.write(f"{graph.relations[r].label}\t{self.provenance[r].value}\t{text}\n")

    @classmethod
    def load_tsv(cls, graph: KnowledgeGraph, path: PathLike) -> 'RelationDescriptionTable':
        if not Path(path).is_file():
            raise GraphFormatError(f"描述文件不存在: {path}")
        table = cls()
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.rstrip('\r\n')
                if not line.strip():
                    continue
                parts = line.split('\t')
                if len(parts) != 3:
                    raise GraphFormatError("描述文件每行应为 关系\\t来源\\t描述", line_no=line_no)
                label, _, text = parts
                table.set(graph.relation_id(label), text, Provenance.FILE_LOADED)
        table.validate(graph)
        return table


RELATION_DESCRIPTION_PROMPT = """Task: Generate a description of the given relation.
Relation: {relation}
Examples: {examples}
Output Example: sports.sport.teams describes how a sport is associated with the teams that participate in it.
Answer with a single sentence describing the relation {relation}."""


def relation_examples(graph: KnowledgeGraph, relation: int, limit: int):
    """返回关系的前 limit 个示例三元组（标签形式，逆关系给出逆方向三元组）"""
    rows = graph.triples[graph.triples[:, 1] == relation][:limit]
    return [(graph.entity_labels[s], graph.relations[r].label, graph.entity_labels[o])
            for s, r, o in rows.tolist()]


def build_description_prompt(graph: KnowledgeGraph, relation: int, samples_per_relation: int) -> str:
    examples = relation_examples(graph, relation, samples_per_relation)
    rendered = '; '.join(f"({s}, {r}, {o})" for s, r, o in examples) or '(none)'
    return RELATION_DESCRIPTION_PROMPT.format(relation=graph.relations[relation].label, examples=rendered)


def describe_all_relations(graph: KnowledgeGraph, llm, samples_per_relation: int = 3) -> RelationDescriptionTable:
    """
    用 LLM 为每个关系（含逆关系）生成统一的文本描述；
    单个关系失败时退回关系名并标记来源，不中断整体流程。
    """
    table = RelationDescriptionTable()
    failures = 0
    for relation in graph.relations:
        prompt = build_description_prompt(graph, relation.id, samples_per_relation)
        try:
            text = ' '.join(llm.complete(prompt).split())
            if not text:
                raise LlmError("LLM 返回空描述")
            table.set(relation.id, text, Provenance.LLM_GENERATED)
        except LlmError as e:
            failures += 1
            logger.warning(f"关系 {relation.label} 描述生成失败，使用关系名: {e}")
            table.set(relation.id, relation.label, Provenance.FALLBACK_NAME)

    logger.info(f"关系描述生成完成: {len(table)} 条, 失败 {failures} 条")
    return table


def relation_embeddings(graph: KnowledgeGraph, table: RelationDescriptionTable,
                        provider: EmbeddingProvider) -> np.ndarray:
    """r^(0) = encode(u_r)，按关系编号排列成 |R| x d 矩阵"""
    return provider.encode_many(table.texts(graph))


def fallback_descriptions(graph: KnowledgeGraph) -> RelationDescriptionTable:
    """没有描述文件时直接使用关系名"""
    table = RelationDescriptionTable()
    for relation in graph.relations:
        table.set(relation.id, relation.label, Provenance.FALLBACK_NAME)
    return table
