"""
问题条件化消息传递与非对称渐进传播。

第 i 层（i = 0..L-1）的计算顺序：
1. 关系表示更新 r^(i) = W1[i] · [r^(i-1); q]，r^(-1) 为关系描述嵌入；
2. 从 S_i 扩展一跳得到 N^(i+1)、S_{i+1}；
3. 沿 N^(i+1) 的每条边 (s, r, e) 计算注意力和消息，按宾语聚合得到 e^(i+1)。
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from kgfr.exceptions import (
    CapacityError, ConfigurationError, NumericError, PreconditionError, UnknownIdError
)
from kgfr.graph_store.services import KnowledgeGraph
from kgfr.propagation.params import ModelParams

logger = logging.getLogger(__name__)

EMPTY_EDGES = np.zeros((0, 3), dtype=np.int64)
EMPTY_EDGES.setflags(write=False)


def _edge_keys(edges: np.ndarray, graph: KnowledgeGraph) -> np.ndarray:
    """把 (s, r, o) 编码为保持字典序的整数键"""
    edges = edges.astype(np.int64)
    return (edges[:, 0] * graph.num_relations + edges[:, 1]) * graph.num_entities + edges[:, 2]


@dataclass
class EntityState:
    """稀疏实体表示：只保存已到达实体，其余实体视为零向量"""
    entity_ids: np.ndarray
    embeddings: np.ndarray
    layer: int = 0

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __contains__(self, entity: int) -> bool:
        pos = np.searchsorted(self.entity_ids, entity)
        return pos < len(self.entity_ids) and self.entity_ids[pos] == entity

    def embedding(self, entity: int) -> np.ndarray:
        pos = np.searchsorted(self.entity_ids, entity)
        if pos < len(self.entity_ids) and self.entity_ids[pos] == entity:
            return self.embeddings[pos]
        return np.zeros(self.dim, dtype=self.embeddings.dtype)

    def as_dict(self) -> Dict[int, np.ndarray]:
        return {int(e): self.embeddings[i] for i, e in enumerate(self.entity_ids)}


@dataclass
class GroupExpansion:
    """一次 (实体, 关系) 分组扩展的记录，用于校验剪枝上界"""
    hop: int
    entity: int
    relation: int
    group_size: int
    overlap: int
    emitted: int
    pruned: bool


@dataclass
class RetrievalSubgraph:
    """
    逐跳累积的检索子图。
    reached_history[i] 为 S_i (i = 0..L)，edge_history[i] 为 N^(i+1)，
    frontier_history[i] 为第 i 跳新增的边。
    """
    topics: Tuple[int, ...]
    reached_history: List[np.ndarray] = field(default_factory=list)
    edge_history: List[np.ndarray] = field(default_factory=list)
    frontier_history: List[np.ndarray] = field(default_factory=list)
    lam: float = float('inf')
    progressive: bool = True
    asymmetric: bool = True

    @property
    def hops(self) -> int:
        return len(self.edge_history)

    @property
    def reached_entities(self) -> np.ndarray:
        return self.reached_history[-1]

    @property
    def reached_edges(self) -> np.ndarray:
        return self.edge_history[-1] if self.edge_history else EMPTY_EDGES

    @property
    def num_entities(self) -> int:
        return len(self.reached_entities)

    @property
    def num_edges(self) -> int:
        return len(self.reached_edges)

    def edges_for_layer(self, layer: int) -> np.ndarray:
        return self.edge_history[layer]

    def contains_entity(self, entity: int) -> bool:
        nodes = self.reached_entities
        pos = np.searchsorted(nodes, entity)
        return pos < len(nodes) and nodes[pos] == entity

    def contains_edge(self, s: int, r: int, o: int) -> bool:
        edges = self.reached_edges
        return bool(np.any((edges[:, 0] == s) & (edges[:, 1] == r) & (edges[:, 2] == o)))

    def incoming(self, entity: int) -> np.ndarray:
        edges = self.reached_edges
        return edges[edges[:, 2] == entity]

    def edge_set(self):
        return set(map(tuple, self.reached_edges.tolist()))


@dataclass(frozen=True)
class AttentionRecord:
    edge: Tuple[int, int, int]
    alphas: Tuple[Tuple[int, float], ...]
    alpha_max: float


@dataclass
class AttentionTable:
    """N^(L) 中每条边在其活跃层上的注意力；未活跃的层为 NaN"""
    edges: np.ndarray
    per_layer: np.ndarray

    def __post_init__(self):
        if len(self.edges):
            self.alpha_max = np.nanmax(self.per_layer, axis=0)
        else:
            self.alpha_max = np.zeros(0, dtype=self.per_layer.dtype)

    def __len__(self) -> int:
        return len(self.edges)

    def record(self, index: int) -> AttentionRecord:
        column = self.per_layer[:, index]
        alphas = tuple((layer, float(a)) for layer, a in enumerate(column.tolist()) if not np.isnan(a))
        return AttentionRecord(edge=tuple(self.edges[index].tolist()), alphas=alphas,
                               alpha_max=float(self.alpha_max[index]))

    def records(self) -> List[AttentionRecord]:
        return [self.record(i) for i in range(len(self))]

    def incoming_indices(self, entity: int) -> np.ndarray:
        return np.flatnonzero(self.edges[:, 2] == entity)


@dataclass
class LayerCache:
    """反向传播所需的单层中间量"""
    relations_in: np.ndarray
    relations_out: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    subj: np.ndarray
    rel_rows: np.ndarray
    pre_activation: np.ndarray
    alpha: np.ndarray
    aggregate: np.ndarray


@dataclass
class PropagationResult:
    state: EntityState
    subgraph: RetrievalSubgraph
    attention: AttentionTable
    relations: np.ndarray
    question: np.ndarray
    entity_history: List[np.ndarray] = field(default_factory=list)
    cache: Optional[List[LayerCache]] = None


@dataclass
class EntityScores:
    """c_{e|q}，未出现的实体分数为 0"""
    entity_ids: np.ndarray
    values: np.ndarray

    def get(self, entity: int) -> float:
        pos = np.searchsorted(self.entity_ids, entity)
        if pos < len(self.entity_ids) and self.entity_ids[pos] == entity:
            return float(self.values[pos])
        return 0.0

    def as_dict(self) -> Dict[int, float]:
        return {int(e): float(v) for e, v in zip(self.entity_ids.tolist(), self.values.tolist())}

    def dense(self, num_entities: int) -> np.ndarray:
        full = np.zeros(num_entities, dtype=self.values.dtype)
        full[self.entity_ids] = self.values
        return full


# ---- 基本算子 ----

def _validate_topics(graph: KnowledgeGraph, topics: Iterable[int]) -> np.ndarray:
    topics = np.unique(np.asarray(list(topics), dtype=np.int64))
    if not len(topics):
        raise PreconditionError("主题实体集合不能为空")
    if topics[0] < 0 or topics[-1] >= graph.num_entities:
        raise UnknownIdError(f"主题实体编号越界: {topics.tolist()}")
    return topics


def init_entities(graph: KnowledgeGraph, topics: Iterable[int], dim: int,
                  dtype=np.float32) -> EntityState:
    """主题实体初始化为全 1 向量，其余实体不存储（即零向量）"""
    topics = _validate_topics(graph, topics)
    return EntityState(entity_ids=topics, embeddings=np.ones((len(topics), dim), dtype=dtype), layer=0)


def update_relations(layer: int, rel_embs: np.ndarray, q_emb: np.ndarray, params: ModelParams) -> np.ndarray:
    """r^(i) = W1[i] · [r^(i-1); q]，对全部关系批量计算"""
    rel_embs = np.asarray(rel_embs)
    q_emb = np.asarray(q_emb)
    d = params.dim
    if rel_embs.ndim != 2 or rel_embs.shape[1] != d or q_emb.shape != (d,):
        raise ConfigurationError(f"关系或问题向量维度与模型维度 {d} 不符: {rel_embs.shape}, {q_emb.shape}")
    w1 = params['W1', layer]
    return rel_embs @ w1[:, :d].T + w1[:, d:] @ q_emb


def _sigmoid(z: np.ndarray) -> np.ndarray:
    """结果保持在 (0, 1) 开区间内，饱和时取最接近端点的可表示值"""
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    zero, one = out.dtype.type(0), out.dtype.type(1)
    return np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)


def attention_batch(subj: np.ndarray, rel_rows: np.ndarray, q_emb: np.ndarray, layer: int,
                    params: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """返回 (α, 预激活 P)，α = sigmoid(W3 · relu(W4·s + W5·r + W6·q))"""
    pre = subj @ params['W4', layer].T + rel_rows @ params['W5', layer].T + params['W6', layer] @ q_emb
    hidden = np.maximum(pre, 0)
    alpha = _sigmoid(hidden @ params['W3', layer][0])
    return alpha, pre


def attention(s_emb: np.ndarray, r_emb: np.ndarray, q_emb: np.ndarray, layer: int,
              params: ModelParams) -> float:
    alpha, _ = attention_batch(np.asarray(s_emb)[None, :], np.asarray(r_emb)[None, :],
                               np.asarray(q_emb), layer, params)
    if not np.isfinite(alpha[0]):
        raise NumericError(f"第 {layer} 层注意力出现非有限数值")
    return float(alpha[0])


# ---- 非对称渐进扩展 ----

def app_expand(graph: KnowledgeGraph, sub: RetrievalSubgraph, hop: int, lam: float,
               progressive: bool = True, asymmetric: bool = True,
               instrument: Optional[List[GroupExpansion]] = None) -> np.ndarray:
    """
    从 S_hop 扩展一跳。对每个 (e, r) 分组：|C| <= λ 时发出全部边，
    否则只发出宾语已在 S_hop 中的边。
    :param progressive: 关闭时每跳都从全部实体出发
    :param asymmetric: 关闭时不做剪枝
    :return: 本跳发出的边，按 (s, r, o) 升序
    """
    if lam < 0:
        raise ConfigurationError(f"剪枝阈值 λ 不能为负数: {lam}")
    reached = sub.reached_history[hop]
    sources = reached if progressive else np.arange(graph.num_entities, dtype=np.int64)

    rows = []
    for e in sources.tolist():
        for r, objects in graph.relation_groups(e):
            pruned = asymmetric and len(objects) > lam
            if pruned:
                emitted = objects[np.isin(objects, reached, assume_unique=True)]
            else:
                emitted = objects
            if instrument is not None:
                overlap = int(np.isin(objects, reached, assume_unique=True).sum())
                instrument.append(GroupExpansion(hop, e, r, len(objects), overlap, len(emitted), pruned))
            if len(emitted):
                block = np.empty((len(emitted), 3), dtype=np.int64)
                block[:, 0] = e
                block[:, 1] = r
                block[:, 2] = emitted
                rows.append(block)
    return np.concatenate(rows) if rows else EMPTY_EDGES


def expand_subgraph(graph: KnowledgeGraph, topics: Iterable[int], hops: int, lam: float,
                    progressive: bool = True, asymmetric: bool = True,
                    edge_cap: Optional[int] = None,
                    instrument: Optional[List[GroupExpansion]] = None) -> RetrievalSubgraph:
    """逐跳执行 app_expand 并累积合并边集与实体集"""
    topics = _validate_topics(graph, topics)
    sub = RetrievalSubgraph(topics=tuple(topics.tolist()), reached_history=[topics],
                            lam=lam, progressive=progressive, asymmetric=asymmetric)
    edges = EMPTY_EDGES
    for hop in range(hops):
        emitted = app_expand(graph, sub, hop, lam, progressive, asymmetric, instrument)
        if len(edges):
            is_new = ~np.isin(_edge_keys(emitted, graph), _edge_keys(edges, graph))
            frontier = emitted[is_new]
        else:
            frontier = emitted
        if len(frontier):
            edges = np.unique(np.concatenate([edges, frontier]), axis=0)
        if edge_cap is not None and len(edges) > edge_cap:
            raise CapacityError(f"第 {hop} 跳后检索子图有 {len(edges)} 条边，超过上限 {edge_cap}",
                                edges=len(edges))
        reached = np.union1d(sub.reached_history[hop], np.union1d(edges[:, 0], edges[:, 2]))
        sub.reached_history.append(reached.astype(np.int64))
        sub.edge_history.append(edges)
        sub.frontier_history.append(frontier)
    return sub


# ---- 前向传播 ----

def _raise_non_finite(graph: KnowledgeGraph, layer: int, edges: np.ndarray, values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.all(np.isfinite(values.reshape(len(values), -1)), axis=1))
    if len(bad):
        s, r, o = edges[bad[0]].tolist()
        raise NumericError(f"第 {layer} 层边 ({graph.entity_labels[s]}, {graph.relations[r].label}, "
                           f"{graph.entity_labels[o]}) 出现非有限数值")
    raise NumericError(f"第 {layer} 层实体表示出现非有限数值")


def propagate(graph: KnowledgeGraph, q_emb: np.ndarray, topics: Iterable[int], params: ModelParams,
              rel_init: np.ndarray, lam: float = 100, progressive: bool = True, asymmetric: bool = True,
              edge_cap: Optional[int] = None, subgraph: Optional[RetrievalSubgraph] = None,
              keep_cache: bool = False) -> PropagationResult:
    """
    对一道问题运行 L 层传播。
    :param rel_init: |R| x d 的关系描述嵌入
    :param subgraph: 传入时复用已有的扩展结果（剪枝决定被冻结）
    :param keep_cache: 保存反向传播所需的中间量
    """
    dtype = params.dtype
    d = params.dim
    q = np.asarray(q_emb, dtype=dtype).reshape(-1)
    relations = np.asarray(rel_init, dtype=dtype)
    if q.shape[0] != d:
        raise ConfigurationError(f"问题向量维度 {q.shape[0]} 与模型维度 {d} 不符")
    if relations.shape != (graph.num_relations, d):
        raise ConfigurationError(f"关系嵌入形状 {relations.shape} 应为 {(graph.num_relations, d)}")

    if subgraph is None:
        subgraph = expand_subgraph(graph, topics, params.layers, lam, progressive, asymmetric, edge_cap)
    elif subgraph.hops != params.layers:
        raise ConfigurationError(f"子图跳数 {subgraph.hops} 与模型层数 {params.layers} 不符")

    nodes = subgraph.reached_entities
    final_edges = subgraph.reached_edges
    final_keys = _edge_keys(final_edges, graph)
    per_layer = np.full((params.layers, len(final_edges)), np.nan, dtype=dtype)

    x = np.zeros((len(nodes), d), dtype=dtype)
    x[np.searchsorted(nodes, np.asarray(subgraph.topics))] = 1
    history = [x]
    cache: List[LayerCache] = []

    for i in range(params.layers):
        relations_in = relations
        relations = update_relations(i, relations_in, q, params)
        edges = subgraph.edges_for_layer(i)
        src = np.searchsorted(nodes, edges[:, 0])
        dst = np.searchsorted(nodes, edges[:, 2])
        rel = edges[:, 1]
        subj = x[src]
        rel_rows = relations[rel]
        alpha, pre = attention_batch(subj, rel_rows, q, i, params)
        messages = alpha[:, None] * (subj + rel_rows)
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(messages))):
            _raise_non_finite(graph, i, edges, np.concatenate([alpha[:, None], messages], axis=1))

        aggregate = np.zeros((len(nodes), d), dtype=dtype)
        np.add.at(aggregate, dst, messages)
        x = aggregate @ params['W2', i].T
        if not np.all(np.isfinite(x)):
            _raise_non_finite(graph, i, edges, messages)

        per_layer[i, np.searchsorted(final_keys, _edge_keys(edges, graph))] = alpha
        history.append(x)
        if keep_cache:
            cache.append(LayerCache(relations_in, relations, src, dst, rel, subj, rel_rows, pre, alpha, aggregate))

    return PropagationResult(
        state=EntityState(entity_ids=nodes, embeddings=x, layer=params.layers),
        subgraph=subgraph,
        attention=AttentionTable(edges=final_edges, per_layer=per_layer),
        relations=relations,
        question=q,
        entity_history=history,
        cache=cache if keep_cache else None,
    )


def score_entities(state: EntityState, params: ModelParams) -> EntityScores:
    """c_{e|q} = W7 · e^(L)，无偏置项"""
    return EntityScores(entity_ids=state.entity_ids, values=state.embeddings @ params['W7'][0])

