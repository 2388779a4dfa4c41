"""节点、边、路径三级检索"""
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from kgfr.exceptions import PreconditionError
from kgfr.graph_store.services import KnowledgeGraph
from kgfr.propagation.params import ModelParams
from kgfr.propagation.services import (
    AttentionTable, EntityScores, PropagationResult, RetrievalSubgraph, propagate, score_entities
)

logger = logging.getLogger(__name__)

Edge = Tuple[int, int, int]

DEFAULT_TOP_K = 20
DEFAULT_TOP_N = 20
DEFAULT_PATH_CAP = 10


@dataclass(frozen=True)
class Fact:
    edge: Edge
    alpha_max: float


@dataclass(frozen=True)
class Path:
    """从候选实体到主题实体的有向路径；source == target 时 edges 为空"""
    source: int
    target: int
    edges: Tuple[Edge, ...]

    def __len__(self) -> int:
        return len(self.edges)


@dataclass
class NodeRetrieval:
    candidates: List[Tuple[int, float]]
    unreached: List[int] = field(default_factory=list)

    @property
    def entity_ids(self) -> List[int]:
        return [e for e, _ in self.candidates]


@dataclass
class RetrievalBundle:
    """交给 LLM 的检索证据：候选实体、重要事实与连接路径"""
    topics: Tuple[int, ...]
    candidates: List[Tuple[int, float]]
    facts: Dict[int, List[Fact]]
    paths: List[Path]
    unreached: List[int] = field(default_factory=list)
    label: str = ''

    @property
    def fact_union(self) -> List[Fact]:
        """I_q：按实体顺序合并、去重后的事实"""
        seen = set()
        union = []
        for facts in self.facts.values():
            for fact in facts:
                if fact.edge not in seen:
                    seen.add(fact.edge)
                    union.append(fact)
        return union

    def is_empty(self) -> bool:
        return not (self.candidates or self.fact_union or self.paths or self.unreached)

    def edges(self) -> set:
        edges = {fact.edge for fact in self.fact_union}
        for path in self.paths:
            edges.update(path.edges)
        return edges


def node_retrieve(scores: EntityScores, sub: RetrievalSubgraph, k: int = DEFAULT_TOP_K,
                  candidates_filter: Optional[Iterable[int]] = None) -> NodeRetrieval:
    """
    S_L 中得分最高的 k 个实体，同分按编号升序。
    给出候选集合时只在 候选 ∩ S_L 中排序，候选中未到达的实体单独列出（分数为 0）。
    """
    if k < 1:
        raise PreconditionError(f"k 必须至少为 1: {k}")
    pool = sub.reached_entities
    unreached: List[int] = []
    if candidates_filter is not None:
        wanted = np.unique(np.asarray(list(candidates_filter), dtype=np.int64))
        unreached = np.setdiff1d(wanted, pool).tolist()
        pool = np.intersect1d(pool, wanted)

    values = np.array([scores.get(e) for e in pool.tolist()], dtype=np.float64)
    order = np.lexsort((pool, -values))[:k]
    return NodeRetrieval(candidates=[(int(pool[i]), float(values[i])) for i in order], unreached=unreached)


def rank_entities(graph: KnowledgeGraph, q_emb: np.ndarray, topics: Iterable[int], params: ModelParams,
                  rel_init: np.ndarray, k: int = DEFAULT_TOP_K,
                  candidates_filter: Optional[Iterable[int]] = None, lam: float = 100,
                  edge_cap: Optional[int] = None, subgraph: Optional[RetrievalSubgraph] = None) -> List[int]:
    """不经过 LLM 的排序：传播一次，返回 S_L 中得分最高的 k 个实体"""
    result = propagate(graph, q_emb, topics, params, rel_init, lam=lam, edge_cap=edge_cap, subgraph=subgraph)
    return node_retrieve(score_entities(result.state, params), result.subgraph, k, candidates_filter).entity_ids


def edge_retrieve(attention: AttentionTable, entity: int, n: int = DEFAULT_TOP_N) -> List[Fact]:
    """以 entity 为宾语的已到达边，按 α_max 降序取前 n 条，同分按 (s, r) 升序"""
    if n < 1:
        raise PreconditionError(f"n 必须至少为 1: {n}")
    idx = attention.incoming_indices(entity)
    if not len(idx):
        return []
    edges = attention.edges[idx]
    alpha = attention.alpha_max[idx].astype(np.float64)
    order = np.lexsort((edges[:, 1], edges[:, 0], -alpha))[:n]
    return [Fact(edge=tuple(edges[i].tolist()), alpha_max=float(alpha[i])) for i in order]


class _SubgraphIndex:
    """子图内的出边与入边索引，出边按 (r, o) 升序"""

    def __init__(self, sub: RetrievalSubgraph):
        self.out_edges: Dict[int, List[Edge]] = defaultdict(list)
        self.in_nodes: Dict[int, List[int]] = defaultdict(list)
        for s, r, o in sub.reached_edges.tolist():
            self.out_edges[s].append((s, r, o))
            self.in_nodes[o].append(s)

    def distances_to(self, target: int) -> Dict[int, int]:
        """沿反向边 BFS，得到每个节点到 target 的最短距离"""
        dist = {target: 0}
        queue = deque([target])
        while queue:
            v = queue.popleft()
            for u in self.in_nodes.get(v, ()):
                if u not in dist:
                    dist[u] = dist[v] + 1
                    queue.append(u)
        return dist

    def shortest_paths(self, source: int, target: int, cap: int) -> List[Path]:
        dist = self.distances_to(target)
        if source not in dist:
            return []
        paths: List[Path] = []
        prefix: List[Edge] = []

        # 按字典序深度优先枚举，只沿距离递减的边前进
        def walk(u: int) -> None:
            if len(paths) >= cap:
                return
            if u == target:
                paths.append(Path(source, target, tuple(prefix)))
                return
            for edge in self.out_edges.get(u, ()):
                v = edge[2]
                if dist.get(v) == dist[u] - 1:
                    prefix.append(edge)
                    walk(v)
                    prefix.pop()
                    if len(paths) >= cap:
                        return

        walk(source)
        return paths


def path_retrieve(sub: RetrievalSubgraph, froms: Sequence[int], topics: Iterable[int],
                  cap: int = DEFAULT_PATH_CAP) -> List[Path]:
    """
    每个 (候选, 主题) 对在子图内的全部有向最短路径，每对最多 cap 条（按边编号字典序选取）。
    """
    if cap < 1:
        raise PreconditionError(f"路径上限必须至少为 1: {cap}")
    index = _SubgraphIndex(sub)
    topics = sorted(set(int(t) for t in topics))
    paths: List[Path] = []
    for source in froms:
        for target in topics:
            paths.extend(index.shortest_paths(int(source), target, cap))
    return paths


def build_bundle(graph: KnowledgeGraph, result: PropagationResult, scores: EntityScores,
                 k: int = DEFAULT_TOP_K, n: int = DEFAULT_TOP_N, cap: int = DEFAULT_PATH_CAP,
                 candidates_filter: Optional[Iterable[int]] = None,
                 fact_entities: Optional[Iterable[int]] = None, label: str = '') -> RetrievalBundle:
    """
    一次传播之上的完整检索：C_q、围绕 主题 ∪ C_q 的事实、C_q 到主题的路径。
    :param fact_entities: 额外需要检索事实的实体
    """
    nodes = node_retrieve(scores, result.subgraph, k, candidates_filter)
    topics = tuple(result.subgraph.topics)
    centers = list(topics) + [e for e in nodes.entity_ids if e not in topics]
    for e in fact_entities or ():
        if e not in centers:
            centers.append(e)

    facts = {}
    for e in centers:
        entity_facts = edge_retrieve(result.attention, e, n)
        if entity_facts:
            facts[e] = entity_facts
    paths = path_retrieve(result.subgraph, nodes.entity_ids, topics, cap)
    logger.debug(f"检索完成: {len(nodes.candidates)} 个候选, {sum(map(len, facts.values()))} 条事实, "
                 f"{len(paths)} 条路径")
    return RetrievalBundle(topics=topics, candidates=nodes.candidates, facts=facts, paths=paths,
                           unreached=nodes.unreached, label=label)


def bundle_to_document(graph: KnowledgeGraph, bundle: RetrievalBundle) -> dict:
    """序列化为带标签的结构化文档"""
    def triple(edge: Edge) -> List[str]:
        s, r, o = edge
        return [graph.entity_labels[s], graph.relations[r].label, graph.entity_labels[o]]

    return {
        'label': bundle.label,
        'topics': [graph.entity_labels[t] for t in bundle.topics],
        'candidates': [{'entity': graph.entity_labels[e], 'score': round(score, 6)}
                       for e, score in bundle.candidates],
        'unreached_candidates': [graph.entity_labels[e] for e in bundle.unreached],
        'facts': [{'triple': triple(f.edge), 'alpha_max': round(f.alpha_max, 6)} for f in bundle.fact_union],
        'paths': [{'from': graph.entity_labels[p.source], 'to': graph.entity_labels[p.target],
                   'triples': [triple(e) for e in p.edges]} for p in bundle.paths],
    }
