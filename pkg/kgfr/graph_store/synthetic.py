"""合成知识图谱与问题生成（用于桌面规模实验、基准测试与验收）"""
import logging
from typing import List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LabelledTriple = Tuple[str, str, str]


def _entity_label(i: int) -> str:
    return f"ent_{i:04d}"


def _relation_label(i: int) -> str:
    return f"rel_{i:02d}"


def random_graph(num_entities: int, num_relations: int, num_triples: int,
                 seed: int = 0) -> List[LabelledTriple]:
    """均匀随机三元组，可能包含自环与重复（加载时去重）"""
    rng = np.random.default_rng(seed)
    subjects = rng.integers(0, num_entities, size=num_triples)
    relations = rng.integers(0, num_relations, size=num_triples)
    objects = rng.integers(0, num_entities, size=num_triples)
    return [(_entity_label(s), _relation_label(r), _entity_label(o))
            for s, r, o in zip(subjects.tolist(), relations.tolist(), objects.tolist())]


def hub_graph(num_entities: int, num_relations: int, num_triples: int,
              num_hubs: int = 3, hub_degree: int = 200, seed: int = 0) -> List[LabelledTriple]:
    """
    在随机图上叠加若干枢纽实体：每个枢纽沿同一关系连接 hub_degree 个实体，
    用于观察非对称剪枝的效果。
    """
    rng = np.random.default_rng(seed)
    triples = random_graph(num_entities, num_relations, num_triples, seed=seed)
    hub_degree = min(hub_degree, num_entities)
    for h in range(num_hubs):
        hub = int(rng.integers(0, num_entities))
        relation = int(rng.integers(0, num_relations))
        for o in rng.choice(num_entities, size=hub_degree, replace=False).tolist():
            triples.append((_entity_label(hub), _relation_label(relation), _entity_label(o)))
    return triples


def question_text_for(relation_label: str) -> str:
    """问题文本只由关系决定，保证同类问题的文本一致"""
    return f"Which entity does the topic entity reach through {relation_label}?"


def one_hop_task(num_entities: int = 200, num_relations: int = 8, num_questions: int = 150,
                 out_degree: int = 3, seed: int = 0) -> Tuple[List[LabelledTriple], List[dict]]:
    """
    单跳问答任务：答案是主题实体沿关系 r 的唯一邻居。
    返回 (正向标签三元组, 问题记录列表)，问题记录格式与问题文件一致。
    """
    rng = np.random.default_rng(seed)
    edges = set()
    for s in range(num_entities):
        for _ in range(out_degree):
            r = int(rng.integers(0, num_relations))
            o = int(rng.integers(0, num_entities))
            if o != s:
                edges.add((s, r, o))

    groups = {}
    for s, r, o in edges:
        groups.setdefault((s, r), []).append(o)
    unique_pairs = sorted(key for key, objs in groups.items() if len(objs) == 1)
    if len(unique_pairs) < num_questions:
        raise ValueError(f"可用的唯一邻居问题只有 {len(unique_pairs)} 道，少于 {num_questions}")

    chosen = rng.choice(len(unique_pairs), size=num_questions, replace=False)
    records = []
    for n, idx in enumerate(sorted(chosen.tolist())):
        s, r = unique_pairs[idx]
        records.append({
            'id': f"q{n:04d}",
            'question': question_text_for(_relation_label(r)),
            'topics': [_entity_label(s)],
            'answers': [_entity_label(groups[(s, r)][0])],
        })

    triples = [(_entity_label(s), _relation_label(r), _entity_label(o)) for s, r, o in sorted(edges)]
    logger.info(f"生成单跳任务: {len(triples)} 个三元组, {len(records)} 道问题")
    return triples, records
