import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from kgfr.exceptions import (
    GraphFormatError, GraphStateError, PreconditionError, UnknownIdError
)

logger = logging.getLogger(__name__)

# 逆关系标签的保留后缀，正向关系标签不允许以此结尾
INVERSE_SUFFIX = '^-1'

TRIPLE_FORMATS = ('tsv',)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Relation:
    """关系词表条目"""
    id: int
    label: str
    inverse: bool = False
    # 未做逆关系增强前为 None
    partner: Optional[int] = None


class KnowledgeGraph:
    """
    背景知识图谱：实体/关系词表、三元组集合以及按 (subject, relation) 分组的邻接索引。
    构造完成后只读，可被多个线程并发读取。
    """

    def __init__(self, entity_labels: Sequence[str], relations: Sequence[Relation],
                 triples: np.ndarray):
        self.entity_labels: Tuple[str, ...] = tuple(entity_labels)
        self.relations: Tuple[Relation, ...] = tuple(relations)
        self.entity_ids: Dict[str, int] = {label: i for i, label in enumerate(self.entity_labels)}
        self.relation_ids: Dict[str, int] = {rel.label: rel.id for rel in self.relations}

        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(triples):
            # np.unique 同时完成去重和 (s, r, o) 字典序排序
            triples = np.unique(triples, axis=0)
            self._check_ids(triples)
        triples.setflags(write=False)
        self.triples = triples

        self.adjacency: Dict[Tuple[int, int], np.ndarray] = {}
        self._groups_by_subject: Dict[int, List[Tuple[int, np.ndarray]]] = defaultdict(list)
        self._build_index()

    def _check_ids(self, triples: np.ndarray) -> None:
        n_ent, n_rel = len(self.entity_labels), len(self.relations)
        if triples.min() < 0 or triples[:, [0, 2]].max() >= n_ent or triples[:, 1].max() >= n_rel:
            raise UnknownIdError("三元组中存在词表之外的编号")

    def _build_index(self) -> None:
        """按 (s, r) 建立有序、无重复的宾语列表"""
        if not len(self.triples):
            return
        keys = self.triples[:, 0] * len(self.relations) + self.triples[:, 1]
        boundaries = np.flatnonzero(np.diff(keys)) + 1
        starts = np.concatenate(([0], boundaries))
        ends = np.concatenate((boundaries, [len(self.triples)]))
        for start, end in zip(starts, ends):
            s, r = int(self.triples[start, 0]), int(self.triples[start, 1])
            objects = self.triples[start:end, 2]
            self.adjacency[(s, r)] = objects
            self._groups_by_subject[s].append((r, objects))

    # ---- 基本属性 ----

    @property
    def num_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_forward_relations(self) -> int:
        return sum(1 for rel in self.relations if not rel.inverse)

    @property
    def augmented(self) -> bool:
        return any(rel.inverse for rel in self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def __repr__(self):
        return (f"KnowledgeGraph(entities={self.num_entities}, relations={self.num_relations}, "
                f"triples={len(self)}, augmented={self.augmented})")

    # ---- 词表查询 ----

    def entity_id(self, label: str) -> int:
        try:
            return self.entity_ids[label]
        except KeyError:
            raise UnknownIdError(f"未知实体: {label}") from None

    def relation_id(self, label: str) -> int:
        try:
            return self.relation_ids[label]
        except KeyError:
            raise UnknownIdError(f"未知关系: {label}") from None

    def entity_label(self, entity: int) -> str:
        self._require_entity(entity)
        return self.entity_labels[entity]

    def relation_label(self, relation: int) -> str:
        self._require_relation(relation)
        return self.relations[relation].label

    def inverse_of(self, relation: int) -> int:
        """返回关系的配对关系编号（逆的逆即原关系）"""
        self._require_relation(relation)
        partner = self.relations[relation].partner
        if partner is None:
            raise GraphStateError("图尚未添加逆关系，无法查询配对关系")
        return partner

    def _require_entity(self, entity: int) -> None:
        if not 0 <= entity < self.num_entities:
            raise UnknownIdError(f"未知实体编号: {entity}")

    def _require_relation(self, relation: int) -> None:
        if not 0 <= relation < self.num_relations:
            raise UnknownIdError(f"未知关系编号: {relation}")

    # ---- 邻接访问 ----

    def candidate_set(self, entity: int, relation: int) -> List[int]:
        """C_{e,r}: 以 entity 为主语、relation 为谓词的宾语列表（升序）"""
        self._require_entity(entity)
        self._require_relation(relation)
        objects = self.adjacency.get((entity, relation))
        return [] if objects is None else objects.tolist()

    def relation_groups(self, entity: int) -> List[Tuple[int, np.ndarray]]:
        """按关系编号升序返回 entity 的全部出边分组"""
        return self._groups_by_subject.get(entity, [])

    def has_triple(self, s: int, r: int, o: int) -> bool:
        objects = self.adjacency.get((s, r))
        if objects is None:
            return False
        pos = np.searchsorted(objects, o)
        return pos < len(objects) and objects[pos] == o

    def triple_set(self) -> FrozenSet[Tuple[int, int, int]]:
        return frozenset(map(tuple, self.triples.tolist()))

    def max_group_size(self) -> int:
        return max((len(objs) for objs in self.adjacency.values()), default=0)


@dataclass(frozen=True)
class QuestionInstance:
    """一道问题：文本、主题实体、答案以及可选的候选答案集合"""
    text: str
    topic_entities: Tuple[int, ...]
    answers: FrozenSet[int] = field(default_factory=frozenset)
    candidates: Optional[FrozenSet[int]] = None
    qid: str = ''

    def __post_init__(self):
        if not self.topic_entities:
            raise PreconditionError("每道问题至少需要一个主题实体")
        if self.candidates is not None and not set(self.answers) <= set(self.candidates):
            raise PreconditionError("答案必须包含在候选答案集合中")


# ---- 构建与加载 ----

def build_graph(labelled_triples: Iterable[Tuple[str, str, str]]) -> KnowledgeGraph:
    """从 (主语, 关系, 宾语) 标签三元组构建仅含正向关系的图，词表按首次出现顺序编号"""
    entity_ids: Dict[str, int] = {}
    relation_ids: Dict[str, int] = {}
    rows = []
    for subject, relation, obj in labelled_triples:
        s = entity_ids.setdefault(subject, len(entity_ids))
        r = relation_ids.setdefault(relation, len(relation_ids))
        o = entity_ids.setdefault(obj, len(entity_ids))
        rows.append((s, r, o))
    relations = [Relation(id=i, label=label) for label, i in relation_ids.items()]
    return KnowledgeGraph(list(entity_ids), relations, np.array(rows, dtype=np.int64).reshape(-1, 3))


def _parse_triple_lines(lines: Iterable[str]):
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip('\r\n')
        if not line.strip() or line.startswith('#'):
            continue
        parts = line.split('\t')
        if len(parts) != 3 or not all(part.strip() for part in parts):
            raise GraphFormatError(f"无法解析为 主语\\t关系\\t宾语: {line!r}", line_no=line_no)
        subject, relation, obj = (part.strip() for part in parts)
        if relation.endswith(INVERSE_SUFFIX):
            raise GraphFormatError(f"关系标签不能使用保留后缀 {INVERSE_SUFFIX}: {relation}", line_no=line_no)
        yield subject, relation, obj


def load_triples(path: PathLike, format: str = 'tsv') -> KnowledgeGraph:
    """
    加载三元组文件，返回仅含正向三元组的图。
    :param path: UTF-8 TSV 文件，每行 主语\\t关系\\t宾语，# 开头为注释
    :param format: 目前只支持 'tsv'
    """
    if format not in TRIPLE_FORMATS:
        raise GraphFormatError(f"不支持的三元组格式: {format}")
    path = Path(path)
    if not path.is_file():
        raise GraphFormatError(f"三元组文件不存在: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        graph = build_graph(_parse_triple_lines(f))

    if not len(graph):
        raise GraphFormatError(f"三元组文件为空: {path}")
    logger.info(f"加载知识图谱 {path.name}: {graph.num_entities} 个实体, "
                f"{graph.num_relations} 个关系, {len(graph)} 个三元组")
    return graph


def augment_inverse(graph: KnowledgeGraph) -> KnowledgeGraph:
    """为每个关系 r 添加逆关系 r^-1（编号 r + |R|），并为每个 (s, r, o) 添加 (o, r^-1, s)"""
    if graph.augmented:
        raise GraphStateError("图已经包含逆关系，不能重复增强")

    n_forward = graph.num_relations
    relations = [Relation(id=rel.id, label=rel.label, inverse=False, partner=rel.id + n_forward)
                 for rel in graph.relations]
    relations += [Relation(id=rel.id + n_forward, label=rel.label + INVERSE_SUFFIX,
                           inverse=True, partner=rel.id)
                  for rel in graph.relations]

    forward = graph.triples
    inverse = np.stack([forward[:, 2], forward[:, 1] + n_forward, forward[:, 0]], axis=1)
    augmented = KnowledgeGraph(graph.entity_labels, relations, np.concatenate([forward, inverse]))
    logger.info(f"逆关系增强完成: {len(forward)} -> {len(augmented)} 个三元组")
    return augmented


def candidate_set(graph: KnowledgeGraph, entity: int, relation: int) -> List[int]:
    return graph.candidate_set(entity, relation)


def write_triples(labelled_triples: Iterable[Tuple[str, str, str]], path: PathLike) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for s, r, o in labelled_triples:
            f.write(f"{s}\t{r}\t{o}\n")


def forward_label_triples(graph: KnowledgeGraph) -> List[Tuple[str, str, str]]:
    """导出正向三元组的标签形式"""
    return [(graph.entity_labels[s], graph.relations[r].label, graph.entity_labels[o])
            for s, r, o in graph.triples.tolist() if not graph.relations[r].inverse]


# ---- 问题文件 ----

def _resolve_labels(graph: KnowledgeGraph, labels, line_no: int, what: str) -> List[int]:
    if isinstance(labels, str):
        labels = [labels]
    ids = []
    for label in labels or []:
        if label not in graph.entity_ids:
            raise GraphFormatError(f"{what}中的实体不在图中: {label}", line_no=line_no)
        ids.append(graph.entity_ids[label])
    return ids


def parse_question_record(graph: KnowledgeGraph, record: dict, line_no: int = 0,
                          allow_unknown_answers: bool = False) -> QuestionInstance:
    text = record.get('question')
    if not isinstance(text, str) or not text.strip():
        raise GraphFormatError("缺少 question 字段", line_no=line_no)
    topics = _resolve_labels(graph, record.get('topics'), line_no, '主题实体')
    if not topics:
        raise GraphFormatError("缺少主题实体", line_no=line_no)

    answers = record.get('answers') or []
    if allow_unknown_answers:
        answers = [a for a in ([answers] if isinstance(answers, str) else answers) if a in graph.entity_ids]
    answer_ids = _resolve_labels(graph, answers, line_no, '答案')

    candidates = None
    if record.get('candidates') is not None:
        candidates = frozenset(_resolve_labels(graph, record['candidates'], line_no, '候选答案'))

    try:
        return QuestionInstance(
            text=text.strip(),
            topic_entities=tuple(sorted(set(topics))),
            answers=frozenset(answer_ids),
            candidates=candidates,
            qid=str(record.get('id', line_no)),
        )
    except PreconditionError as e:
        raise GraphFormatError(str(e), line_no=line_no) from e


def load_questions(path: PathLike, graph: KnowledgeGraph,
                   allow_unknown_answers: bool = False) -> List[QuestionInstance]:
    """
    加载 JSON Lines 问题文件，每行:
    {"question": "...", "topics": [...], "answers": [...], "candidates": [...], "id": "..."}
    """
    path = Path(path)
    if not path.is_file():
        raise GraphFormatError(f"问题文件不存在: {path}")

    questions = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith('#'):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise GraphFormatError(f"无效的JSON: {e.msg}", line_no=line_no) from e
            if not isinstance(record, dict):
                raise GraphFormatError("每行必须是一个JSON对象", line_no=line_no)
            questions.append(parse_question_record(graph, record, line_no, allow_unknown_answers))

    logger.info(f"加载问题 {path.name}: {len(questions)} 道")
    return questions


def question_to_record(graph: KnowledgeGraph, question: QuestionInstance) -> dict:
    record = {
        'id': question.qid,
        'question': question.text,
        'topics': [graph.entity_labels[e] for e in question.topic_entities],
        'answers': [graph.entity_labels[e] for e in sorted(question.answers)],
    }
    if question.candidates is not None:
        record['candidates'] = [graph.entity_labels[e] for e in sorted(question.candidates)]
    return record


def write_questions(graph: KnowledgeGraph, questions: Iterable[QuestionInstance], path: PathLike) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for question in questions:
            f.write(json.dumps(question_to_record(graph, question), ensure_ascii=False) + '\n')
