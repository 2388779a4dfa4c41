"""
LLM 与检索器协同的两阶段推理：
阶段一编码问题、传播并检索候选、事实和路径；
阶段二循环 作答 -> 反思，反思可以确认答案、改写子问题或聚焦实体，最多 max_steps 轮。
"""
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kgfr.embeddings.services import (
    EmbeddingProvider, Provenance, RelationDescriptionTable, fallback_descriptions,
    relation_embeddings, relation_examples
)
from kgfr.exceptions import (
    GraphFormatError, LlmError, LlmProtocolError, LlmTransportError, PipelineError, UnknownIdError
)
from kgfr.graph_store.services import KnowledgeGraph, QuestionInstance
from kgfr.propagation.params import ModelParams
from kgfr.propagation.services import PropagationResult, propagate, score_entities
from kgfr.reasoning.llm import LlmClient
from kgfr.reasoning.models import ReasoningSession, ReasoningTurn
from kgfr.retrieval.services import (
    Edge, RetrievalBundle, build_bundle, edge_retrieve, path_retrieve
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

STATUS_RUNNING = 'running'
STATUS_CONFIRMED = 'confirmed'
STATUS_EXHAUSTED = 'exhausted'

SYSTEM_PROMPT = ("You answer questions using facts retrieved from a knowledge graph. "
                 "Always finish your reply with the fenced block requested in the instructions.")


# ---- 模板 ----

@dataclass(frozen=True)
class VerbalizationTemplate:
    relation: int
    pattern: str
    provenance: Provenance


def _valid_pattern(pattern: str) -> bool:
    return pattern.count('{s}') == 1 and pattern.count('{o}') == 1


def fallback_pattern(graph: KnowledgeGraph, relation: int) -> str:
    return '{s} [' + graph.relations[relation].label + '] {o}.'


class TemplateTable:
    """关系编号 -> 转述模板"""

    def __init__(self, templates: Dict[int, VerbalizationTemplate]):
        self.templates = templates

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, relation: int) -> VerbalizationTemplate:
        try:
            return self.templates[relation]
        except KeyError:
            raise UnknownIdError(f"关系 {relation} 没有转述模板") from None

    @classmethod
    def fallback(cls, graph: KnowledgeGraph) -> 'TemplateTable':
        return cls({r.id: VerbalizationTemplate(r.id, fallback_pattern(graph, r.id), Provenance.FALLBACK_NAME)
                    for r in graph.relations})

    def save_tsv(self, graph: KnowledgeGraph, path: PathLike) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for r in range(graph.num_relations):
                template = self[r]
                f.write(f"{graph.relations[r].label}\t{template.provenance.value}\t{template.pattern}\n")

    @classmethod
    def load_tsv(cls, graph: KnowledgeGraph, path: PathLike) -> 'TemplateTable':
        if not Path(path).is_file():
            raise GraphFormatError(f"模板文件不存在: {path}")
        templates = {}
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.rstrip('\r\n')
                if not line.strip():
                    continue
                parts = line.split('\t')
                if len(parts) != 3 or not _valid_pattern(parts[2]):
                    raise GraphFormatError("模板文件每行应为 关系\\t来源\\t含 {s} 与 {o} 的模板", line_no=line_no)
                relation = graph.relation_id(parts[0])
                templates[relation] = VerbalizationTemplate(relation, parts[2], Provenance.FILE_LOADED)
        missing = [r for r in range(graph.num_relations) if r not in templates]
        if missing:
            raise GraphFormatError(f"模板文件缺少 {len(missing)} 个关系的模板")
        return cls(templates)


TEMPLATE_PROMPT = """Task: Write a sentence template that states one fact of the given relation in natural language.
Relation: {relation}
Description: {description}
Examples: {examples}
Use the placeholder {{s}} for the subject and {{o}} for the object, each exactly once.
Output Example: {{s}} is the capital of {{o}}.
Reply with the template only."""


def build_templates(graph: KnowledgeGraph, llm: LlmClient,
                    descriptions: Optional[RelationDescriptionTable] = None,
                    samples_per_relation: int = 2) -> TemplateTable:
    """为每个关系生成转述模板；失败或格式不合法时退回 "{s} [关系名] {o}." """
    descriptions = descriptions or fallback_descriptions(graph)
    templates = {}
    failures = 0
    for relation in graph.relations:
        examples = relation_examples(graph, relation.id, samples_per_relation)
        prompt = TEMPLATE_PROMPT.format(
            relation=relation.label,
            description=descriptions.entries.get(relation.id, relation.label),
            examples='; '.join(f"({s}, {r}, {o})" for s, r, o in examples) or '(none)',
        )
        try:
            reply = llm.complete(prompt)
            pattern = next((line.strip() for line in reply.splitlines() if line.strip()), '')
            if not _valid_pattern(pattern):
                raise LlmProtocolError(f"模板缺少占位符: {pattern!r}")
            templates[relation.id] = VerbalizationTemplate(relation.id, pattern, Provenance.LLM_GENERATED)
        except LlmError as e:
            failures += 1
            logger.warning(f"关系 {relation.label} 模板生成失败，使用默认格式: {e}")
            templates[relation.id] = VerbalizationTemplate(
                relation.id, fallback_pattern(graph, relation.id), Provenance.FALLBACK_NAME)
    logger.info(f"转述模板生成完成: {len(templates)} 条, 失败 {failures} 条")
    return TemplateTable(templates)


def verbalize(fact: Edge, templates: TemplateTable, graph: KnowledgeGraph) -> str:
    s, r, o = fact
    pattern = templates[r].pattern
    labels = {'{s}': graph.entity_labels[s], '{o}': graph.entity_labels[o]}
    return re.sub(r'\{[so]\}', lambda m: labels[m.group(0)], pattern)


def render_fact(fact: Edge, templates: TemplateTable, graph: KnowledgeGraph, verbalized: bool = True) -> str:
    if verbalized:
        return verbalize(fact, templates, graph)
    s, r, o = fact
    return f"({graph.entity_labels[s]}, {graph.relations[r].label}, {graph.entity_labels[o]})"


# ---- 回复协议 ----

_PROTOCOL_KEYS = ('ANSWERS', 'STATUS', 'SUBQUESTIONS', 'FOCUS', 'TOPICS')
_KEY_LINE = re.compile(r'^\s*(' + '|'.join(_PROTOCOL_KEYS) + r')\s*:\s*(.*?)\s*$', re.IGNORECASE)


def parse_reply_block(reply: str) -> Optional[Dict[str, str]]:
    """
    解析回复中的结构化块。优先使用最后一个 ``` 围栏块，
    没有围栏时扫描全文；找不到任何约定字段时返回 None。
    """
    fenced = re.findall(r'```[^\n]*\n(.*?)```', reply, flags=re.DOTALL)
    bodies = ([fenced[-1]] if fenced else []) + [reply]
    for body in bodies:
        fields: Dict[str, str] = {}
        for line in body.splitlines():
            match = _KEY_LINE.match(line)
            if match:
                fields.setdefault(match.group(1).upper(), match.group(2))
        if fields:
            return fields
    return None


def split_items(value: str) -> List[str]:
    items = [item.strip() for item in (value or '').split('|')]
    return [item for item in items if item and item.lower() not in ('none', 'n/a', '-')]


# ---- 会话 ----

@dataclass(frozen=True)
class PredictedAnswer:
    text: str
    entity: Optional[int] = None

    @property
    def in_kg(self) -> bool:
        return self.entity is not None

    @property
    def key(self):
        return self.entity if self.entity is not None else self.text.lower()


@dataclass
class Turn:
    step: int
    kind: str
    prompt: str
    reply: Optional[str]


@dataclass
class AnswerRound:
    step: int
    answers: List[PredictedAnswer]
    rationale: str = ''
    protocol_error: bool = False
    confirmed: bool = False


@dataclass
class Decision:
    kind: str
    sub_questions: List[str] = field(default_factory=list)
    focus_entities: List[int] = field(default_factory=list)
    topics: List[int] = field(default_factory=list)


@dataclass
class Session:
    question: QuestionInstance
    max_steps: int = 3
    step: int = 0
    sub_questions: List[str] = field(default_factory=list)
    focus_entities: List[int] = field(default_factory=list)
    evidence: List[RetrievalBundle] = field(default_factory=list)
    results: List[PropagationResult] = field(default_factory=list)
    transcript: List[Turn] = field(default_factory=list)
    rounds: List[AnswerRound] = field(default_factory=list)
    status: str = STATUS_RUNNING
    llm_calls: int = 0
    tokens: int = 0
    retrieval_seconds: float = 0.0
    total_seconds: float = 0.0

    def final_answers(self) -> List[PredictedAnswer]:
        """确认时取各确认轮答案的有序并集，否则取最近一次非空回答"""
        if self.status == STATUS_CONFIRMED:
            merged, seen = [], set()
            for answer_round in self.rounds:
                if not answer_round.confirmed:
                    continue
                for answer in answer_round.answers:
                    if answer.key not in seen:
                        seen.add(answer.key)
                        merged.append(answer)
            return merged
        for answer_round in reversed(self.rounds):
            if answer_round.answers:
                return list(answer_round.answers)
        return []

    def transcript_records(self) -> List[dict]:
        return [{'step': t.step, 'kind': t.kind, 'prompt': t.prompt, 'reply': t.reply} for t in self.transcript]

    def export_transcript(self, path: PathLike) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for record in self.transcript_records():
                f.write(json.dumps(record, ensure_ascii=False) + '\n')


@dataclass
class PipelineConfig:
    k: int = 20
    n: int = 20
    path_cap: int = 10
    max_steps: int = 3
    lam: float = 100
    progressive: bool = True
    asymmetric: bool = True
    edge_cap: Optional[int] = None
    verbalize: bool = True
    use_retrieval: bool = True
    use_nodes: bool = True
    use_facts: bool = True
    use_paths: bool = True
    use_reflection: bool = True


@dataclass
class ReasoningContext:
    """一次推理需要的只读资源"""
    graph: KnowledgeGraph
    params: ModelParams
    provider: EmbeddingProvider
    rel_init: np.ndarray
    templates: TemplateTable
    config: PipelineConfig

    @classmethod
    def build(cls, graph: KnowledgeGraph, params: ModelParams, provider: EmbeddingProvider,
              config: PipelineConfig, descriptions: Optional[RelationDescriptionTable] = None,
              templates: Optional[TemplateTable] = None) -> 'ReasoningContext':
        descriptions = descriptions or fallback_descriptions(graph)
        return cls(graph, params, provider, relation_embeddings(graph, descriptions, provider),
                   templates or TemplateTable.fallback(graph), config)


def _ask(session: Session, llm: LlmClient, kind: str, prompt: str) -> str:
    session.llm_calls += 1
    try:
        reply = llm.chat(prompt, system=SYSTEM_PROMPT)
    except LlmTransportError:
        session.transcript.append(Turn(session.step, kind, prompt, None))
        raise
    session.tokens += reply.tokens
    session.transcript.append(Turn(session.step, kind, prompt, reply.text))
    return reply.text


# ---- 检索 ----

def retrieve(session: Session, ctx: ReasoningContext, text: str, topics: Sequence[int],
             label: str) -> RetrievalBundle:
    started = time.perf_counter()
    cfg = ctx.config
    q_emb = ctx.provider.encode(text).vector
    result = propagate(ctx.graph, q_emb, topics, ctx.params, ctx.rel_init, lam=cfg.lam,
                       progressive=cfg.progressive, asymmetric=cfg.asymmetric, edge_cap=cfg.edge_cap)
    bundle = build_bundle(ctx.graph, result, score_entities(result.state, ctx.params), cfg.k, cfg.n,
                          cfg.path_cap, candidates_filter=session.question.candidates, label=label)
    session.results.append(result)
    session.evidence.append(bundle)
    session.retrieval_seconds += time.perf_counter() - started
    return bundle


def focus_retrieve(session: Session, ctx: ReasoningContext, entity: int) -> RetrievalBundle:
    """在已有子图中检索该实体的入边与到主题的路径；实体不在任何子图中时以它为锚点重新传播"""
    label = f"focus: {ctx.graph.entity_labels[entity]}"
    for result in reversed(session.results):
        if not result.subgraph.contains_entity(entity):
            continue
        started = time.perf_counter()
        facts = edge_retrieve(result.attention, entity, ctx.config.n)
        paths = path_retrieve(result.subgraph, [entity], result.subgraph.topics, ctx.config.path_cap)
        score = score_entities(result.state, ctx.params).get(entity)
        bundle = RetrievalBundle(topics=tuple(result.subgraph.topics), candidates=[(entity, score)],
                                 facts={entity: facts} if facts else {}, paths=paths, label=label)
        session.evidence.append(bundle)
        session.retrieval_seconds += time.perf_counter() - started
        return bundle
    return retrieve(session, ctx, session.question.text, [entity], label)


# ---- 提示词 ----

# (实体, 分数, 是否到达)；是否到达为 None 表示未做节点级检索
NumberedCandidate = Tuple[int, Optional[float], Optional[bool]]


def _numbered_candidates(session: Session, ctx: ReasoningContext) -> List[NumberedCandidate]:
    """提示词中编号的候选列表；关闭节点级检索时只列出题目给定的选项"""
    if not ctx.config.use_nodes:
        options = session.question.candidates
        return [(e, None, None) for e in sorted(options)] if options is not None else []
    listed: List[NumberedCandidate] = []
    seen = set()
    for bundle in session.evidence:
        for e, score in bundle.candidates:
            if e not in seen:
                seen.add(e)
                listed.append((e, score, True))
    if session.question.candidates is not None:
        listed = [item for item in listed if item[0] in session.question.candidates]
        for e in sorted(session.question.candidates):
            if e not in seen:
                seen.add(e)
                listed.append((e, None, False))
    return listed


def _render_path(path, ctx: ReasoningContext) -> str:
    if not path.edges:
        return f"{ctx.graph.entity_labels[path.source]} is itself a topic entity."
    return ' '.join(render_fact(edge, ctx.templates, ctx.graph, ctx.config.verbalize) for edge in path.edges)


def build_answer_prompt(session: Session, ctx: ReasoningContext,
                        candidates: List[NumberedCandidate]) -> str:
    graph = ctx.graph
    cfg = ctx.config
    lines = [f"Question: {session.question.text}"]
    if session.sub_questions:
        lines.append("Sub-questions: " + ' | '.join(session.sub_questions))
    lines.append("Topic entities: " + ', '.join(graph.entity_labels[t] for t in session.question.topic_entities))

    if candidates:
        heading = "Options" if session.question.candidates is not None else "Candidate entities"
        lines.append(f"{heading}:")
        for i, (e, score, reached) in enumerate(candidates, start=1):
            if reached is None:
                lines.append(f"#{i} {graph.entity_labels[e]}")
                continue
            detail = f"score {score:.4f}" if reached else "not reached in the knowledge graph"
            lines.append(f"#{i} {graph.entity_labels[e]} ({detail})")

    facts, seen = [], set()
    for bundle in (session.evidence if cfg.use_facts else ()):
        for fact in bundle.fact_union:
            if fact.edge not in seen:
                seen.add(fact.edge)
                facts.append(render_fact(fact.edge, ctx.templates, graph, cfg.verbalize))
    if facts:
        lines.append("Facts:")
        lines.extend(f"- {sentence}" for sentence in facts)

    paths = [_render_path(p, ctx) for bundle in session.evidence for p in bundle.paths] if cfg.use_paths else []
    if paths:
        lines.append("Paths from candidates to topic entities:")
        lines.extend(f"- {text}" for text in dict.fromkeys(paths))

    if session.question.candidates is not None:
        lines.append("Choose the most likely option.")
    lines.append("Answer the question. Refer to a listed entity as #N or write its name. "
                 "End with:\n```\nANSWERS: <answer> | <answer>\n```")
    return '\n'.join(lines)


REASK_PROMPT = ("Your previous reply could not be parsed. Reply again with only the block:\n"
                "```\nANSWERS: <answer> | <answer>\n```\n\n")


def build_reflect_prompt(session: Session, ctx: ReasoningContext, answers: List[PredictedAnswer]) -> str:
    lines = [
        f"Question: {session.question.text}",
        "Current answers: " + (' | '.join(a.text for a in answers) or '(none)'),
        f"Step {session.step} of {session.max_steps}.",
        "Check whether the retrieved evidence is sufficient and consistent with the answers. Decide one of:",
        "- confirmed: the answers are supported.",
        "- rewrite: list 1 to 3 sub-questions that would retrieve the missing knowledge "
        "(optionally TOPICS naming exact entity names to anchor them).",
        "- focus: name entities whose surrounding facts should be inspected.",
        "- give-best: stop with the current answers.",
        "End with:\n```\nSTATUS: confirmed | rewrite | focus | give-best\n"
        "SUBQUESTIONS: <q> | <q>\nFOCUS: <entity> | <entity>\nTOPICS: <entity>\n```",
    ]
    return '\n'.join(lines)


# ---- 作答与反思 ----

def _resolve_answer(item: str, candidates, graph: KnowledgeGraph) -> PredictedAnswer:
    match = re.fullmatch(r'#\s*(\d+)', item)
    if match:
        index = int(match.group(1)) - 1
        if 0 <= index < len(candidates):
            e = candidates[index][0]
            return PredictedAnswer(graph.entity_labels[e], e)
    if item in graph.entity_ids:
        return PredictedAnswer(item, graph.entity_ids[item])
    return PredictedAnswer(item)


def answer_round(session: Session, bundle: Optional[RetrievalBundle], llm: LlmClient,
                 ctx: ReasoningContext) -> Tuple[List[PredictedAnswer], str]:
    """
    生成候选答案。回复无法解析时重问一次，仍失败则记为协议错误并以空答案继续。
    :param bundle: 本步新增的证据，已包含在 session.evidence 中
    """
    candidates = _numbered_candidates(session, ctx)
    prompt = build_answer_prompt(session, ctx, candidates)
    reply = _ask(session, llm, 'answer', prompt)
    fields = parse_reply_block(reply)
    if fields is None or 'ANSWERS' not in fields:
        logger.warning(f"问题 {session.question.qid} 第 {session.step} 步回复无法解析，重新询问")
        reply = _ask(session, llm, 'answer-retry', REASK_PROMPT + prompt)
        fields = parse_reply_block(reply)

    if fields is None or 'ANSWERS' not in fields:
        error = LlmProtocolError(f"第 {session.step} 步两次回复均无法解析")
        logger.warning(f"问题 {session.question.qid}: {error}")
        session.rounds.append(AnswerRound(session.step, [], reply, protocol_error=True))
        return [], reply

    answers, seen = [], set()
    for item in split_items(fields['ANSWERS']):
        answer = _resolve_answer(item, candidates, ctx.graph)
        if answer.key not in seen:
            seen.add(answer.key)
            answers.append(answer)
    rationale = re.sub(r'```[^\n]*\n.*?```', '', reply, flags=re.DOTALL).strip()
    session.rounds.append(AnswerRound(session.step, answers, rationale))
    return answers, rationale


def _resolve_labels(labels: List[str], graph: KnowledgeGraph, what: str) -> List[int]:
    ids = []
    for label in labels:
        if label in graph.entity_ids:
            if graph.entity_ids[label] not in ids:
                ids.append(graph.entity_ids[label])
        else:
            logger.warning(f"{what}中的实体无法在图中找到，已忽略: {label}")
    return ids


def reflect(session: Session, llm: LlmClient, ctx: ReasoningContext) -> Decision:
    """反思当前答案；无法解析的决定按 give-best 处理"""
    answers = session.rounds[-1].answers if session.rounds else []
    reply = _ask(session, llm, 'reflect', build_reflect_prompt(session, ctx, answers))
    fields = parse_reply_block(reply) or {}
    status = fields.get('STATUS', '').strip().lower()

    if status == 'confirmed':
        return Decision('confirmed')
    if status == 'rewrite':
        sub_questions = split_items(fields.get('SUBQUESTIONS', ''))[:3]
        if sub_questions:
            topics = _resolve_labels(split_items(fields.get('TOPICS', '')), ctx.graph, '改写主题')
            return Decision('rewrite', sub_questions=sub_questions, topics=topics)
    elif status == 'focus':
        entities = _resolve_labels(split_items(fields.get('FOCUS', '')), ctx.graph, '聚焦')
        if entities:
            return Decision('focus', focus_entities=entities)
    logger.info(f"问题 {session.question.qid} 第 {session.step} 步反思结果按 give-best 处理: {status or '无法解析'}")
    return Decision('give-best')


# ---- 流水线 ----

def run_session(question: QuestionInstance, ctx: ReasoningContext, llm: LlmClient) -> Session:
    cfg = ctx.config
    session = Session(question=question, max_steps=cfg.max_steps)
    started = time.perf_counter()
    try:
        bundle = retrieve(session, ctx, question.text, question.topic_entities, 'initial') \
            if cfg.use_retrieval else None

        while session.step < cfg.max_steps:
            session.step += 1
            answers, _ = answer_round(session, bundle, llm, ctx)
            if not cfg.use_reflection:
                break
            decision = reflect(session, llm, ctx)
            bundle = None

            if decision.kind == 'confirmed':
                if answers:
                    session.rounds[-1].confirmed = True
                    session.status = STATUS_CONFIRMED
                    break
                logger.warning(f"问题 {question.qid} 第 {session.step} 步确认了空答案，继续推理")
                continue
            if decision.kind == 'give-best':
                break
            if session.step >= cfg.max_steps or not cfg.use_retrieval:
                continue

            if decision.kind == 'rewrite':
                topics = decision.topics or list(question.topic_entities)
                for sub_question in decision.sub_questions:
                    session.sub_questions.append(sub_question)
                    bundle = retrieve(session, ctx, sub_question, topics, f"sub-question: {sub_question}")
            elif decision.kind == 'focus':
                for entity in decision.focus_entities:
                    if entity not in session.focus_entities:
                        session.focus_entities.append(entity)
                    bundle = focus_retrieve(session, ctx, entity)
    except LlmTransportError as e:
        session.total_seconds = time.perf_counter() - started
        raise PipelineError(f"问题 {question.qid} 在第 {session.step} 步调用LLM失败: {e}", session=session) from e

    if session.status == STATUS_RUNNING:
        session.status = STATUS_EXHAUSTED
    session.total_seconds = time.perf_counter() - started
    logger.info(f"问题 {question.qid} 推理结束: {session.status}, {session.step} 步, {session.llm_calls} 次LLM调用")
    return session


def run_pipeline(question: QuestionInstance, graph: KnowledgeGraph, params: ModelParams,
                 provider: EmbeddingProvider, llm: LlmClient, config: PipelineConfig,
                 descriptions: Optional[RelationDescriptionTable] = None,
                 templates: Optional[TemplateTable] = None) -> Tuple[List[PredictedAnswer], Session]:
    ctx = ReasoningContext.build(graph, params, provider, config, descriptions, templates)
    session = run_session(question, ctx, llm)
    return session.final_answers(), session


def save_session(session: Session, graph: KnowledgeGraph):
    """持久化已结束的会话及其全部对话轮次"""
    question = session.question
    record = ReasoningSession.objects.create(
        qid=question.qid,
        question=question.text,
        topics=[graph.entity_labels[t] for t in question.topic_entities],
        gold_answers=[graph.entity_labels[a] for a in sorted(question.answers)],
        predicted_answers=[a.text for a in session.final_answers()],
        status=session.status,
        steps=session.step,
        llm_calls=session.llm_calls,
        tokens=session.tokens,
        retrieval_seconds=session.retrieval_seconds,
        total_seconds=session.total_seconds,
    )
    ReasoningTurn.objects.bulk_create([
        ReasoningTurn(session=record, ordinal=i, step=turn.step, kind=turn.kind,
                      prompt=turn.prompt, reply=turn.reply or '')
        for i, turn in enumerate(session.transcript)
    ])
    return record
