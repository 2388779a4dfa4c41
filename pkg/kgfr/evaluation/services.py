"""
评估与基准：运行时引擎设置、流水线评估、仅检索器评估与剪枝基准。
"""
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from configs.config_loader import get_engine_preset
from kgfr.embeddings.services import (
    EmbeddingProvider, RelationDescriptionTable, create_provider, fallback_descriptions, relation_embeddings
)
from kgfr.evaluation.metrics import metric_f1, metric_h1, metric_hit
from kgfr.exceptions import CapacityError, ConfigurationError, PipelineError, PreconditionError
from kgfr.graph_store.services import KnowledgeGraph, QuestionInstance, augment_inverse, load_triples
from kgfr.propagation.params import ModelParams, load_checkpoint
from kgfr.propagation.services import expand_subgraph
from kgfr.reasoning.llm import LlmClient
from kgfr.reasoning.services import PipelineConfig, ReasoningContext, TemplateTable, run_session
from kgfr.retrieval.services import rank_entities

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BENCH_COLUMNS = ['pe', 'ap', 'lambda', 'layers', 'questions', 'mean_entities', 'mean_facts', 'seconds', 'status']

ABLATION_SWITCHES = {'verbalize', 'use_retrieval', 'use_nodes', 'use_facts', 'use_paths', 'use_reflection'}


@dataclass
class EngineSettings:
    """预设值叠加命令行参数后的运行时超参数"""
    layers: int = 2
    dim: int = 64
    dim_attn: int = 8
    lam: float = 100
    k: int = 20
    n: int = 20
    path_cap: int = 10
    max_steps: int = 3
    edge_cap: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ('layers', 'dim', 'dim_attn', 'k', 'n', 'path_cap', 'max_steps'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} 必须至少为 1: {getattr(self, name)}")
        if self.lam < 0:
            raise ConfigurationError(f"剪枝阈值 λ 不能为负数: {self.lam}")

    @classmethod
    def from_preset(cls, preset: str = 'desk', **overrides) -> 'EngineSettings':
        try:
            values = get_engine_preset(preset)
        except KeyError as e:
            raise ConfigurationError(str(e)) from None
        if 'lambda' in values:
            values['lam'] = values.pop('lambda')
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in values.items() if k in names}
        values.update({k: v for k, v in overrides.items() if v is not None and k in names})
        return cls(**values)

    def adopt_checkpoint(self, params: ModelParams, explicit: Iterable[str] = ()) -> 'EngineSettings':
        """模型尺寸以检查点为准；显式给出且与检查点不符的尺寸参数视为错误"""
        found = {'layers': params.layers, 'dim': params.dim, 'dim_attn': params.dim_attn}
        for name in explicit:
            if name in found and getattr(self, name) != found[name]:
                raise ConfigurationError(f"参数 {name}={getattr(self, name)} 与检查点中的 {found[name]} 不符")
        return replace(self, **found)

    def pipeline_config(self, **switches: bool) -> PipelineConfig:
        """
        :param switches: 消融开关，如 verbalize、use_retrieval、use_nodes、use_facts、use_paths、use_reflection
        """
        unknown = set(switches) - ABLATION_SWITCHES
        if unknown:
            raise ConfigurationError(f"未知的消融开关: {', '.join(sorted(unknown))}")
        return PipelineConfig(k=self.k, n=self.n, path_cap=self.path_cap, max_steps=self.max_steps,
                              lam=self.lam, edge_cap=self.edge_cap, **switches)


def load_graph(path: PathLike) -> KnowledgeGraph:
    """加载三元组文件并添加逆关系"""
    return augment_inverse(load_triples(path))


def load_model(path: PathLike) -> ModelParams:
    params = load_checkpoint(path)
    params.validate()
    return params


@dataclass
class EngineResources:
    graph: KnowledgeGraph
    params: ModelParams
    provider: EmbeddingProvider
    settings: EngineSettings
    descriptions: Optional[RelationDescriptionTable] = None
    templates: Optional[TemplateTable] = None


def load_resources(graph_path: PathLike, checkpoint: PathLike, embeddings: str, settings: EngineSettings,
                   descriptions: Optional[PathLike] = None, templates: Optional[PathLike] = None,
                   explicit_dims: Iterable[str] = ()) -> EngineResources:
    """加载推理所需的图、检查点、嵌入后端以及可选的描述与模板"""
    params = load_model(checkpoint)
    settings = settings.adopt_checkpoint(params, explicit_dims)
    graph = load_graph(graph_path)
    provider = create_provider(embeddings, params.dim, seed=settings.seed)
    return EngineResources(
        graph=graph,
        params=params,
        provider=provider,
        settings=settings,
        descriptions=RelationDescriptionTable.load_tsv(graph, descriptions) if descriptions else None,
        templates=TemplateTable.load_tsv(graph, templates) if templates else None,
    )


# ---- 流水线评估 ----

@dataclass
class QuestionReport:
    qid: str
    predicted: List[str]
    gold: List[str]
    f1: float
    hit: bool
    h1: bool
    status: str
    steps: int
    llm_calls: int = 0
    tokens: int = 0
    seconds: float = 0.0


@dataclass
class EvalReport:
    """逐题结果与宏平均汇总"""
    rows: List[QuestionReport] = field(default_factory=list)

    def _mean(self, values) -> float:
        values = list(values)
        return float(np.mean(values)) if values else 0.0

    @property
    def count(self) -> int:
        return len(self.rows)

    @property
    def failed(self) -> int:
        return sum(row.status == 'failed' for row in self.rows)

    @property
    def mean_f1(self) -> float:
        return self._mean(row.f1 for row in self.rows)

    @property
    def hit_rate(self) -> float:
        return self._mean(float(row.hit) for row in self.rows)

    @property
    def h1_rate(self) -> float:
        return self._mean(float(row.h1) for row in self.rows)

    @property
    def mean_llm_calls(self) -> float:
        return self._mean(row.llm_calls for row in self.rows)

    def summary(self) -> dict:
        return {
            'questions': self.count,
            'failed': self.failed,
            'f1': self.mean_f1,
            'hit': self.hit_rate,
            'h1': self.h1_rate,
            'mean_llm_calls': self.mean_llm_calls,
        }

    def write_jsonl(self, path: PathLike) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for row in self.rows:
                record = {'id': row.qid, 'predicted': row.predicted, 'gold': row.gold, 'f1': row.f1,
                          'hit': row.hit, 'h1': row.h1, 'status': row.status, 'steps': row.steps}
                f.write(json.dumps(record, ensure_ascii=False) + '\n')

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows])


def score_question(qid: str, predicted_keys: Sequence, predicted_labels: List[str],
                   question: QuestionInstance, graph: KnowledgeGraph, status: str, steps: int,
                   **extra) -> QuestionReport:
    gold = sorted(question.answers)
    return QuestionReport(
        qid=qid,
        predicted=predicted_labels,
        gold=[graph.entity_labels[a] for a in gold],
        f1=metric_f1(predicted_keys, gold),
        hit=metric_hit(predicted_keys, gold),
        h1=metric_h1(list(predicted_keys), gold),
        status=status,
        steps=steps,
        **extra,
    )


def evaluate_pipeline(questions: Sequence[QuestionInstance], graph: KnowledgeGraph, params: ModelParams,
                      provider: EmbeddingProvider, llm: LlmClient, config: PipelineConfig,
                      descriptions: Optional[RelationDescriptionTable] = None,
                      templates: Optional[TemplateTable] = None, workers: int = 1) -> EvalReport:
    """
    对每道问题运行完整流水线。LLM 传输失败的问题记为 failed（以已得到的答案计分）并继续。
    结果按输入顺序排列，与完成顺序无关。
    """
    if workers < 1:
        raise ConfigurationError(f"workers 必须至少为 1: {workers}")
    ctx = ReasoningContext.build(graph, params, provider, config, descriptions, templates)

    def run(question: QuestionInstance) -> QuestionReport:
        try:
            session = run_session(question, ctx, llm)
            status = session.status
        except PipelineError as e:
            logger.error(f"问题 {question.qid} 推理失败: {e}")
            session, status = e.session, 'failed'
        answers = session.final_answers()
        return score_question(question.qid, [a.key for a in answers], [a.text for a in answers],
                              question, graph, status, session.step, llm_calls=session.llm_calls,
                              tokens=session.tokens, seconds=round(session.total_seconds, 4))

    if workers == 1:
        rows = [run(q) for q in questions]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, questions))
    report = EvalReport(rows)
    logger.info(f"流水线评估完成: {report.summary()}")
    return report


# ---- 仅检索器评估 ----

@dataclass
class RetrieverRow:
    qid: str
    ranked: List[str]
    gold: List[str]
    h1: bool
    hit: bool


@dataclass
class RetrieverReport:
    k: int
    rows: List[RetrieverRow] = field(default_factory=list)

    @property
    def h1_rate(self) -> float:
        return float(np.mean([row.h1 for row in self.rows])) if self.rows else 0.0

    @property
    def hit_rate(self) -> float:
        return float(np.mean([row.hit for row in self.rows])) if self.rows else 0.0

    def summary(self) -> dict:
        return {'questions': len(self.rows), 'h1': self.h1_rate, f'hit@{self.k}': self.hit_rate}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows])


def evaluate_retriever(questions: Sequence[QuestionInstance], graph: KnowledgeGraph, params: ModelParams,
                       provider: EmbeddingProvider, settings: EngineSettings,
                       descriptions: Optional[RelationDescriptionTable] = None) -> RetrieverReport:
    """不使用 LLM：按得分排列 S_L，统计 H@1 与 Hit@k"""
    rel_init = relation_embeddings(graph, descriptions or fallback_descriptions(graph), provider)
    report = RetrieverReport(k=settings.k)
    for question in questions:
        ranked = rank_entities(graph, provider.encode(question.text).vector, question.topic_entities, params,
                               rel_init, settings.k, question.candidates, lam=settings.lam,
                               edge_cap=settings.edge_cap)
        report.rows.append(RetrieverRow(
            qid=question.qid,
            ranked=[graph.entity_labels[e] for e in ranked],
            gold=[graph.entity_labels[a] for a in sorted(question.answers)],
            h1=metric_h1(ranked, question.answers),
            hit=metric_hit(ranked, question.answers),
        ))
    logger.info(f"检索器评估完成: {report.summary()}")
    return report


# ---- 渐进传播与非对称剪枝基准 ----

def _format_lambda(lam: float) -> str:
    return 'inf' if math.isinf(lam) else f"{lam:g}"


def bench_app(graph: KnowledgeGraph, questions: Sequence[QuestionInstance], lambdas: Sequence[float],
              pe_values: Sequence[bool] = (True, False), ap_values: Sequence[bool] = (True, False),
              layers: int = 2, edge_cap: Optional[int] = None,
              out: Optional[PathLike] = None) -> pd.DataFrame:
    """
    每种 (PE, AP, λ) 组合下统计平均到达实体数、平均到达事实数与耗时。
    任一问题的子图超过 edge_cap 时该组合记为 exceeded。
    """
    if not questions:
        raise PreconditionError("基准测试至少需要一道问题")
    if not lambdas:
        raise PreconditionError("基准测试至少需要一个 λ 值")

    rows = []
    for pe in pe_values:
        for ap in ap_values:
            for lam in lambdas:
                started = time.perf_counter()
                entities, facts, status = [], [], 'ok'
                try:
                    for question in questions:
                        sub = expand_subgraph(graph, question.topic_entities, layers, lam,
                                              progressive=pe, asymmetric=ap, edge_cap=edge_cap)
                        entities.append(sub.num_entities)
                        facts.append(sub.num_edges)
                except CapacityError as e:
                    logger.warning(f"PE={pe}, AP={ap}, λ={_format_lambda(lam)} 超出边数上限: {e}")
                    status = 'exceeded'
                exceeded = status == 'exceeded'
                rows.append({
                    'pe': 'on' if pe else 'off',
                    'ap': 'on' if ap else 'off',
                    'lambda': _format_lambda(lam),
                    'layers': layers,
                    'questions': len(questions),
                    'mean_entities': float('nan') if exceeded else float(np.mean(entities)),
                    'mean_facts': float('nan') if exceeded else float(np.mean(facts)),
                    'seconds': round(time.perf_counter() - started, 4),
                    'status': status,
                })

    frame = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    if out:
        frame.to_csv(out, index=False)
        logger.info(f"基准结果已写入 {out}")
    return frame
