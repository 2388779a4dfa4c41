"""
预训练：多分类对数损失、手写反向传播、Adam 与早停。
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from configs.config_loader import get_training_defaults
from kgfr.embeddings.services import (
    EmbeddingProvider, RelationDescriptionTable, fallback_descriptions, relation_embeddings
)
from kgfr.evaluation.metrics import metric_h1
from kgfr.exceptions import ConfigurationError, NumericError, PreconditionError, TrainingError
from kgfr.graph_store.services import KnowledgeGraph, QuestionInstance
from kgfr.propagation.params import ModelParams, parameter_names
from kgfr.propagation.services import PropagationResult, RetrievalSubgraph, expand_subgraph, propagate
from kgfr.retrieval.services import rank_entities

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 200
    patience: int = 5
    lam: float = 100
    seed: int = 0
    dev_metric: str = 'h1'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    layers: int = 2
    dim: int = 64
    dim_attn: int = 8
    progressive: bool = True
    asymmetric: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f"学习率不能为负数: {self.learning_rate}")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigurationError(f"patience 与 max_epochs 必须至少为 1: {self.patience}, {self.max_epochs}")
        if self.dev_metric != 'h1':
            raise ConfigurationError(f"不支持的验证指标: {self.dev_metric}")
        if self.lam < 0:
            raise ConfigurationError(f"剪枝阈值 λ 不能为负数: {self.lam}")

    @classmethod
    def from_defaults(cls, **overrides) -> 'TrainConfig':
        """以 configs.yaml 中的训练默认值为底，再应用显式参数"""
        values = {k: v for k, v in get_training_defaults().items() if k in cls.__dataclass_fields__}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class GradientSet:
    """与 ModelParams 一一对应的梯度矩阵"""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = tensors

    @classmethod
    def zeros_like(cls, params: ModelParams) -> 'GradientSet':
        return cls({name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()})

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, tuple):
            key = f'{key[0]}[{key[1]}]'
        return self.tensors[key]

    def items(self):
        return self.tensors.items()

    def add_(self, other: 'GradientSet') -> 'GradientSet':
        for name, value in other.items():
            self.tensors[name] += value
        return self

    def check_finite(self) -> None:
        for name, value in self.tensors.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"参数 {name} 的梯度含有非有限数值")

    def matches(self, params: ModelParams) -> bool:
        return all(self.tensors[name].shape == t.shape for name, t in params.items())

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.tensors.values())))


# ---- 损失 ----

def _logsumexp(values: np.ndarray) -> float:
    shift = values.max()
    return float(shift + np.log(np.exp(values - shift).sum()))


def _softmax(values: np.ndarray) -> np.ndarray:
    e = np.exp(values - values.max())
    return e / e.sum()


def dense_loss(values: np.ndarray, answers: np.ndarray) -> float:
    """values 为全部实体的分数向量，answers 为答案下标"""
    if len(answers) == len(values):
        return 0.0
    return max(0.0, _logsumexp(values) - _logsumexp(values[answers]))


def loss(scores: Mapping[int, float], answers: Iterable[int], all_entities: Iterable[int]) -> float:
    """
    log Σ_{x∈E} exp(c_x) − log Σ_{a∈A} exp(c_a)，最大值平移保证数值稳定。
    scores 中未列出的实体分数为 0。
    """
    answers = set(int(a) for a in answers)
    if not answers:
        raise PreconditionError("答案集合不能为空")
    entities = sorted(set(int(e) for e in all_entities))
    if not answers <= set(entities):
        raise PreconditionError("答案必须属于实体全集")
    values = np.array([scores.get(e, 0.0) for e in entities], dtype=np.float64)
    answer_idx = np.array([i for i, e in enumerate(entities) if e in answers], dtype=np.int64)
    return dense_loss(values, answer_idx)


# ---- 反向传播 ----

@dataclass
class QuestionGradient:
    loss: float
    gradients: GradientSet
    result: PropagationResult


def question_gradients(graph: KnowledgeGraph, params: ModelParams, rel_init: np.ndarray,
                       q_emb: np.ndarray, question: QuestionInstance,
                       subgraph: Optional[RetrievalSubgraph] = None, lam: float = 100) -> QuestionGradient:
    """单道问题的损失及其对 W1..W7 的精确梯度；问题向量与关系初始嵌入视为常量"""
    if not question.answers:
        raise PreconditionError(f"问题 {question.qid} 没有答案，无法计算损失")
    result = propagate(graph, q_emb, question.topic_entities, params, rel_init, lam=lam,
                       subgraph=subgraph, keep_cache=True)
    grads = GradientSet.zeros_like(params)
    nodes = result.state.entity_ids
    x_final = result.entity_history[-1].astype(np.float64)
    w7 = params['W7'][0].astype(np.float64)

    dense = np.zeros(graph.num_entities, dtype=np.float64)
    dense[nodes] = x_final @ w7
    answers = np.array(sorted(question.answers), dtype=np.int64)
    value = dense_loss(dense, answers)
    if len(answers) == graph.num_entities:
        return QuestionGradient(value, grads, result)

    # ∂loss/∂c = softmax(全体) − [e∈A]·softmax(A)
    d_scores = _softmax(dense)
    d_scores[answers] -= _softmax(dense[answers])
    dc = d_scores[nodes]

    grads['W7'][0] = dc @ x_final
    dx = np.outer(dc, w7)
    d = params.dim
    d_rel_next = np.zeros_like(result.cache[-1].relations_out, dtype=np.float64)
    q = result.question.astype(np.float64)

    for i in reversed(range(params.layers)):
        c = result.cache[i]
        w1, w2, w3, w4, w5 = (params[name, i].astype(np.float64) for name in ('W1', 'W2', 'W3', 'W4', 'W5'))
        subj = c.subj.astype(np.float64)
        rel_rows = c.rel_rows.astype(np.float64)
        pre = c.pre_activation.astype(np.float64)
        alpha = c.alpha.astype(np.float64)

        grads['W2', i][:] = dx.T @ c.aggregate.astype(np.float64)
        d_messages = (dx @ w2)[c.dst]
        d_alpha = np.sum(d_messages * (subj + rel_rows), axis=1)
        d_sum = alpha[:, None] * d_messages
        d_logit = d_alpha * alpha * (1.0 - alpha)
        hidden = np.maximum(pre, 0)
        grads['W3', i][0] = d_logit @ hidden
        # ReLU 在 0 处的次梯度取 0
        d_pre = np.outer(d_logit, w3[0]) * (pre > 0)
        grads['W4', i][:] = d_pre.T @ subj
        grads['W5', i][:] = d_pre.T @ rel_rows
        grads['W6', i][:] = np.outer(d_pre.sum(axis=0), q)

        d_subj = d_sum + d_pre @ w4
        d_rel_rows = d_sum + d_pre @ w5
        dx = np.zeros((len(nodes), d), dtype=np.float64)
        np.add.at(dx, c.src, d_subj)
        d_rel = d_rel_next.copy()
        np.add.at(d_rel, c.rel, d_rel_rows)

        grads['W1', i][:, :d] = d_rel.T @ c.relations_in.astype(np.float64)
        grads['W1', i][:, d:] = np.outer(d_rel.sum(axis=0), q)
        d_rel_next = d_rel @ w1[:, :d]

    return QuestionGradient(value, grads, result)


def backward(questions: Sequence[QuestionInstance], graph: KnowledgeGraph, params: ModelParams,
             provider: EmbeddingProvider, rel_init: np.ndarray, config: TrainConfig) -> Tuple[float, GradientSet]:
    """一批问题损失之和及其梯度；没有到达任何答案的问题跳过并告警"""
    total = 0.0
    grads = GradientSet.zeros_like(params)
    for question in questions:
        subgraph = expand_subgraph(graph, question.topic_entities, params.layers, config.lam,
                                   config.progressive, config.asymmetric)
        if not any(subgraph.contains_entity(a) for a in question.answers):
            logger.warning(f"问题 {question.qid} 的答案均未被检索子图覆盖，跳过")
            continue
        q_emb = provider.encode(question.text).vector
        step = question_gradients(graph, params, rel_init, q_emb, question, subgraph, config.lam)
        total += step.loss
        grads.add_(step.gradients)
    grads.check_finite()
    return total, grads


# ---- 优化器 ----

class Adam:
    """Adam，一阶、二阶矩在 float64 中累积"""

    def __init__(self, params: ModelParams, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape, dtype=np.float64) for name, t in params.items()}

    def step(self, params: ModelParams, grads: GradientSet) -> None:
        self.t += 1
        if self.lr == 0:
            return
        for name, tensor in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** self.t)
            v_hat = self.v[name] / (1 - self.beta2 ** self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            params[name] = (tensor - update).astype(tensor.dtype)


# ---- 训练循环 ----

@dataclass
class PreparedQuestion:
    question: QuestionInstance
    q_emb: np.ndarray
    subgraph: RetrievalSubgraph


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    dev_h1: float
    seconds: float
    skipped: int


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_h1: float = -1.0
    stopped_early: bool = False

    def write_jsonl(self, path: PathLike) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for record in self.epochs:
                f.write(json.dumps(asdict(record), ensure_ascii=False) + '\n')


def prepare_questions(questions: Iterable[QuestionInstance], graph: KnowledgeGraph,
                      provider: EmbeddingProvider, config: TrainConfig,
                      require_reached_answer: bool = True) -> Tuple[List[PreparedQuestion], int]:
    """编码问题并预先扩展检索子图（剪枝只依赖结构，训练中不变）"""
    prepared, skipped = [], 0
    for question in questions:
        if not question.answers:
            skipped += 1
            continue
        subgraph = expand_subgraph(graph, question.topic_entities, config.layers, config.lam,
                                   config.progressive, config.asymmetric)
        if require_reached_answer and not any(subgraph.contains_entity(a) for a in question.answers):
            logger.warning(f"问题 {question.qid} 的答案均未被检索子图覆盖，跳过")
            skipped += 1
            continue
        prepared.append(PreparedQuestion(question, provider.encode(question.text).vector, subgraph))
    return prepared, skipped


def retriever_h1(prepared: Sequence[PreparedQuestion], graph: KnowledgeGraph, params: ModelParams,
                 rel_init: np.ndarray) -> float:
    """不经过 LLM 的 H@1，与仅检索器评估使用同一排序"""
    hits = [metric_h1(rank_entities(graph, item.q_emb, item.question.topic_entities, params, rel_init, 1,
                                    item.question.candidates, subgraph=item.subgraph),
                      item.question.answers)
            for item in prepared]
    return float(np.mean(hits)) if hits else 0.0


def train(dataset: Sequence[QuestionInstance], dev: Sequence[QuestionInstance], graph: KnowledgeGraph,
          provider: EmbeddingProvider, config: TrainConfig,
          descriptions: Optional[RelationDescriptionTable] = None,
          params: Optional[ModelParams] = None,
          log_path: Optional[PathLike] = None) -> Tuple[ModelParams, TrainingLog]:
    """
    逐题 Adam 更新；每轮结束后计算验证集 H@1，连续 patience 轮没有提升即停止。
    返回验证集最优的参数。dev 为空时用训练集代替。
    """
    if not dataset:
        raise PreconditionError("训练集不能为空")
    if provider.dim != config.dim:
        raise ConfigurationError(f"嵌入维度 {provider.dim} 与模型维度 {config.dim} 不符")

    descriptions = descriptions or fallback_descriptions(graph)
    rel_init = relation_embeddings(graph, descriptions, provider)
    train_set, skipped = prepare_questions(dataset, graph, provider, config)
    if not train_set:
        raise TrainingError(f"没有可用的训练问题（共 {len(dataset)} 道，跳过 {skipped} 道）")
    dev_set, _ = prepare_questions(dev, graph, provider, config, require_reached_answer=False) if dev else (train_set, 0)

    if params is None:
        params = ModelParams.initialize(config.layers, config.dim, config.dim_attn, seed=config.seed)
    params = params.copy()
    optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    best = params.copy()
    stale = 0
    logger.info(f"开始训练: {len(train_set)} 道训练题, {len(dev_set)} 道验证题, {params}")

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        losses = []
        for idx in rng.permutation(len(train_set)).tolist():
            item = train_set[idx]
            step = question_gradients(graph, params, rel_init, item.q_emb, item.question,
                                      item.subgraph, config.lam)
            step.gradients.check_finite()
            optimizer.step(params, step.gradients)
            losses.append(step.loss)

        dev_h1 = retriever_h1(dev_set, graph, params, rel_init)
        record = EpochRecord(epoch=epoch, mean_loss=float(np.mean(losses)), dev_h1=dev_h1,
                             seconds=round(time.perf_counter() - started, 4), skipped=skipped)
        log.epochs.append(record)
        logger.info(f"第 {epoch} 轮: loss={record.mean_loss:.4f}, dev H@1={dev_h1:.4f}")

        if dev_h1 > log.best_dev_h1:
            log.best_dev_h1 = dev_h1
            log.best_epoch = epoch
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.stopped_early = True
                logger.info(f"验证集 H@1 连续 {stale} 轮未提升，提前停止")
                break

    if log_path:
        log.write_jsonl(log_path)
    return best, log


# ---- 有限差分校验 ----

@dataclass
class GradientCheckEntry:
    name: str
    index: Tuple[int, int]
    analytic: float
    numeric: float
    relative_error: float
    skipped: bool = False


def _relu_masks(result: PropagationResult) -> List[np.ndarray]:
    return [c.pre_activation > 0 for c in result.cache]


def gradient_check(graph: KnowledgeGraph, params: ModelParams, rel_init: np.ndarray, q_emb: np.ndarray,
                   question: QuestionInstance, lam: float = 100, samples_per_matrix: int = 4,
                   h: float = 1e-3, seed: int = 0, floor: float = 1e-2) -> List[GradientCheckEntry]:
    """
    64 位中心差分对照解析梯度。剪枝决定取自未扰动的运行；
    +h 与 −h 两次运行的 ReLU 激活模式不同的条目标记为跳过。
    """
    params = params.astype(np.float64)
    rel_init = np.asarray(rel_init, dtype=np.float64)
    q_emb = np.asarray(q_emb, dtype=np.float64)
    subgraph = expand_subgraph(graph, question.topic_entities, params.layers, lam)
    analytic = question_gradients(graph, params, rel_init, q_emb, question, subgraph, lam).gradients
    rng = np.random.default_rng(seed)

    def run(perturbed: ModelParams) -> Tuple[float, List[np.ndarray]]:
        step = question_gradients(graph, perturbed, rel_init, q_emb, question, subgraph, lam)
        return step.loss, _relu_masks(step.result)

    entries = []
    for name in parameter_names(params.layers):
        shape = params[name].shape
        for flat in rng.choice(shape[0] * shape[1], size=min(samples_per_matrix, shape[0] * shape[1]),
                               replace=False).tolist():
            index = np.unravel_index(flat, shape)
            plus, minus = params.copy(), params.copy()
            plus[name][index] += h
            minus[name][index] -= h
            loss_plus, masks_plus = run(plus)
            loss_minus, masks_minus = run(minus)
            numeric = (loss_plus - loss_minus) / (2 * h)
            a = float(analytic[name][index])
            skipped = any(not np.array_equal(p, m) for p, m in zip(masks_plus, masks_minus))
            error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            entries.append(GradientCheckEntry(name, tuple(int(i) for i in index), a, numeric, error, skipped))
    return entries
