"""问答评估指标：F1、Hit、H@1"""
from typing import Hashable, Iterable, Sequence


def metric_f1(pred: Iterable[Hashable], gold: Iterable[Hashable]) -> float:
    """预测集合与标准答案集合的 F1；两者都为空时记为 1"""
    pred, gold = set(pred), set(gold)
    if not pred and not gold:
        return 1.0
    overlap = len(pred & gold)
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(gold)
    return 2 * precision * recall / (precision + recall)


def metric_hit(pred: Iterable[Hashable], gold: Iterable[Hashable]) -> bool:
    return bool(set(pred) & set(gold))


def metric_h1(pred: Sequence[Hashable], gold: Iterable[Hashable]) -> bool:
    return len(pred) > 0 and pred[0] in set(gold)
