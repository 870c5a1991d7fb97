"""Ranking metrics for link prediction and threshold metrics for node classification."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def rank_of_positive(pos: float, negatives: Sequence[float]) -> int:
    """1-based rank of the positive among ``negatives``; ties count against it."""
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.size < 1:
        raise MetricError("need at least one negative score")
    if not math.isfinite(pos) or not np.all(np.isfinite(negs)):
        raise MetricError("scores must be finite")
    return 1 + int(np.count_nonzero(negs >= pos))


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise MetricError("no ranks given")
    if np.any(r < 1):
        raise MetricError("ranks start at 1")
    return r


def mrr(ranks) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def hits_at_k(ranks, k: int) -> float:
    if k < 1:
        raise MetricError("k must be >= 1")
    return float(np.mean(_ranks(ranks) <= k))


def _sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative (TP, FP) after each group of tied scores, highest score first."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("no positive label; recall is undefined")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order].astype(np.int64)
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return tp[ends], fp[ends], n_pos


def max_f1(scores, labels) -> float:
    """Best F1 over every threshold between distinct scores (predicting nothing scores 0)."""
    tp, fp, n_pos = _sweep(scores, labels)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(max(0.0, f1.max()))


def f1_at_threshold(scores, labels, threshold: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    denom = int(pred.sum()) + int(y.sum())
    return 0.0 if tp == 0 else 2.0 * tp / denom


def pr_auc(scores, labels) -> float:
    """Average precision: sum over tie groups of (recall step) x (precision at the group)."""
    tp, fp, n_pos = _sweep(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


@dataclass
class EvalReport:
    task: str
    split: str
    query_count: int
    seed: int
    config_digest: str
    mrr: float | None = None
    hits: dict[int, float] = field(default_factory=dict)
    max_f1: float | None = None
    pr_auc: float | None = None

    def to_dict(self) -> dict:
        out: dict = {"task": self.task, "split": self.split, "query_count": self.query_count,
                     "seed": self.seed, "config_digest": self.config_digest}
        if self.mrr is not None:
            out["mrr"] = self.mrr
        for k in sorted(self.hits):
            out[f"hits@{k}"] = self.hits[k]
        if self.max_f1 is not None:
            out["max_f1"] = self.max_f1
        if self.pr_auc is not None:
            out["pr_auc"] = self.pr_auc
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        hits = {int(k.split("@")[1]): v for k, v in d.items() if k.startswith("hits@")}
        return cls(task=d["task"], split=d["split"], query_count=d["query_count"], seed=d["seed"],
                   config_digest=d["config_digest"], mrr=d.get("mrr"), hits=hits,
                   max_f1=d.get("max_f1"), pr_auc=d.get("pr_auc"))
