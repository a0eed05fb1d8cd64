"""Label-set classification metrics, structural validity and rater agreement."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .rewards import dice_reward, structure_reward
from .trace import LabelSet, StructuredTrace


class UndefinedStatistic(ValueError):
    """Agreement statistic has no variance to work with (0/0)."""


@dataclass(frozen=True)
class LabelCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0


@dataclass(frozen=True)
class SetMetrics:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    sample_f1: float
    per_label: dict[str, LabelCounts] = field(default_factory=dict)

    def summary(self) -> dict[str, float]:
        return {
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "sample_f1": self.sample_f1,
        }


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def set_metrics(pairs: Sequence[tuple[LabelSet, LabelSet]]) -> SetMetrics:
    """Micro (pooled), macro (per truth label) and per-sample F1 over label sets."""
    if not pairs:
        raise ValueError("set_metrics needs at least one (truth, predicted) pair")
    tp: Counter[str] = Counter()
    fp: Counter[str] = Counter()
    fn: Counter[str] = Counter()
    seen_truth: set[str] = set()
    for truth, pred in pairs:
        truth, pred = frozenset(truth), frozenset(pred)
        seen_truth |= truth
        for l in truth & pred:
            tp[l] += 1
        for l in pred - truth:
            fp[l] += 1
        for l in truth - pred:
            fn[l] += 1
    labels = sorted(set(tp) | set(fp) | set(fn) | seen_truth)
    per_label = {l: LabelCounts(tp[l], fp[l], fn[l]) for l in labels}
    TP, FP, FN = sum(tp.values()), sum(fp.values()), sum(fn.values())
    macro = [per_label[l].f1 for l in sorted(seen_truth)]
    return SetMetrics(
        micro_precision=_ratio(TP, TP + FP),
        micro_recall=_ratio(TP, TP + FN),
        micro_f1=_ratio(2 * TP, 2 * TP + FP + FN),
        macro_f1=float(np.mean(macro)) if macro else 0.0,
        sample_f1=float(np.mean([dice_reward(frozenset(t), frozenset(p)) for t, p in pairs])),
        per_label=per_label,
    )


def ssv_metric(traces: Sequence[StructuredTrace]) -> float:
    """Percentage of traces satisfying all five structural rules."""
    if not traces:
        raise ValueError("ssv_metric needs at least one trace")
    return 100.0 * sum(structure_reward(t) == 1.0 for t in traces) / len(traces)


# ------------------------------------------------------------------ agreement


def fleiss_kappa(ratings: Sequence[Sequence], categories: Iterable | None = None) -> float:
    """Fleiss' kappa for a subjects x raters matrix of category codes."""
    r = np.asarray(ratings, dtype=object)
    if r.ndim != 2 or r.shape[0] < 2 or r.shape[1] < 2:
        raise ValueError("ratings must be a subjects x raters matrix with >= 2 of each")
    cats = sorted(set(r.ravel().tolist()) | set(categories or ()))
    index = {c: j for j, c in enumerate(cats)}
    n_sub, n_rat = r.shape
    counts = np.zeros((n_sub, len(cats)))
    for i in range(n_sub):
        for c in r[i]:
            counts[i, index[c]] += 1
    p_i = ((counts**2).sum(1) - n_rat) / (n_rat * (n_rat - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(0) / (n_sub * n_rat)
    p_e = float((p_j**2).sum())
    if p_e >= 1.0:
        raise UndefinedStatistic("all ratings fall in one category; Fleiss' kappa is undefined")
    return float((p_bar - p_e) / (1.0 - p_e))


def quadratic_weighted_kappa(
    a: Sequence[int],
    b: Sequence[int],
    min_rating: int | None = None,
    max_rating: int | None = None,
) -> float:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"rating vectors differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty rating vectors")
    lo = int(min(a.min(), b.min())) if min_rating is None else min_rating
    hi = int(max(a.max(), b.max())) if max_rating is None else max_rating
    k = hi - lo + 1
    if k < 2:
        raise UndefinedStatistic("a single rating category gives no disagreement scale")
    observed = np.zeros((k, k))
    np.add.at(observed, (a - lo, b - lo), 1.0)
    expected = np.outer(observed.sum(1), observed.sum(0)) / a.size
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    denom = float((w * expected).sum())
    if denom == 0.0:
        raise UndefinedStatistic("no expected disagreement; QWK is undefined")
    return 1.0 - float((w * observed).sum()) / denom


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of average-tie ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length vectors of at least 2 values")
    ra = rankdata(a) - (a.size + 1) / 2
    rb = rankdata(b) - (b.size + 1) / 2
    den = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if den == 0.0:
        raise UndefinedStatistic("constant vector; Spearman correlation is undefined")
    return float((ra * rb).sum() / den)
