"""Composite structure + Dice reward and group-normalized advantages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import SECTION_ORDER, LabelSet, StructuredTrace

N_RULES = 5


@dataclass(frozen=True)
class RewardBreakdown:
    structure: float
    diagnosis: float
    total: float


@dataclass(frozen=True)
class GroupAdvantages:
    rewards: np.ndarray
    mean: float
    variance: float
    advantages: np.ndarray
    epsilon: float


def structure_reward(trace: StructuredTrace) -> float:
    satisfied = int(trace.tags_valid) + sum(int(trace.section_valid[k]) for k in SECTION_ORDER)
    # count / 5 keeps the value on the exact grid {0.0, 0.2, ..., 1.0}
    return satisfied / N_RULES


def dice_reward(truth: LabelSet, predicted: LabelSet) -> float:
    denom = len(truth) + len(predicted)
    if denom == 0:
        return 1.0
    return 2 * len(truth & predicted) / denom


def composite_reward(trace: StructuredTrace, truth: LabelSet) -> RewardBreakdown:
    s = structure_reward(trace)
    d = dice_reward(truth, trace.answer_set)
    return RewardBreakdown(structure=s, diagnosis=d, total=s + d)


def group_advantages(rewards: Sequence[float], epsilon: float = 1e-8) -> GroupAdvantages:
    """Standardize a group of rewards with its population mean and variance."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"group advantages need at least 2 rewards, got {r.size}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    mean = float(r.mean())
    centered = r - mean
    variance = float(np.mean(centered**2))
    denom = np.sqrt(variance + epsilon)
    if denom == 0.0:
        adv = np.zeros_like(r)
    else:
        adv = centered / denom
    return GroupAdvantages(rewards=r, mean=mean, variance=variance, advantages=adv, epsilon=epsilon)
