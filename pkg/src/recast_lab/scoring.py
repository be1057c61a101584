"""Task reward and structural proximity score for a parsed response."""
from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet

from .sid import SemanticId


@dataclass(frozen=True)
class PhiWeights:
    """Credit for exact match, shared (a, b) prefix, and shared a prefix only."""

    exact: float = 1.0
    prefix_ab: float = 0.1
    prefix_a: float = 0.01


DEFAULT_WEIGHTS = PhiWeights()


@dataclass(frozen=True)
class ResponseScore:
    reward: float
    structural: float


def task_reward(predicted: AbstractSet[SemanticId], target: AbstractSet[SemanticId]) -> float:
    if not predicted or not target:
        return 0.0
    return len(predicted & target) / len(predicted)


def phi(p: SemanticId, t: SemanticId, weights: PhiWeights = DEFAULT_WEIGHTS) -> float:
    if p == t:
        return weights.exact
    if p.a == t.a and p.b == t.b:
        return weights.prefix_ab
    if p.a == t.a:
        return weights.prefix_a
    return 0.0


def structural_score(
    predicted: AbstractSet[SemanticId],
    target: AbstractSet[SemanticId],
    weights: PhiWeights = DEFAULT_WEIGHTS,
) -> float:
    if not predicted or not target:
        return 0.0
    # sorted iteration keeps the float sum independent of set hash order
    total = sum(max(phi(p, t, weights) for t in target) for p in sorted(predicted))
    return total / len(predicted)


def score_response(
    predicted: AbstractSet[SemanticId],
    target: AbstractSet[SemanticId],
    weights: PhiWeights = DEFAULT_WEIGHTS,
) -> ResponseScore:
    return ResponseScore(task_reward(predicted, target), structural_score(predicted, target, weights))
