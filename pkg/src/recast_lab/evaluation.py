"""Offline metrics, group-composition diagnostics and matched-budget analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .env import MALFORMED_TEXT, TAG_EVAL, Dataset, TabularPolicy, rng_stream
from .sid import SemanticId, parse_response
from .signals import ScoredGroup, hit_count


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = (1, 32)
    eval_samples: int = 32
    eval_seed: int = 0
    malform_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(sorted(int(k) for k in self.k_values)))
        if not self.k_values or min(self.k_values) < 1:
            raise ValueError("k_values must be positive")
        if max(self.k_values) > self.eval_samples:
            raise ValueError(f"K={max(self.k_values)} exceeds eval_samples={self.eval_samples}")


@dataclass
class LearningCurve:
    name: str
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.steps) != len(self.values):
            raise ValueError("steps and values differ in length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("curve steps must be strictly increasing")

    def append(self, step: int, value: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"step {step} does not follow {self.steps[-1]}")
        self.steps.append(int(step))
        self.values.append(float(value))

    @property
    def final(self) -> float:
        return self.values[-1]


def sample_table(policy: TabularPolicy, dataset: Dataset, cfg: EvalConfig) -> list[list[frozenset]]:
    """Parsed ID sets of ``eval_samples`` fresh responses per prompt.

    Each prompt has its own stream keyed by ``(eval_seed, prompt_id)``, so the
    same uniforms are reused across checkpoints.
    """
    shape = dataset.shape
    malformed = parse_response(MALFORMED_TEXT, shape)
    table = []
    for prompt in dataset.prompts:
        rng = rng_stream(cfg.eval_seed, TAG_EVAL, prompt.prompt_id)
        items = policy.sample_items(prompt.prompt_id, cfg.eval_samples, rng)
        corrupt = rng.random(cfg.eval_samples) < cfg.malform_rate
        table.append(
            [
                malformed if bad else frozenset({SemanticId(a, b, c)})
                for (a, b, c), bad in zip(items.tolist(), corrupt)
            ]
        )
    return table


def pass_at_k_table(table: Sequence[Sequence[frozenset]], targets: Sequence[frozenset], k: int) -> float:
    """Fraction of prompts whose first ``k`` parsed sets contain a target ID."""
    hits = sum(1 for row, target in zip(table, targets) if any(s & target for s in row[:k]))
    return hits / len(targets)


def recall_at_k_table(table: Sequence[Sequence[frozenset]], targets: Sequence[frozenset], k: int) -> float:
    """Mean fraction of target IDs covered by the union of the first ``k`` parsed sets."""
    total = 0.0
    for row, target in zip(table, targets):
        covered = frozenset().union(*row[:k])
        total += len(covered & target) / len(target) if target else 0.0
    return total / len(targets)


def _targets(dataset: Dataset) -> list[frozenset]:
    return [p.target_set for p in dataset.prompts]


def pass_at_k(policy: TabularPolicy, dataset: Dataset, k: int, cfg: EvalConfig) -> float:
    if k > cfg.eval_samples:
        raise ValueError("k exceeds eval_samples")
    return pass_at_k_table(sample_table(policy, dataset, cfg), _targets(dataset), k)


def recall_at_k(policy: TabularPolicy, dataset: Dataset, k: int, cfg: EvalConfig) -> float:
    if k > cfg.eval_samples:
        raise ValueError("k exceeds eval_samples")
    return recall_at_k_table(sample_table(policy, dataset, cfg), _targets(dataset), k)


def exact_pass_at_k(policy: TabularPolicy, dataset: Dataset, k: int = 1) -> float:
    """Expected Pass@K under i.i.d. sampling, computed from the exact target mass."""
    q = np.arange(len(dataset))
    p = np.exp(policy.item_log_probs(q)[q, dataset.target_indices()])
    return float(np.mean(1.0 - (1.0 - p) ** k))


def evaluate(policy: TabularPolicy, dataset: Dataset, cfg: EvalConfig) -> dict[str, float]:
    """All configured metrics from one shared sample table, plus exact Pass@1."""
    table = sample_table(policy, dataset, cfg)
    targets = _targets(dataset)
    out = {"pass1_exact": exact_pass_at_k(policy, dataset, 1)}
    for k in cfg.k_values:
        out[f"pass_at_{k}"] = pass_at_k_table(table, targets, k)
        out[f"recall_at_{k}"] = recall_at_k_table(table, targets, k)
    return out


def composition_stats(groups: Sequence[ScoredGroup]) -> dict[str, float]:
    """All-zero, single-hit and zero-reward-sample ratios over pre-repair groups."""
    n = len(groups)
    if n == 0:
        return {"all_zero_ratio": 0.0, "single_hit_ratio": 0.0, "zero_reward_sample_ratio": 0.0}
    hits = [hit_count(g) for g in groups]
    zero = sum(sum(1 for r in g.rewards if r == 0) for g in groups)
    return {
        "all_zero_ratio": sum(1 for k in hits if k == 0) / n,
        "single_hit_ratio": sum(1 for k in hits if k == 1) / n,
        "zero_reward_sample_ratio": zero / sum(g.size for g in groups),
    }


def matched_budget_ratio(
    candidate: LearningCurve, reference_value: float, reference_steps: int
) -> Optional[float]:
    """First recorded step where the candidate reaches the reference, over the reference budget."""
    for step, value in zip(candidate.steps, candidate.values):
        if value >= reference_value:
            return step / reference_steps
    return None
