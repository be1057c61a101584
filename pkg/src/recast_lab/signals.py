"""Within-group learning signals.

Four signal modes are supported, matching the ablation grid:

* ``grpo``           reward normalization over the sampled group
* ``repair_only``    anchor repair of all-zero groups, then reward normalization
* ``boundary_only``  boundary contrast on naturally trainable groups only
* ``recast``         anchor repair, then boundary contrast

Groups and advantage vectors round-trip through JSON lines so this module can
run standalone as a filter (see :func:`group_from_json` / :func:`signal_to_json`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

from .scoring import DEFAULT_WEIGHTS, PhiWeights, structural_score, task_reward
from .sid import CatalogShape, SemanticId, parse_response, render_ids, token_length


class SignalMode(str, Enum):
    GRPO = "grpo"
    REPAIR_ONLY = "repair_only"
    BOUNDARY_ONLY = "boundary_only"
    RECAST = "recast"

    @property
    def repairs(self) -> bool:
        return self in (SignalMode.REPAIR_ONLY, SignalMode.RECAST)

    @property
    def contrastive(self) -> bool:
        return self in (SignalMode.BOUNDARY_ONLY, SignalMode.RECAST)


class SignalError(ValueError):
    """Raised when a group violates a signal-construction precondition."""


@dataclass(frozen=True)
class SignalConfig:
    mode: SignalMode = SignalMode.RECAST
    w: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mode", SignalMode(self.mode))
        if not self.w > 0:
            raise ValueError("contrastive weight w must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class ScoredGroup:
    prompt_id: int
    responses: tuple[str, ...]
    id_sets: tuple[frozenset, ...]
    rewards: tuple[float, ...]
    structurals: tuple[float, ...]
    target: frozenset
    repaired: bool = False
    replaced_index: Optional[int] = None
    anchor_index: Optional[int] = None
    # Triple whose log-prob carries each response's gradient term. For sampled
    # responses this is the sampled triple, even when the text is malformed.
    items: Optional[tuple[SemanticId, ...]] = None

    def __post_init__(self):
        g = len(self.responses)
        if g < 2:
            raise SignalError(f"group size must be >= 2, got {g}")
        if not (len(self.id_sets) == len(self.rewards) == len(self.structurals) == g):
            raise SignalError("per-response fields must all have length G")
        if self.items is not None and len(self.items) != g:
            raise SignalError("items must have length G")
        if self.repaired:
            if self.replaced_index is None or self.replaced_index != self.anchor_index:
                raise SignalError("repaired group needs equal replaced/anchor indices")
            if not self.rewards[self.anchor_index] > 0:
                raise SignalError("anchor must carry positive reward")
        elif self.replaced_index is not None or self.anchor_index is not None:
            raise SignalError("unrepaired group cannot carry repair indices")

    @property
    def size(self) -> int:
        return len(self.responses)

    def token_lengths(self) -> list[int]:
        return [token_length(text) for text in self.responses]


@dataclass(frozen=True)
class AdvantageVector:
    values: tuple[float, ...]
    mode: SignalMode
    skipped: bool = False
    active: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "mode", SignalMode(self.mode))
        object.__setattr__(self, "active", tuple(i for i, v in enumerate(self.values) if v != 0.0))


def score_group(
    prompt_id: int,
    responses: Sequence[str],
    target: frozenset,
    shape: CatalogShape,
    items: Optional[Sequence[SemanticId]] = None,
    id_sets: Optional[Sequence[frozenset]] = None,
    weights: PhiWeights = DEFAULT_WEIGHTS,
) -> ScoredGroup:
    """Parse (unless ``id_sets`` is given) and score every response of a group."""
    if id_sets is None:
        id_sets = [parse_response(text, shape) for text in responses]
    target = frozenset(target)
    return ScoredGroup(
        prompt_id=int(prompt_id),
        responses=tuple(responses),
        id_sets=tuple(frozenset(s) for s in id_sets),
        rewards=tuple(task_reward(s, target) for s in id_sets),
        structurals=tuple(structural_score(s, target, weights) for s in id_sets),
        target=target,
        items=None if items is None else tuple(items),
    )


def hit_count(group: ScoredGroup) -> int:
    return sum(1 for r in group.rewards if r > 0)


def grpo_advantages(rewards: Sequence[float], epsilon: float = 1e-6) -> AdvantageVector:
    g = len(rewards)
    if g < 2:
        raise SignalError("need at least two rewards")
    mu = sum(rewards) / g
    sigma = math.sqrt(sum((r - mu) ** 2 for r in rewards) / g)
    return AdvantageVector(tuple((r - mu) / (sigma + epsilon) for r in rewards), SignalMode.GRPO)


def make_anchor(target: frozenset, shape: CatalogShape) -> str:
    if not target:
        raise SignalError("cannot build an anchor from an empty target")
    for sid in target:
        if not shape.contains(sid):
            raise SignalError(f"target {sid} is outside catalog {shape.as_tuple()}")
    return render_ids(target)


def repair_group(
    group: ScoredGroup, shape: CatalogShape, weights: PhiWeights = DEFAULT_WEIGHTS
) -> ScoredGroup:
    """Swap the least informative response of an all-zero group for the anchor."""
    if hit_count(group) > 0:
        return group
    anchor = make_anchor(group.target, shape)
    # min() returns the first minimum, so ties go to the lowest index
    j = min(range(group.size), key=lambda i: group.structurals[i])
    anchor_ids = parse_response(anchor, shape)

    def put(seq, value):
        out = list(seq)
        out[j] = value
        return tuple(out)

    items = group.items
    if items is not None:
        items = put(items, min(group.target))
    return replace(
        group,
        responses=put(group.responses, anchor),
        id_sets=put(group.id_sets, anchor_ids),
        rewards=put(group.rewards, task_reward(anchor_ids, group.target)),
        structurals=put(group.structurals, structural_score(anchor_ids, group.target, weights)),
        repaired=True,
        replaced_index=j,
        anchor_index=j,
        items=items,
    )


def select_boundary(group: ScoredGroup) -> Optional[tuple[int, int]]:
    """Return ``(i_plus, i_minus)`` or None when the group has no zero-reward member."""
    positives = [i for i, r in enumerate(group.rewards) if r > 0]
    if not positives:
        raise SignalError("boundary selection needs at least one positive; repair first")
    negatives = [i for i, r in enumerate(group.rewards) if r == 0]
    if not negatives:
        return None
    # max() keeps the first maximum, so ties go to the lowest index
    i_plus = max(positives, key=lambda i: group.rewards[i])
    i_minus = max(negatives, key=lambda i: group.structurals[i])
    return i_plus, i_minus


def recast_advantages(group: ScoredGroup, config: SignalConfig) -> AdvantageVector:
    pair = select_boundary(group)
    values = [0.0] * group.size
    if pair is None:
        return AdvantageVector(tuple(values), config.mode, skipped=True)
    i_plus, i_minus = pair
    values[i_plus] = config.w
    values[i_minus] = -config.w
    return AdvantageVector(tuple(values), config.mode)


def build_signal(
    group: ScoredGroup,
    config: SignalConfig,
    shape: CatalogShape,
    weights: PhiWeights = DEFAULT_WEIGHTS,
) -> tuple[ScoredGroup, AdvantageVector]:
    mode = config.mode
    if mode.repairs:
        group = repair_group(group, shape, weights)
    if mode.contrastive:
        if hit_count(group) == 0:
            return group, AdvantageVector((0.0,) * group.size, mode, skipped=True)
        return group, recast_advantages(group, config)
    adv = grpo_advantages(group.rewards, config.epsilon)
    return group, AdvantageVector(adv.values, mode)


# --- JSON-lines interchange -------------------------------------------------


def _ids_to_json(ids) -> list[list[int]]:
    return [s.as_list() for s in sorted(ids)]


def _ids_from_json(rows) -> frozenset:
    return frozenset(SemanticId(*map(int, r)) for r in rows)


def group_to_json(group: ScoredGroup) -> dict:
    return {
        "prompt_id": group.prompt_id,
        "responses": list(group.responses),
        "id_sets": [_ids_to_json(s) for s in group.id_sets],
        "rewards": list(group.rewards),
        "structurals": list(group.structurals),
        "target": _ids_to_json(group.target),
        "repaired": group.repaired,
        "replaced_index": group.replaced_index,
        "anchor_index": group.anchor_index,
        "items": None if group.items is None else [s.as_list() for s in group.items],
    }


def group_from_json(obj: dict, shape: CatalogShape) -> ScoredGroup:
    """Load a group record. Scores are always recomputed from the response texts."""
    items = obj.get("items")
    group = score_group(
        obj["prompt_id"],
        obj["responses"],
        _ids_from_json(obj["target"]),
        shape,
        items=None if items is None else [SemanticId(*map(int, r)) for r in items],
    )
    if obj.get("repaired"):
        group = replace(
            group,
            repaired=True,
            replaced_index=obj["replaced_index"],
            anchor_index=obj["anchor_index"],
        )
    return group


def advantage_to_json(adv: AdvantageVector) -> dict:
    return {
        "values": list(adv.values),
        "mode": adv.mode.value,
        "active": list(adv.active),
        "skipped": adv.skipped,
    }


def advantage_from_json(obj: dict) -> AdvantageVector:
    return AdvantageVector(tuple(obj["values"]), SignalMode(obj["mode"]), bool(obj["skipped"]))


def signal_to_json(group: ScoredGroup, adv: AdvantageVector) -> dict:
    return {"group": group_to_json(group), "advantages": advantage_to_json(adv)}
