"""KL-regularized policy-gradient training on the tabular policy.

The per-step objective (maximized) is

    J = 1/B * sum_q [ 1/G * sum_i A_i * log pi(x_i | q)  -  beta * KL(pi(.|q) || pi_ref(.|q)) ]

where ``x_i`` is the triple carried by response ``i`` and ``A_i`` comes from the
configured signal mode. Gradients are exact; responses with ``A_i == 0`` are
dropped before the backward pass. ``StepReport.grad_norm`` is the norm of the
ascent direction ``dJ/dtheta``; ``loss_pg`` is ``-`` the policy-gradient term.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .env import (
    TAG_BATCH,
    TAG_ROLLOUT,
    Dataset,
    TabularPolicy,
    rng_stream,
    sample_group,
)
from .signals import (
    AdvantageVector,
    ScoredGroup,
    SignalConfig,
    SignalMode,
    build_signal,
    hit_count,
    score_group,
)


@dataclass
class TrainConfig:
    mode: SignalMode = SignalMode.RECAST
    G: int = 8
    beta: float = 0.01
    learning_rate: float = 1.0
    steps: int = 2000
    prompts_per_step: int = 32
    w: float = 1.0
    epsilon: float = 1e-6
    c_roll: float = 1.0
    c_upd: float = 1.0
    refresh_old_every: int = 1
    seed: int = 0
    malform_rate: float = 0.02

    def __post_init__(self):
        self.mode = SignalMode(self.mode)
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.prompts_per_step < 1 or self.refresh_old_every < 1:
            raise ValueError("prompts_per_step and refresh_old_every must be >= 1")
        if not 0.0 <= self.malform_rate < 1.0:
            raise ValueError("malform_rate must lie in [0, 1)")

    @property
    def signal(self) -> SignalConfig:
        return SignalConfig(self.mode, self.w, self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TrainState:
    policy: TabularPolicy
    old_policy: TabularPolicy
    ref_policy: TabularPolicy
    step: int = 0

    @classmethod
    def initial(cls, policy: TabularPolicy) -> "TrainState":
        return cls(policy.copy(), policy.copy(), policy.copy(), 0)


@dataclass
class StepReport:
    step: int
    loss_pg: float
    loss_kl: float
    grad_norm: float
    groups_total: int
    groups_all_zero: int
    groups_single_hit: int
    zero_reward_samples: int
    repair_triggers: int
    naturally_trainable: int
    skipped_contrasts: int
    active_responses: int
    active_tokens: int
    total_tokens: int
    cost_base: float
    cost_method: float
    # mean log pi_old of injected anchors; nan when no group was repaired
    anchor_logprob_old: float = math.nan


STEP_COLUMNS = [f.name for f in fields(StepReport)]


def cost_model(G: int, c_roll: float, c_upd: float, mode: SignalMode | str) -> tuple[float, float]:
    """Per-group ``(cost_base, cost_method)``: full-group update vs the active pair."""
    mode = SignalMode(mode)
    base = G * c_roll + G * c_upd
    method = G * c_roll + 2 * c_upd if mode.contrastive else base
    return base, method


def kl_divergence(policy: TabularPolicy, ref: TabularPolicy, prompt_id: int) -> float:
    lp = policy.item_log_probs(prompt_id)
    lr = ref.item_log_probs(prompt_id)
    return float(np.sum(np.exp(lp) * (lp - lr)))


def _backprop_items(policy: TabularPolicy, prompt_ids: np.ndarray, h: np.ndarray):
    """Map per-item weights ``h[k, x]`` to ``sum_x h[k, x] * dlog p(x)/dlogits``."""
    n_a, n_b, n_c = policy.shape.as_tuple()
    pa, pb, pc = policy.level_probs(prompt_ids)
    h = h.reshape(-1, n_a, n_b, n_c)
    h_ab = h.sum(axis=-1)
    h_a = h_ab.sum(axis=-1)
    g_c = h - pc * h_ab[..., None]
    g_b = h_ab - pb * h_a[..., None]
    g_a = h_a - pa * h_a.sum(axis=-1, keepdims=True)
    return g_a, g_b, g_c


def _item_index(policy: TabularPolicy, items: Sequence) -> np.ndarray:
    n_b, n_c = policy.shape.n_b, policy.shape.n_c
    return np.array([(s.a * n_b + s.b) * n_c + s.c for s in items], dtype=np.int64)


def objective_gradient(
    state: TrainState,
    batch: Sequence[tuple[ScoredGroup, AdvantageVector]],
    config: TrainConfig,
    filter_inactive: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact ascent gradient of the batch objective as ``(g_a, g_b, g_c)`` full-size tables."""
    policy, ref = state.policy, state.ref_policy
    g_a = np.zeros_like(policy.logits_a)
    g_b = np.zeros_like(policy.logits_b)
    g_c = np.zeros_like(policy.logits_c)
    if not batch:
        return g_a, g_b, g_c
    B = len(batch)
    ordered = sorted(batch, key=lambda ga: ga[0].prompt_id)
    q = np.array(sorted({g.prompt_id for g, _ in ordered}), dtype=np.int64)
    row = {int(k): r for r, k in enumerate(q)}
    h = np.zeros((len(q), policy.shape.size))
    for group, adv in ordered:
        if len(adv.values) != group.size:
            raise ValueError(f"prompt {group.prompt_id}: {len(adv.values)} advantages for {group.size} responses")
        if group.items is None:
            raise ValueError(f"prompt {group.prompt_id}: group carries no item triples")
        idx = adv.active if filter_inactive else range(group.size)
        for i, k in zip(idx, _item_index(policy, [group.items[i] for i in idx])):
            h[row[group.prompt_id], k] += adv.values[i] / group.size
    if config.beta > 0:
        lp = policy.item_log_probs(q)
        lr = ref.item_log_probs(q)
        # every batch entry contributes its own KL term
        counts = np.bincount([row[g.prompt_id] for g, _ in ordered], minlength=len(q))
        h -= config.beta * counts[:, None] * np.exp(lp) * (lp - lr + 1.0)
    h /= B
    da, db, dc = _backprop_items(policy, q, h)
    np.add.at(g_a, q, da)
    np.add.at(g_b, q, db)
    np.add.at(g_c, q, dc)
    return g_a, g_b, g_c


def objective_value(
    policy: TabularPolicy,
    ref: TabularPolicy,
    batch: Sequence[tuple[ScoredGroup, AdvantageVector]],
    beta: float,
) -> tuple[float, float]:
    """Return ``(pg_term, mean_kl)`` so that ``J = pg_term - beta * mean_kl``."""
    B = len(batch)
    q = np.array([g.prompt_id for g, _ in batch], dtype=np.int64)
    lp = policy.item_log_probs(q)
    lr = ref.item_log_probs(q)
    kl = float(np.sum(np.exp(lp) * (lp - lr)))
    pg = 0.0
    for r, (group, adv) in enumerate(batch):
        if adv.active:
            idx = _item_index(policy, [group.items[i] for i in adv.active])
            pg += sum(adv.values[i] * lp[r, k] for i, k in zip(adv.active, idx)) / group.size
    return float(pg) / B, kl / B


def select_prompts(seed: int, step: int, num_prompts: int, k: int) -> np.ndarray:
    rng = rng_stream(seed, TAG_BATCH, step)
    return np.sort(rng.choice(num_prompts, size=min(k, num_prompts), replace=False))


def collect_batch(state: TrainState, dataset: Dataset, config: TrainConfig):
    """Sample, score and signal one batch from pi_old.

    Returns ``(pre_repair_groups, signaled_batch)``.
    """
    shape = dataset.shape
    signal = config.signal
    pre, batch = [], []
    for q in select_prompts(config.seed, state.step, len(dataset), config.prompts_per_step):
        prompt = dataset.prompts[q]
        rng = rng_stream(config.seed, TAG_ROLLOUT, state.step, int(q))
        responses = sample_group(state.old_policy, prompt, config.G, rng, config.malform_rate)
        group = score_group(
            prompt.prompt_id,
            [r.text for r in responses],
            prompt.target_set,
            shape,
            items=[r.id for r in responses],
            id_sets=[r.parsed(shape) for r in responses],
        )
        pre.append(group)
        batch.append(build_signal(group, signal, shape))
    return pre, batch


def train_step(state: TrainState, dataset: Dataset, config: TrainConfig) -> StepReport:
    """Run one sample/score/signal/update cycle in place and report on it.

    Randomness is drawn from streams keyed by ``(config.seed, state.step)``.
    """
    pre, batch = collect_batch(state, dataset, config)
    mode = config.mode

    hits = [hit_count(g) for g in pre]
    total_tokens = active_tokens = active_responses = 0
    anchor_lps = []
    for group, adv in batch:
        lengths = group.token_lengths()
        total_tokens += sum(lengths)
        if mode.contrastive:
            active_responses += len(adv.active)
            active_tokens += sum(lengths[i] for i in adv.active)
        else:
            # full-group update: every sampled response enters the actor pass
            active_responses += group.size
            active_tokens += sum(lengths)
        if group.repaired:
            anchor_lps.append(state.old_policy.log_prob(group.prompt_id, group.items[group.anchor_index]))
    base, method = cost_model(config.G, config.c_roll, config.c_upd, mode)

    pg, kl = objective_value(state.policy, state.ref_policy, batch, config.beta)
    g_a, g_b, g_c = objective_gradient(state, batch, config)
    grad_norm = math.sqrt(float(np.sum(g_a**2) + np.sum(g_b**2) + np.sum(g_c**2)))

    lr = config.learning_rate
    state.policy.logits_a += lr * g_a
    state.policy.logits_b += lr * g_b
    state.policy.logits_c += lr * g_c

    report = StepReport(
        step=state.step,
        loss_pg=-pg,
        loss_kl=kl,
        grad_norm=grad_norm,
        groups_total=len(pre),
        groups_all_zero=sum(1 for k in hits if k == 0),
        groups_single_hit=sum(1 for k in hits if k == 1),
        zero_reward_samples=sum(sum(1 for r in g.rewards if r == 0) for g in pre),
        repair_triggers=sum(1 for g, _ in batch if g.repaired),
        naturally_trainable=sum(1 for k in hits if k >= 1),
        skipped_contrasts=sum(1 for _, a in batch if a.skipped),
        active_responses=active_responses,
        active_tokens=active_tokens,
        total_tokens=total_tokens,
        cost_base=base * len(batch),
        cost_method=method * len(batch),
        anchor_logprob_old=float(np.mean(anchor_lps)) if anchor_lps else math.nan,
    )

    state.step += 1
    if state.step % config.refresh_old_every == 0:
        state.old_policy = state.policy.copy()
    return report
