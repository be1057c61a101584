import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recast_lab.scoring import task_reward
from recast_lab.sid import CatalogShape, SemanticId, parse_response
from recast_lab.signals import (
    AdvantageVector,
    ScoredGroup,
    SignalConfig,
    SignalError,
    SignalMode,
    advantage_from_json,
    advantage_to_json,
    build_signal,
    group_from_json,
    group_to_json,
    grpo_advantages,
    hit_count,
    make_anchor,
    recast_advantages,
    repair_group,
    score_group,
    select_boundary,
)

S = SemanticId
SHAPE = CatalogShape(8, 8, 8)
TARGET = frozenset({S(3, 5, 7)})


def make_group(rewards, structurals, target=TARGET, prompt_id=0):
    g = len(rewards)
    return ScoredGroup(
        prompt_id=prompt_id,
        responses=tuple(f"resp{i}" for i in range(g)),
        id_sets=tuple(frozenset() for _ in range(g)),
        rewards=tuple(float(r) for r in rewards),
        structurals=tuple(float(u) for u in structurals),
        target=target,
        items=tuple(S(0, 0, i % 8) for i in range(g)),
    )


def test_hit_count_examples():
    assert hit_count(make_group([0, 0, 0, 0], [0] * 4)) == 0
    assert hit_count(make_group([1, 0, 0, 0], [1, 0, 0, 0])) == 1
    assert hit_count(make_group([1, 0.5, 0, 0], [1, 0.5, 0, 0])) == 2


def test_grpo_examples():
    # mu = 0.25, sigma = sqrt(0.1875)
    adv = grpo_advantages([1, 0, 0, 0], 1e-6)
    assert [round(v, 5) for v in adv.values] == [1.73205, -0.57735, -0.57735, -0.57735]
    assert grpo_advantages([0, 0, 0, 0]).values == (0.0,) * 4
    assert grpo_advantages([1, 1]).values == (0.0, 0.0)
    with pytest.raises(SignalError):
        grpo_advantages([1.0])


def test_make_anchor_examples():
    assert make_anchor(frozenset({S(3, 5, 7)}), SHAPE) == "<a_3><b_5><c_7>"
    two = frozenset({S(1, 2, 3), S(0, 0, 0)})
    text = make_anchor(two, SHAPE)
    assert text == "<a_0><b_0><c_0><a_1><b_2><c_3>"
    assert parse_response(text, SHAPE) == two
    with pytest.raises(SignalError):
        make_anchor(frozenset(), SHAPE)


@given(st.frozensets(st.builds(S, st.integers(0, 7), st.integers(0, 7), st.integers(0, 7)), min_size=1, max_size=4))
def test_anchor_always_hits(target):
    assert task_reward(parse_response(make_anchor(target, SHAPE), SHAPE), target) == 1.0


def test_repair_examples():
    g = make_group([0, 0, 0], [0.01, 0.0, 0.1])
    # brute force over candidates: the unique minimum of u is index 1
    assert min(range(3), key=lambda i: (g.structurals[i], i)) == 1
    r = repair_group(g, SHAPE)
    assert r.repaired and r.replaced_index == r.anchor_index == 1
    assert hit_count(r) == 1
    assert r.responses[1] == "<a_3><b_5><c_7>"
    assert r.rewards[1] == 1.0 and r.structurals[1] == 1.0
    assert r.items[1] == S(3, 5, 7)

    unchanged = make_group([0, 1, 0], [0, 1, 0])
    assert repair_group(unchanged, SHAPE) is unchanged

    tie = repair_group(make_group([0, 0, 0], [0, 0, 0]), SHAPE)
    assert tie.replaced_index == 0


def test_repair_rejects_empty_target():
    g = make_group([0, 0], [0, 0], target=frozenset())
    with pytest.raises(SignalError):
        repair_group(g, SHAPE)


def test_select_boundary_examples():
    g = make_group([0, 0.5, 1, 0], [0.2, 0.9, 1.0, 0.4])
    assert select_boundary(g) == (2, 3)
    assert select_boundary(make_group([1, 1], [1, 1])) is None
    repaired = repair_group(make_group([0, 0, 0, 0], [0.1, 0.0, 0.01, 0.1]), SHAPE)
    assert select_boundary(repaired)[0] == repaired.anchor_index
    with pytest.raises(SignalError):
        select_boundary(make_group([0, 0], [0, 0]))


def test_recast_examples():
    cfg = SignalConfig(SignalMode.RECAST, w=1.0)
    adv = recast_advantages(make_group([0, 1, 0], [0.1, 1, 0.01]), cfg)
    assert adv.values == (-1.0, 1.0, 0.0)
    assert adv.active == (0, 1) and not adv.skipped
    skip = recast_advantages(make_group([1, 1], [0.3, 0.7]), cfg)
    assert skip.values == (0.0, 0.0) and skip.skipped and skip.active == ()
    scaled = recast_advantages(make_group([0, 1], [0, 1]), SignalConfig(SignalMode.RECAST, w=2.5))
    assert scaled.values == (-2.5, 2.5)


def test_build_signal_examples():
    zero = make_group([0, 0, 0, 0], [0.1, 0.0, 0.01, 0.0])
    g, adv = build_signal(zero, SignalConfig(SignalMode.RECAST), SHAPE)
    assert g.repaired and hit_count(g) == 1
    assert len(adv.active) == 2 and sum(adv.values) == 0.0
    assert adv.values[g.anchor_index] == 1.0
    assert adv.values[0] == -1.0  # hardest remaining negative, u=0.1

    g, adv = build_signal(zero, SignalConfig(SignalMode.GRPO), SHAPE)
    assert g is zero and adv.values == (0.0,) * 4 and adv.mode is SignalMode.GRPO

    g, adv = build_signal(zero, SignalConfig(SignalMode.BOUNDARY_ONLY), SHAPE)
    assert g is zero and adv.values == (0.0,) * 4 and adv.skipped

    g, adv = build_signal(zero, SignalConfig(SignalMode.REPAIR_ONLY), SHAPE)
    assert g.repaired
    assert adv.values == grpo_advantages(g.rewards).values
    assert adv.mode is SignalMode.REPAIR_ONLY


def test_scored_group_invariants():
    with pytest.raises(SignalError):
        make_group([1], [1])
    with pytest.raises(SignalError):
        ScoredGroup(0, ("x", "y"), (frozenset(),) * 2, (0.0, 0.0), (0.0,), TARGET)
    with pytest.raises(SignalError):
        ScoredGroup(0, ("x", "y"), (frozenset(),) * 2, (0.0, 0.0), (0.0, 0.0), TARGET, repaired=True,
                    replaced_index=0, anchor_index=0)
    with pytest.raises(SignalError):
        ScoredGroup(0, ("x", "y"), (frozenset(),) * 2, (0.0, 0.0), (0.0, 0.0), TARGET, replaced_index=1)


def test_signal_config_validation():
    with pytest.raises(ValueError):
        SignalConfig(w=0)
    with pytest.raises(ValueError):
        SignalConfig(epsilon=0)
    assert SignalConfig("grpo").mode is SignalMode.GRPO


# --- properties -------------------------------------------------------------

reward_values = st.sampled_from([0.0, 0.0, 0.0, 0.5, 1.0])
struct_values = st.sampled_from([0.0, 0.01, 0.1, 0.05, 1.0])


@st.composite
def groups(draw, max_g=16):
    g = draw(st.integers(2, max_g))
    rewards = draw(st.lists(reward_values, min_size=g, max_size=g))
    structurals = [1.0 if r > 0 else draw(struct_values.filter(lambda u: u < 1.0)) for r in rewards]
    return make_group(rewards, structurals)


@given(groups(), st.sampled_from(list(SignalMode)))
def test_repair_completeness_and_support(group, mode):
    out, adv = build_signal(group, SignalConfig(mode), SHAPE)
    if mode.repairs:
        assert hit_count(out) >= 1
    if mode.contrastive:
        assert len(adv.active) in (0, 2)
        assert (len(adv.active) == 0) == adv.skipped
        if not adv.skipped:
            assert sum(adv.values) == 0.0
        has_pos = hit_count(out) >= 1
        has_neg = any(r == 0 for r in out.rewards)
        assert (len(adv.active) == 2) == (has_pos and has_neg)
    assert adv.active == tuple(i for i, v in enumerate(adv.values) if v != 0)


@given(groups())
def test_minimal_intervention(group):
    out = repair_group(group, SHAPE)
    if hit_count(group) > 0:
        assert out is group
        return
    changed = [i for i in range(group.size) if out.responses[i] != group.responses[i]]
    assert changed == [out.replaced_index]
    kept_before = sorted(r for i, r in enumerate(group.responses) if i != out.replaced_index)
    kept_after = sorted(r for i, r in enumerate(out.responses) if i != out.replaced_index)
    assert kept_before == kept_after


@given(st.lists(st.floats(0, 1), min_size=2, max_size=64))
def test_grpo_zero_sum_and_sign(rewards):
    adv = grpo_advantages(rewards, 1e-6)
    assert abs(sum(adv.values)) <= 1e-9
    mu = sum(rewards) / len(rewards)
    for r, a in zip(rewards, adv.values):
        if a > 0:
            assert r > mu
        if r > mu and not math.isclose(r, mu, abs_tol=1e-12):
            assert a > 0


@given(groups(), st.sampled_from([lambda u: 2 * u + 1, lambda u: u**3, lambda u: math.exp(u), lambda u: math.log1p(u)]))
def test_boundary_argmax_invariance(group, transform):
    if hit_count(group) == 0:
        group = repair_group(group, SHAPE)
    moved = ScoredGroup(
        group.prompt_id, group.responses, group.id_sets, group.rewards,
        tuple(transform(u) for u in group.structurals), group.target,
        group.repaired, group.replaced_index, group.anchor_index, group.items,
    )
    assert select_boundary(moved) == select_boundary(group)


@given(groups())
def test_mode_nesting(group):
    rc = build_signal(group, SignalConfig(SignalMode.RECAST), SHAPE)
    bo = build_signal(group, SignalConfig(SignalMode.BOUNDARY_ONLY), SHAPE)
    if hit_count(group) >= 1:
        assert rc[1].values == bo[1].values
    else:
        repaired = repair_group(group, SHAPE)
        ro = build_signal(group, SignalConfig(SignalMode.REPAIR_ONLY), SHAPE)
        gr = build_signal(repaired, SignalConfig(SignalMode.GRPO), SHAPE)
        assert ro[1].values == gr[1].values


@settings(max_examples=50)
@given(groups())
def test_json_round_trip(group):
    # score from real texts so that recomputation on load is exact
    texts = ["<a_3><b_5><c_7>" if r > 0 else "<a_3><b_5><c_1>" if u else "junk"
             for r, u in zip(group.rewards, group.structurals)]
    scored = score_group(4, texts, TARGET, SHAPE, items=group.items)
    out, adv = build_signal(scored, SignalConfig(SignalMode.RECAST), SHAPE)
    line = json.dumps(group_to_json(out))
    back = group_from_json(json.loads(line), SHAPE)
    assert back == out
    assert advantage_from_json(json.loads(json.dumps(advantage_to_json(adv)))) == adv


def test_advantage_vector_active_is_derived():
    adv = AdvantageVector((0.0, -1.0, 0.0, 1.0), SignalMode.RECAST)
    assert adv.active == (1, 3)
