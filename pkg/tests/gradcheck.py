"""Finite-difference oracle for the training objective, independent of the trainer's backward pass."""
import numpy as np

from recast_lab.env import TabularPolicy, generate_dataset
from recast_lab.signals import AdvantageVector, SignalMode
from recast_lab.trainer import TrainConfig, TrainState, collect_batch


def _probs(z):
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prompt_objective(za, zb, zc, ra, rb, rc, terms, beta, G):
    """1/G * sum A_i log p(x_i) - beta * KL(p || p_ref) for one prompt, from raw logits."""
    p = _probs(za)[:, None, None] * _probs(zb)[:, :, None] * _probs(zc)
    pr = _probs(ra)[:, None, None] * _probs(rb)[:, :, None] * _probs(rc)
    pg = sum(A * np.log(p[a, b, c]) for A, (a, b, c) in terms) / G
    kl = np.sum(p * np.log(p / pr))
    return pg - beta * kl


def fd_gradient(policy, ref, batch, beta, h=1e-5):
    """Central differences of the batch objective, one prompt's terms at a time."""
    B = len(batch)
    out = [np.zeros_like(policy.logits_a), np.zeros_like(policy.logits_b), np.zeros_like(policy.logits_c)]
    for group, adv in batch:
        q = group.prompt_id
        terms = [(adv.values[i], (group.items[i].a, group.items[i].b, group.items[i].c)) for i in range(group.size)]
        params = [policy.logits_a[q].copy(), policy.logits_b[q].copy(), policy.logits_c[q].copy()]
        refs = (ref.logits_a[q], ref.logits_b[q], ref.logits_c[q])
        for level, table in enumerate(params):
            it = np.nditer(table, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = table[idx]
                table[idx] = orig + h
                up = prompt_objective(*params, *refs, terms, beta, group.size)
                table[idx] = orig - h
                down = prompt_objective(*params, *refs, terms, beta, group.size)
                table[idx] = orig
                out[level][(q, *idx)] += (up - down) / (2 * h) / B
    return out


def random_instance(seed, shape, G=8, beta=0.0, num_prompts=6, batch_prompts=4, dense=False):
    """A random (state, batch, config) triple.

    With ``dense`` the advantages are random normals (some zeroed) instead of
    signals built by the recast pipeline.
    """
    rng = np.random.default_rng(seed)
    ds = generate_dataset(shape, num_prompts, seed)
    policy = TabularPolicy.random(shape, num_prompts, rng, scale=0.7)
    ref = TabularPolicy.random(shape, num_prompts, rng, scale=0.7)
    state = TrainState(policy, policy.copy(), ref, step=seed)
    config = TrainConfig(mode="recast", G=G, beta=beta, prompts_per_step=batch_prompts, seed=seed)
    _, batch = collect_batch(state, ds, config)
    if dense:
        new = []
        for group, _ in batch:
            vals = rng.standard_normal(group.size)
            vals[rng.random(group.size) < 0.3] = 0.0
            new.append((group, AdvantageVector(tuple(vals), SignalMode.GRPO)))
        batch = new
    return state, batch, config
