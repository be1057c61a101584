"""Synthetic sparse-hit recommendation environment.

Each prompt has a single target item and its own table of hierarchical logits:
``p(a, b, c | q) = softmax(z_a)[a] * softmax(z_b[a])[b] * softmax(z_c[a, b])[c]``.
Everything is small enough that the full item distribution is computed exactly.

Random streams
--------------
All randomness comes from :func:`rng_stream`, a PCG64 generator seeded through
``numpy.random.SeedSequence([seed, tag, *keys])``. Tags below partition the
streams, so results depend only on the seed and the stream keys, never on call
order or worker count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sid import CatalogShape, SemanticId, parse_response, render_sid

TAG_DATASET = 0
TAG_ROLLOUT = 1
TAG_BATCH = 2
TAG_EVAL = 3

# Fixed corruption used for malformed generations: lexes to three tokens, parses to nothing.
MALFORMED_TEXT = "<a_?><b_?><c_?>"


def rng_stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(tag), *map(int, keys)])))


@dataclass(frozen=True)
class PromptSpec:
    prompt_id: int
    target: SemanticId

    @property
    def ground_truth_text(self) -> str:
        return render_sid(self.target)

    @property
    def target_set(self) -> frozenset:
        return frozenset({self.target})


@dataclass(frozen=True)
class Dataset:
    shape: CatalogShape
    prompts: tuple[PromptSpec, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.prompts)

    def target_indices(self) -> np.ndarray:
        return np.array([self.shape.flat_index(p.target) for p in self.prompts], dtype=np.int64)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            header = {"shape": list(self.shape.as_tuple()), "seed": self.seed, "num_prompts": len(self)}
            fh.write(json.dumps({"header": header}) + "\n")
            for p in self.prompts:
                row = {"prompt_id": p.prompt_id, "target": p.target.as_list(), "ground_truth": p.ground_truth_text}
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Dataset":
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        header = lines[0]["header"]
        shape = CatalogShape.parse(header["shape"])
        prompts = []
        for row in lines[1:]:
            spec = PromptSpec(int(row["prompt_id"]), SemanticId(*row["target"]))
            if not shape.contains(spec.target):
                raise ValueError(f"prompt {spec.prompt_id}: target out of bounds")
            if parse_response(row["ground_truth"], shape) != spec.target_set:
                raise ValueError(f"prompt {spec.prompt_id}: ground truth does not parse to target")
            prompts.append(spec)
        return cls(shape, tuple(prompts), int(header["seed"]))


def generate_dataset(shape: CatalogShape, num_prompts: int, seed: int) -> Dataset:
    if num_prompts < 1:
        raise ValueError("num_prompts must be >= 1")
    rng = rng_stream(seed, TAG_DATASET)
    flat = rng.integers(0, shape.size, size=num_prompts)
    prompts = tuple(PromptSpec(q, shape.unflat(i)) for q, i in enumerate(flat))
    return Dataset(shape, prompts, int(seed))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class TabularPolicy:
    """Per-prompt hierarchical categorical policy over the catalog."""

    def __init__(self, shape: CatalogShape, logits_a: np.ndarray, logits_b: np.ndarray, logits_c: np.ndarray):
        self.shape = shape
        self.logits_a = np.asarray(logits_a, dtype=np.float64)
        self.logits_b = np.asarray(logits_b, dtype=np.float64)
        self.logits_c = np.asarray(logits_c, dtype=np.float64)
        p = self.logits_a.shape[0]
        n_a, n_b, n_c = shape.as_tuple()
        if (
            self.logits_a.shape != (p, n_a)
            or self.logits_b.shape != (p, n_a, n_b)
            or self.logits_c.shape != (p, n_a, n_b, n_c)
        ):
            raise ValueError("logit tables do not match the catalog shape")

    @classmethod
    def uniform(cls, shape: CatalogShape, num_prompts: int) -> "TabularPolicy":
        n_a, n_b, n_c = shape.as_tuple()
        return cls(
            shape,
            np.zeros((num_prompts, n_a)),
            np.zeros((num_prompts, n_a, n_b)),
            np.zeros((num_prompts, n_a, n_b, n_c)),
        )

    @classmethod
    def random(cls, shape: CatalogShape, num_prompts: int, rng: np.random.Generator, scale: float = 1.0):
        n_a, n_b, n_c = shape.as_tuple()
        return cls(
            shape,
            scale * rng.standard_normal((num_prompts, n_a)),
            scale * rng.standard_normal((num_prompts, n_a, n_b)),
            scale * rng.standard_normal((num_prompts, n_a, n_b, n_c)),
        )

    @property
    def num_prompts(self) -> int:
        return self.logits_a.shape[0]

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.shape, self.logits_a.copy(), self.logits_b.copy(), self.logits_c.copy())

    # flat parameter view, in the order a | b | c
    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.logits_a.ravel(), self.logits_b.ravel(), self.logits_c.ravel()])

    def with_flat_params(self, theta: np.ndarray) -> "TabularPolicy":
        na, nb = self.logits_a.size, self.logits_b.size
        return TabularPolicy(
            self.shape,
            theta[:na].reshape(self.logits_a.shape),
            theta[na : na + nb].reshape(self.logits_b.shape),
            theta[na + nb :].reshape(self.logits_c.shape),
        )

    def level_probs(self, prompt_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            _softmax(self.logits_a[prompt_ids]),
            _softmax(self.logits_b[prompt_ids]),
            _softmax(self.logits_c[prompt_ids]),
        )

    def item_log_probs(self, prompt_ids) -> np.ndarray:
        """Log-probabilities over the flattened catalog, shape ``(..., n_a*n_b*n_c)``."""
        la = _log_softmax(self.logits_a[prompt_ids])
        lb = _log_softmax(self.logits_b[prompt_ids])
        lc = _log_softmax(self.logits_c[prompt_ids])
        full = la[..., :, None, None] + lb[..., :, :, None] + lc
        return full.reshape(full.shape[:-3] + (-1,))

    def item_distribution(self, prompt_id: int) -> np.ndarray:
        return np.exp(self.item_log_probs(prompt_id))

    def log_prob(self, prompt_id: int, sid: SemanticId) -> float:
        la = _log_softmax(self.logits_a[prompt_id])
        lb = _log_softmax(self.logits_b[prompt_id, sid.a])
        lc = _log_softmax(self.logits_c[prompt_id, sid.a, sid.b])
        return float(la[sid.a] + lb[sid.b] + lc[sid.c])

    def log_prob_items(self, prompt_id: int, items: np.ndarray) -> np.ndarray:
        """Log-probs for an ``(n, 3)`` array of triples under one prompt."""
        a, b, c = items[:, 0], items[:, 1], items[:, 2]
        la = _log_softmax(self.logits_a[prompt_id])
        lb = _log_softmax(self.logits_b[prompt_id])
        lc = _log_softmax(self.logits_c[prompt_id])
        return la[a] + lb[a, b] + lc[a, b, c]

    def sample_items(self, prompt_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral inverse-CDF sampling of ``n`` triples, returned as an ``(n, 3)`` int array.

        Consumes exactly ``rng.random((n, 3))``.
        """
        u = rng.random((n, 3))
        pa, pb, pc = self.level_probs(prompt_id)
        n_a, n_b, n_c = self.shape.as_tuple()
        a = np.minimum(np.searchsorted(np.cumsum(pa), u[:, 0], side="right"), n_a - 1)
        cb = np.cumsum(pb[a], axis=-1)
        b = np.minimum((cb <= u[:, 1:2]).sum(axis=-1), n_b - 1)
        cc = np.cumsum(pc[a, b], axis=-1)
        c = np.minimum((cc <= u[:, 2:3]).sum(axis=-1), n_c - 1)
        return np.stack([a, b, c], axis=1)

    def equals(self, other: "TabularPolicy") -> bool:
        return (
            np.array_equal(self.logits_a, other.logits_a)
            and np.array_equal(self.logits_b, other.logits_b)
            and np.array_equal(self.logits_c, other.logits_c)
        )

    def save(self, path: str | Path) -> None:
        header = np.array([self.num_prompts, *self.shape.as_tuple()], dtype=np.int64)
        np.savez(
            path,
            header=header,
            logits_a=self.logits_a.ravel(),
            logits_b=self.logits_b.ravel(),
            logits_c=self.logits_c.ravel(),
        )

    @classmethod
    def load(cls, path: str | Path) -> "TabularPolicy":
        with np.load(path) as data:
            p, n_a, n_b, n_c = (int(x) for x in data["header"])
            return cls(
                CatalogShape(n_a, n_b, n_c),
                data["logits_a"].reshape(p, n_a),
                data["logits_b"].reshape(p, n_a, n_b),
                data["logits_c"].reshape(p, n_a, n_b, n_c),
            )


@dataclass(frozen=True)
class SampledResponse:
    text: str
    id: SemanticId
    logprob_old: float
    valid: bool = True

    def parsed(self, shape: CatalogShape) -> frozenset:
        # valid responses parse to exactly their sampled triple
        return frozenset({self.id}) if self.valid else parse_response(self.text, shape)


def sample_group(
    policy: TabularPolicy,
    prompt: PromptSpec,
    G: int,
    rng: np.random.Generator,
    malform_rate: float = 0.0,
) -> list[SampledResponse]:
    """Draw G responses; consumes ``rng.random((G, 3))`` then ``rng.random(G)``."""
    if G < 2:
        raise ValueError("group size must be >= 2")
    if not 0.0 <= malform_rate < 1.0:
        raise ValueError("malform_rate must lie in [0, 1)")
    items = policy.sample_items(prompt.prompt_id, G, rng)
    corrupt = rng.random(G) < malform_rate
    logps = policy.log_prob_items(prompt.prompt_id, items)
    out = []
    for (a, b, c), lp, bad in zip(items, logps, corrupt):
        sid = SemanticId(int(a), int(b), int(c))
        text = MALFORMED_TEXT if bad else render_sid(sid)
        out.append(SampledResponse(text, sid, float(lp), not bad))
    return out

