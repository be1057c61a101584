"""Semantic IDs, the response grammar, and the ID-set parser.

A generated response is plain text in which an item is written as three
adjacent tokens ``<a_i><b_j><c_k>``. Anything else is noise.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

_TOKEN = re.compile(r"<([abc])_(\d+)>")
# Lexer used for token counting: bracketed chunks (well-formed or not) and bare words.
_LEX = re.compile(r"<[^<>\s]*>|[^\s<>]+")


@dataclass(frozen=True)
class CatalogShape:
    n_a: int
    n_b: int
    n_c: int

    def __post_init__(self):
        if min(self.n_a, self.n_b, self.n_c) < 1:
            raise ValueError(f"all level counts must be >= 1, got {self}")
        if self.size < 2:
            raise ValueError("catalog must contain at least two items")

    @property
    def size(self) -> int:
        return self.n_a * self.n_b * self.n_c

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.n_a, self.n_b, self.n_c)

    @classmethod
    def parse(cls, spec: str | Iterable[int]) -> "CatalogShape":
        """Build from ``"8,8,8"`` or any 3-element iterable."""
        if isinstance(spec, str):
            spec = [int(x) for x in spec.replace("x", ",").split(",")]
        n_a, n_b, n_c = spec
        return cls(int(n_a), int(n_b), int(n_c))

    def contains(self, sid: "SemanticId") -> bool:
        return 0 <= sid.a < self.n_a and 0 <= sid.b < self.n_b and 0 <= sid.c < self.n_c

    def flat_index(self, sid: "SemanticId") -> int:
        return (sid.a * self.n_b + sid.b) * self.n_c + sid.c

    def unflat(self, index: int) -> "SemanticId":
        ab, c = divmod(int(index), self.n_c)
        a, b = divmod(ab, self.n_b)
        return SemanticId(a, b, c)

    def all_ids(self) -> list["SemanticId"]:
        return [self.unflat(i) for i in range(self.size)]


@dataclass(frozen=True, order=True)
class SemanticId:
    a: int
    b: int
    c: int

    def __str__(self) -> str:
        return render_sid(self)

    def as_list(self) -> list[int]:
        return [self.a, self.b, self.c]


IdSet = frozenset  # frozenset[SemanticId]


def render_sid(sid: SemanticId) -> str:
    return f"<a_{sid.a}><b_{sid.b}><c_{sid.c}>"


def render_ids(ids: Iterable[SemanticId]) -> str:
    """Concatenate canonical renderings in sorted order."""
    return "".join(render_sid(s) for s in sorted(ids))


def token_length(text: str) -> int:
    return len(_LEX.findall(text))


def parse_response(text: str, shape: CatalogShape) -> frozenset[SemanticId]:
    """Extract every well-formed, in-bounds ID from ``text``.

    Grammar tokens that touch each other form a run; inside a run a left-to-right
    scan takes any ``a, b, c`` window as one ID and consumes it. Out-of-bounds
    triples are consumed and dropped. Never raises.
    """
    found: set[SemanticId] = set()
    run: list[tuple[str, int]] = []
    last_end = -1
    for m in _TOKEN.finditer(text):
        if m.start() != last_end and run:
            _scan_run(run, shape, found)
            run = []
        run.append((m.group(1), int(m.group(2))))
        last_end = m.end()
    if run:
        _scan_run(run, shape, found)
    return frozenset(found)


def _scan_run(run: list[tuple[str, int]], shape: CatalogShape, found: set[SemanticId]) -> None:
    i = 0
    while i + 2 < len(run):
        (la, va), (lb, vb), (lc, vc) = run[i], run[i + 1], run[i + 2]
        if (la, lb, lc) == ("a", "b", "c"):
            sid = SemanticId(va, vb, vc)
            if shape.contains(sid):
                found.add(sid)
            i += 3
        else:
            i += 1
