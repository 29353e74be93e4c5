"""Sentence orders and the flat decoder sequence with hierarchical positions.

A paragraph of ``T`` sentences generated in order ``[2, 1]`` becomes::

    <BOS> <B-2> w2 w3 <E-2> <B-1> w1 <E-1> <EOP>
    global  0  2  2  2  2  1  1  1  11
    local   0  1  2  3  4  1  2  3   1
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import (BOS_ID, EOP_ID, LMAX, NUM_RESERVED, TMAX, UNK_ID, Paragraph, begin_id, begin_index,
                     end_id, end_index)

EOP_GLOBAL = TMAX + 1


class GrammarError(ValueError):
    """Token sequence violates the ``<B-t> body <E-t>`` segment grammar."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"position {position}: {message}")


@dataclass(frozen=True)
class Permutation:
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(t) for t in self.order))
        if not self.order or sorted(self.order) != list(range(1, len(self.order) + 1)):
            raise ValueError(f"{list(self.order)} is not a permutation of 1..{len(self.order)}")

    @classmethod
    def identity(cls, T: int) -> "Permutation":
        return cls(tuple(range(1, T + 1)))

    @property
    def T(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)


@dataclass
class DecoderSequence:
    tokens: list[int] = field(default_factory=list)
    global_pos: list[int] = field(default_factory=list)
    local_pos: list[int] = field(default_factory=list)
    segment_spans: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def append(self, token: int, g: int, l: int) -> None:
        self.tokens.append(token)
        self.global_pos.append(g)
        self.local_pos.append(l)

    def prefix(self, n: int) -> "DecoderSequence":
        spans = [s for s in self.segment_spans if s[2] <= n]
        return DecoderSequence(self.tokens[:n], self.global_pos[:n], self.local_pos[:n], spans)


def _check_T(T: int) -> None:
    if not 1 <= T <= TMAX:
        raise ValueError(f"sentence count {T} outside 1..{TMAX}")


def enumerate_orders(T: int) -> list[Permutation]:
    """All ``T!`` orders in lexicographic order."""
    _check_T(T)
    return [Permutation(p) for p in itertools.permutations(range(1, T + 1))]


def sample_order(T: int, rng: np.random.Generator) -> Permutation:
    """Uniform draw from the ``T!`` orders (Fisher-Yates)."""
    _check_T(T)
    order = list(range(1, T + 1))
    for i in range(T - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return Permutation(order)


def validate_paragraph(p: Paragraph) -> None:
    _check_T(p.T)
    for t, body in enumerate(p.sentences, 1):
        if not body:
            raise ValueError(f"sentence {t} is empty")
        if len(body) + 2 > LMAX:
            raise ValueError(f"sentence {t} needs {len(body) + 2} local positions, table holds {LMAX}")
        if any(tok < NUM_RESERVED and tok != UNK_ID for tok in body):
            raise ValueError(f"sentence {t} contains a reserved id")


def build_decoder_sequence(p: Paragraph, order: Permutation | Sequence[int]) -> DecoderSequence:
    if not isinstance(order, Permutation):
        order = Permutation(tuple(order))
    if order.T != p.T:
        raise ValueError(f"order covers {order.T} sentences but the paragraph has {p.T}")
    seq = DecoderSequence()
    seq.append(BOS_ID, 0, 0)
    for t in order:
        body = p.sentences[t - 1]
        start = len(seq)
        seq.append(begin_id(t), t, 1)
        for i, tok in enumerate(body, 2):
            seq.append(tok, t, i)
        seq.append(end_id(t), t, len(body) + 2)
        seq.segment_spans.append((t, start, len(seq)))
    seq.append(EOP_ID, EOP_GLOBAL, 1)
    return seq


def parse_segments(tokens: Sequence[int]) -> list[tuple[int, list[int]]]:
    """Segments ``(index, body)`` in the order they appear.

    A leading ``<BOS>`` is skipped; parsing stops at ``<EOP>``.
    """
    segments: list[tuple[int, list[int]]] = []
    seen: set[int] = set()
    current: int | None = None
    body: list[int] = []
    start = 1 if tokens and tokens[0] == BOS_ID else 0
    for pos in range(start, len(tokens)):
        tok = tokens[pos]
        b, e = begin_index(tok), end_index(tok)
        if tok == EOP_ID:
            if current is not None:
                raise GrammarError(f"<EOP> inside unclosed sentence {current}", pos)
            return segments
        if b is not None:
            if current is not None:
                raise GrammarError(f"<B-{b}> opened before <E-{current}>", pos)
            if b in seen:
                raise GrammarError(f"duplicate sentence index {b}", pos)
            current, body = b, []
        elif e is not None:
            if current != e:
                raise GrammarError(f"<E-{e}> does not close the open segment ({current})", pos)
            seen.add(e)
            segments.append((e, body))
            current = None
        elif tok == BOS_ID:
            raise GrammarError("<BOS> inside the sequence", pos)
        else:
            if current is None:
                raise GrammarError("text token outside any sentence", pos)
            body.append(tok)
    if current is not None:
        raise GrammarError(f"sentence {current} never closed", len(tokens))
    return segments


def parse_and_reorder(tokens: Sequence[int]) -> list[list[int]]:
    """Sentence bodies sorted by ascending sentence index (gaps allowed)."""
    return [body for _, body in sorted(parse_segments(tokens), key=lambda s: s[0])]


def num_orders(T: int) -> int:
    return math.factorial(T)
