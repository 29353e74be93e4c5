"""Sentence-indexed decoding.

A candidate is produced by a small state machine:

1. start with no generated sentence indices;
2. pick a ``<B-t>`` token (sampled for the first sentence, argmax over the
   remaining indices and ``<EOP>`` afterwards), or stop on ``<EOP>``;
3. generate the body of sentence ``t`` with a token strategy until ``<E-t>``;
4. record ``t`` and go back to 2.

Candidates are independent once their first index is fixed, so they can be
decoded on separate workers; each owns an RNG seeded with ``seed ^ ordinal``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOP_ID, LMAX, NUM_RESERVED, TMAX, begin_id, begin_index, end_id
from .model import Cache, Encoded, Inference, Seq2Seq
from .sequence import EOP_GLOBAL, DecoderSequence, parse_and_reorder
from .tensor import log_softmax_array

log = logging.getLogger(__name__)

STRATEGIES = ("beam", "topk", "nucleus", "greedy")

AWAITING_INDEX, IN_SENTENCE, FINISHED = "awaiting-index", "in-sentence", "finished"


class DecodeConfigError(ValueError):
    pass


@dataclass
class DecodeConfig:
    strategy: str = "beam"
    beam_width: int = 3
    top_k: int = 10
    top_p: float = 0.9
    num_candidates: int = 3
    max_sentence_tokens: int = LMAX - 2
    max_sentences: int = TMAX
    seed: int = 0
    temperature: float = 1.0
    uniform_first: bool = False
    force_order: tuple[int, ...] | None = None
    threads: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DecodeConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not 0 < self.top_p <= 1:
            raise DecodeConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 1 or self.beam_width < 1 or self.num_candidates < 1:
            raise DecodeConfigError("top_k, beam_width and num_candidates must be >= 1")
        if not 1 <= self.max_sentence_tokens <= LMAX - 2:
            raise DecodeConfigError(f"max_sentence_tokens must be in 1..{LMAX - 2}")
        if not 1 <= self.max_sentences <= TMAX:
            raise DecodeConfigError(f"max_sentences must be in 1..{TMAX}")
        if self.temperature <= 0:
            raise DecodeConfigError(f"temperature must be positive, got {self.temperature}")
        if self.force_order is not None:
            order = tuple(int(t) for t in self.force_order)
            if not order or len(set(order)) != len(order) or not all(1 <= t <= self.max_sentences for t in order):
                raise DecodeConfigError(f"force_order {list(order)} must be distinct indices in 1..{self.max_sentences}")
            self.force_order = order


@dataclass
class Candidate:
    sentences: list[list[int]]
    order: list[int]
    tokens: list[int]
    token_logprobs: list[float]
    truncated: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.token_logprobs)

    @property
    def score(self) -> float:
        if not self.token_logprobs:
            raise ValueError("candidate has no scored tokens")
        return sum(self.token_logprobs) / len(self.token_logprobs)


@dataclass
class DecodeState:
    """Progress of one candidate through the index/sentence phases."""

    available: set[int]
    seq: DecoderSequence = field(default_factory=DecoderSequence)
    generated: list[int] = field(default_factory=list)   # indices in generation order (the set I)
    segments: list[tuple[int, list[int]]] = field(default_factory=list)
    current: int | None = None
    logprobs: list[float] = field(default_factory=list)
    truncated: bool = False
    phase: str = AWAITING_INDEX
    cache: Cache | None = None
    logits: np.ndarray | None = None   # next-token logits after the last emitted token

    @property
    def indices(self) -> set[int]:
        return set(self.generated)

    @property
    def remaining(self) -> set[int]:
        return self.available - self.indices


# ---------------------------------------------------------------------------
# distributions


def masked_distribution(logits: np.ndarray, allowed: Sequence[int], temperature: float = 1.0) -> np.ndarray:
    """Softmax restricted to ``allowed`` ids; every other entry is exactly 0."""
    allowed = np.asarray(allowed, dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("no allowed tokens")
    z = logits[allowed].astype(np.float64) / temperature
    z = np.exp(z - z.max())
    probs = np.zeros(logits.shape[0])
    probs[allowed] = z / z.sum()
    return probs


def raw_logprob(logits: np.ndarray, token: int) -> float:
    return float(log_softmax_array(logits.astype(np.float64))[token])


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def select_first_index(logits: np.ndarray, available: set[int], rng: np.random.Generator,
                       uniform: bool = False) -> int:
    """Sample a ``<B-t>`` id over ``available`` indices from the renormalised model distribution."""
    if not available:
        raise ValueError("no sentence index available")
    allowed = [begin_id(t) for t in sorted(available)]
    if uniform:
        return allowed[int(rng.integers(len(allowed)))]
    return _sample(masked_distribution(logits, allowed), rng)


class FirstIndexPicker:
    """Draws first indices for the K candidates of one request without replacement.

    Once every index has been used, availability resets (sampling with
    replacement from then on) and :attr:`with_replacement` is set.
    """

    def __init__(self, indices: Sequence[int], uniform: bool = False):
        self.indices = set(indices)
        self.used: set[int] = set()
        self.uniform = uniform
        self.with_replacement = False

    def draw(self, logits: np.ndarray, rng: np.random.Generator) -> tuple[int, bool]:
        available = self.indices - self.used
        if not available:
            self.with_replacement = True
            available = set(self.indices)
        token = select_first_index(logits, available, rng, self.uniform)
        self.used.add(begin_index(token))
        return token, self.with_replacement


def select_next_index(logits: np.ndarray, remaining: set[int]) -> int:
    """Argmax over ``<B-t>`` for remaining ``t`` plus ``<EOP>``; ties go to the lowest index."""
    if not remaining:
        return EOP_ID
    allowed = [begin_id(t) for t in sorted(remaining)] + [EOP_ID]
    scores = logits[allowed]
    return allowed[int(np.argmax(scores))]


def sentence_vocabulary(vocab_size: int, t: int) -> np.ndarray:
    """Ids allowed inside sentence ``t``: every normal token plus ``<E-t>``."""
    return np.concatenate([np.arange(NUM_RESERVED, vocab_size), [end_id(t)]]).astype(np.int64)


def token_greedy(logits: np.ndarray, allowed: np.ndarray) -> int:
    return int(allowed[np.argmax(logits[allowed])])


def token_topk(logits: np.ndarray, allowed: np.ndarray, k: int, rng: np.random.Generator,
               temperature: float = 1.0) -> int:
    if k < 1:
        raise DecodeConfigError(f"top-k needs k >= 1, got {k}")
    scores = logits[allowed]
    keep = allowed[np.argsort(-scores, kind="stable")[:k]]
    return int(keep[_sample(masked_distribution(logits, keep, temperature)[keep], rng)])


def token_nucleus(logits: np.ndarray, allowed: np.ndarray, p: float, rng: np.random.Generator,
                  temperature: float = 1.0) -> int:
    if not 0 < p <= 1:
        raise DecodeConfigError(f"nucleus needs 0 < p <= 1, got {p}")
    probs = masked_distribution(logits, allowed, temperature)[allowed]
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p - 1e-12)) + 1
    keep = order[:min(cut, len(order))]
    sub = probs[keep] / probs[keep].sum()
    return int(allowed[keep[_sample(sub, rng)]])


# ---------------------------------------------------------------------------
# sentence generation


def _emit(inf: Inference, enc: Encoded, state: DecodeState, token: int, g: int, l: int) -> None:
    state.logprobs.append(raw_logprob(state.logits, token))
    state.seq.append(token, g, l)
    state.logits, state.cache = inf.step(enc, state.cache, token, g, l)


def _open_sentence(inf, enc, state: DecodeState, token: int) -> None:
    t = begin_index(token)
    _emit(inf, enc, state, token, t, 1)
    state.current = t
    state.phase = IN_SENTENCE


def generate_sentence(inf: Inference, enc: Encoded, state: DecodeState, cfg: DecodeConfig,
                      rng: np.random.Generator) -> tuple[int, list[int]]:
    """Emit the body and ``<E-t>`` of the open sentence; returns ``(t, body)``."""
    if state.phase != IN_SENTENCE:
        raise RuntimeError(f"generate_sentence called in phase {state.phase}")
    t = state.current
    allowed = sentence_vocabulary(inf.cfg.vocab_size, t)
    cap = cfg.max_sentence_tokens
    if cfg.strategy == "beam":
        body = _beam_body(inf, enc, state, t, allowed, cap, cfg.beam_width)
    else:
        body = []
        while True:
            if len(body) >= cap:
                state.truncated = True
                tok = end_id(t)
            elif cfg.strategy == "topk":
                tok = token_topk(state.logits, allowed, cfg.top_k, rng, cfg.temperature)
            elif cfg.strategy == "nucleus":
                tok = token_nucleus(state.logits, allowed, cfg.top_p, rng, cfg.temperature)
            else:
                tok = token_greedy(state.logits, allowed)
            if tok == end_id(t):
                break
            _emit(inf, enc, state, tok, t, len(body) + 2)
            body.append(tok)
    _emit(inf, enc, state, end_id(t), t, len(body) + 2)
    state.segments.append((t, body))
    state.generated.append(t)
    state.current = None
    state.phase = AWAITING_INDEX
    return t, body


@dataclass
class _Beam:
    score: float
    body: list[int]
    logprobs: list[float]
    cache: Cache
    logits: np.ndarray
    truncated: bool = False


def _beam_body(inf, enc, state: DecodeState, t: int, allowed: np.ndarray, cap: int, width: int) -> list[int]:
    """Beam search over one sentence body; commits the best finished hypothesis to ``state``.

    The closing ``<E-t>`` is left for the caller to emit.
    """
    eos = end_id(t)
    alive = [_Beam(0.0, [], [], state.cache, state.logits)]
    finished: list[_Beam] = []
    while alive:
        expansions = []
        for bi, beam in enumerate(alive):
            if len(beam.body) >= cap:
                expansions.append((beam.score, bi, eos))
                continue
            lp = np.log(np.maximum(masked_distribution(beam.logits, allowed)[allowed], 1e-300))
            top = np.argsort(-lp, kind="stable")[:width]
            expansions.extend((beam.score + lp[j], bi, int(allowed[j])) for j in top)
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        next_alive = []
        for score, bi, tok in expansions[:width]:
            beam = alive[bi]
            if tok == eos:
                finished.append(_Beam(score, beam.body, beam.logprobs, beam.cache, beam.logits,
                                      truncated=len(beam.body) >= cap))
            else:
                logits, cache = inf.step(enc, beam.cache, tok, t, len(beam.body) + 2)
                next_alive.append(_Beam(score, beam.body + [tok], beam.logprobs + [raw_logprob(beam.logits, tok)],
                                        cache, logits))
        if len(finished) >= width:
            break
        if finished and next_alive and max(b.score for b in finished) >= max(b.score for b in next_alive):
            break
        alive = next_alive
    best = max(finished, key=lambda b: b.score)
    for i, tok in enumerate(best.body):
        state.seq.append(tok, t, i + 2)
    state.logprobs.extend(best.logprobs)
    state.cache, state.logits = best.cache, best.logits
    state.truncated = state.truncated or best.truncated
    return list(best.body)


# ---------------------------------------------------------------------------
# paragraph decoding


def rank_candidates(cands: Sequence[Candidate]) -> list[Candidate]:
    """Stable sort by mean token log-probability, best first."""
    for c in cands:
        if c.length == 0:
            raise ValueError("candidate with L = 0 cannot be ranked")
    return sorted(cands, key=lambda c: -c.score)


def _finish_candidate(state: DecodeState, meta: dict) -> Candidate:
    return Candidate(
        sentences=parse_and_reorder(state.seq.tokens),
        order=list(state.generated),
        tokens=list(state.seq.tokens),
        token_logprobs=list(state.logprobs),
        truncated=state.truncated,
        metadata=dict(meta, truncated=state.truncated),
    )


def run_candidate(inf: Inference, enc: Encoded, start: tuple[np.ndarray, Cache], first_token: int,
                  cfg: DecodeConfig, rng: np.random.Generator, meta: dict | None = None) -> Candidate:
    """Decode one candidate whose first ``<B-t>`` is already chosen."""
    logits, cache = start
    state = DecodeState(available=set(range(1, cfg.max_sentences + 1)))
    state.seq.append(BOS_ID, 0, 0)
    state.logits, state.cache = logits, cache
    forced = list(cfg.force_order) if cfg.force_order is not None else None
    token = first_token
    while True:
        _open_sentence(inf, enc, state, token)
        generate_sentence(inf, enc, state, cfg, rng)
        if forced is not None:
            pos = len(state.generated)
            token = begin_id(forced[pos]) if pos < len(forced) else EOP_ID
        else:
            token = select_next_index(state.logits, state.remaining)
        if token == EOP_ID:
            _emit(inf, enc, state, EOP_ID, EOP_GLOBAL, 1)
            state.phase = FINISHED
            break
    return _finish_candidate(state, meta or {})


def decode_paragraph(model: Seq2Seq | Inference, source: Sequence[int], cfg: DecodeConfig) -> list[Candidate]:
    """K ranked candidates for ``source``."""
    inf = model if isinstance(model, Inference) else Inference(model)
    enc = inf.encode(source)
    start = inf.step(enc, inf.empty_cache(), BOS_ID, 0, 0)
    K = cfg.num_candidates
    rngs = [np.random.default_rng(cfg.seed ^ k) for k in range(K)]
    picker = FirstIndexPicker(range(1, cfg.max_sentences + 1), cfg.uniform_first)
    firsts, metas = [], []
    for k in range(K):
        if cfg.force_order is not None:
            firsts.append(begin_id(cfg.force_order[0]))
            metas.append({"first_index": "forced", "first_index_with_replacement": False})
        else:
            tok, replaced = picker.draw(start[0], rngs[k])
            firsts.append(tok)
            metas.append({"first_index": "uniform" if cfg.uniform_first else "model",
                          "first_index_with_replacement": replaced})

    def work(k: int) -> Candidate:
        return run_candidate(inf, enc, start, firsts[k], cfg, rngs[k], metas[k])

    if cfg.threads > 1 and K > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            cands = list(pool.map(work, range(K)))
    else:
        cands = [work(k) for k in range(K)]
    return rank_candidates(cands)


def fixed_order_beam(model: Seq2Seq | Inference, source: Sequence[int], order: Sequence[int], beam_width: int,
                     num_candidates: int, max_sentence_tokens: int = LMAX - 2) -> list[Candidate]:
    """Paragraph-level beam search with the sentence order held fixed.

    This is the conventional left-to-right baseline: index tokens are forced
    and the top ``num_candidates`` finished beams are returned, ranked.
    """
    inf = model if isinstance(model, Inference) else Inference(model)
    enc = inf.encode(source)
    order = list(order)
    width = max(beam_width, num_candidates)
    logits, cache = inf.step(enc, inf.empty_cache(), BOS_ID, 0, 0)

    @dataclass
    class Hyp:
        score: float
        seq: DecoderSequence
        logprobs: list[float]
        cache: Cache
        logits: np.ndarray
        sent: int           # position in ``order`` of the open sentence, -1 before the first
        body: int           # body tokens so far in the open sentence, None at a boundary
        truncated: bool = False

    def extend(h: Hyp, tok: int, g: int, l: int, score: float, sent: int, body) -> Hyp:
        lg, ch = inf.step(enc, h.cache, tok, g, l)
        seq = DecoderSequence(h.seq.tokens + [tok], h.seq.global_pos + [g], h.seq.local_pos + [l])
        return Hyp(score, seq, h.logprobs + [raw_logprob(h.logits, tok)], ch, lg, sent, body, h.truncated)

    bos = DecoderSequence([BOS_ID], [0], [0])
    alive = [Hyp(0.0, bos, [], cache, logits, -1, None)]
    finished: list[Hyp] = []
    while alive and len(finished) < width:
        expansions = []
        for h in alive:
            if h.body is None:
                nxt = h.sent + 1
                if nxt < len(order):
                    t = order[nxt]
                    expansions.append((h.score, h, begin_id(t), t, 1, nxt, 0))
                else:
                    expansions.append((h.score, h, EOP_ID, EOP_GLOBAL, 1, nxt, None))
                continue
            t = order[h.sent]
            allowed = sentence_vocabulary(inf.cfg.vocab_size, t)
            if h.body >= max_sentence_tokens:
                h.truncated = True
                expansions.append((h.score, h, end_id(t), t, h.body + 2, h.sent, None))
                continue
            lp = np.log(np.maximum(masked_distribution(h.logits, allowed)[allowed], 1e-300))
            for j in np.argsort(-lp, kind="stable")[:width]:
                tok = int(allowed[j])
                body = None if tok == end_id(t) else h.body + 1
                expansions.append((h.score + lp[j], h, tok, t, h.body + 2, h.sent, body))
        expansions.sort(key=lambda e: -e[0])
        alive = []
        for score, h, tok, g, l, sent, body in expansions[:width]:
            if tok == EOP_ID:
                h2 = Hyp(score, DecoderSequence(h.seq.tokens + [tok], h.seq.global_pos + [g], h.seq.local_pos + [l]),
                         h.logprobs + [raw_logprob(h.logits, tok)], h.cache, h.logits, sent, None, h.truncated)
                finished.append(h2)
            else:
                alive.append(extend(h, tok, g, l, score, sent, body))
    cands = []
    for h in sorted(finished, key=lambda h: -h.score)[:width]:
        cands.append(Candidate(
            sentences=parse_and_reorder(h.seq.tokens),
            order=order,
            tokens=h.seq.tokens,
            token_logprobs=h.logprobs,
            truncated=h.truncated,
            metadata={"first_index": "forced", "baseline": "fixed_order_beam", "truncated": h.truncated},
        ))
    return rank_candidates(cands)[:num_candidates]
