"""Accuracy and diversity metrics over pre-tokenised hypotheses.

All functions take token lists (lists of strings); tokenisation is the
caller's business.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import permutations
from typing import Sequence

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _check_order(N: int) -> None:
    if not 1 <= N <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {N}")


def _match_counts(hyp: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    """Clipped matches and total ``n``-grams of ``hyp`` against one or more references."""
    counts = Counter(ngrams(hyp, n))
    max_ref: Counter = Counter()
    for ref in refs:
        for g, c in Counter(ngrams(ref, n)).items():
            if c > max_ref[g]:
                max_ref[g] = c
    matched = sum(min(c, max_ref[g]) for g, c in counts.items())
    return matched, max(len(hyp) - n + 1, 0)


def _closest_ref_len(hyp_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / hyp_len))


def bleu_corpus(hyps: Sequence[Tokens], refs: Sequence[Tokens], N: int = 4) -> float:
    """Corpus BLEU-N: clipped n-gram counts pooled over the corpus, uniform weights, brevity penalty."""
    _check_order(N)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    matched = [0] * N
    total = [0] * N
    for hyp, ref in zip(hyps, refs):
        for n in range(1, N + 1):
            m, t = _match_counts(hyp, [ref], n)
            matched[n - 1] += m
            total[n - 1] += t
    if any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / N
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    return brevity_penalty(c, r) * math.exp(log_p)


def bleu_sentence(hyp: Tokens, ref: Tokens | Sequence[Tokens], N: int = 4, smoothing: bool = True,
                  multi_ref: bool = False) -> float:
    """Sentence BLEU-N.

    With ``smoothing`` a zero-match order ``n`` contributes precision
    ``1 / (total_n + 1)`` instead of 0. ``multi_ref`` treats ``ref`` as a list
    of references (counts clipped by the max over references).
    """
    _check_order(N)
    if len(hyp) == 0:
        return 0.0
    refs = list(ref) if multi_ref else [ref]
    log_p = 0.0
    for n in range(1, N + 1):
        m, t = _match_counts(hyp, refs, n)
        if m == 0:
            if not smoothing:
                return 0.0
            p = 1.0 / (t + 1)
        else:
            p = m / t
        log_p += math.log(p)
    return brevity_penalty(len(hyp), _closest_ref_len(len(hyp), refs)) * math.exp(log_p / N)


def oracle_select(hyps: Sequence[Tokens], ref: Tokens, N: int = 4) -> int:
    """Index of the best hypothesis by sentence BLEU-N (unsmoothed first, smoothed as tie-break)."""
    keys = [(bleu_sentence(h, ref, N, smoothing=False), bleu_sentence(h, ref, N)) for h in hyps]
    return max(range(len(hyps)), key=lambda i: (keys[i], -i))


def oracle_metric(groups: Sequence[tuple[Sequence[Tokens], Tokens]], N: int = 4) -> float:
    """Corpus BLEU-N over the per-source best-of-K hypotheses."""
    if not groups:
        raise ValueError("empty corpus")
    chosen, refs = [], []
    for hyps, ref in groups:
        if not hyps:
            raise ValueError("group with no hypotheses")
        chosen.append(hyps[oracle_select(hyps, ref, N)])
        refs.append(ref)
    return bleu_corpus(chosen, refs, N)


def top1_metric(groups: Sequence[tuple[Sequence[Tokens], Tokens]], N: int = 4) -> float:
    return bleu_corpus([hyps[0] for hyps, _ in groups], [ref for _, ref in groups], N)


def kgram_counts(texts: Sequence[Tokens], k: int) -> Counter:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    counts: Counter = Counter()
    for text in texts:
        counts.update(ngrams(text, k))
    return counts


def distinct_k(texts: Sequence[Tokens], k: int) -> float:
    """Unique k-grams over total k-grams, pooled over ``texts``; 0.0 when there are none."""
    counts = kgram_counts(texts, k)
    total = sum(counts.values())
    return len(counts) / total if total else 0.0


def entropy_k(texts: Sequence[Tokens], k: int) -> float:
    """Shannon entropy (bits) of the pooled k-gram distribution; 0.0 when there are none."""
    counts = kgram_counts(texts, k)
    total = sum(counts.values())
    if not total:
        return 0.0
    return -sum(c / total * math.log2(c / total) for c in counts.values())


def self_bleu(group: Sequence[Tokens], N: int = 4, mode: str = "pairwise") -> float | None:
    """Mean sentence BLEU among one source's hypotheses; ``None`` when K < 2.

    ``pairwise`` averages over ordered pairs ``(i, j), i != j`` with ``j`` as
    reference; ``one_vs_rest`` scores each hypothesis against all others.
    """
    K = len(group)
    if K < 2:
        return None
    if mode == "pairwise":
        scores = [bleu_sentence(group[i], group[j], N) for i, j in permutations(range(K), 2)]
    elif mode == "one_vs_rest":
        scores = [bleu_sentence(group[i], [group[j] for j in range(K) if j != i], N, multi_ref=True)
                  for i in range(K)]
    else:
        raise ValueError(f"unknown self-BLEU mode {mode!r}")
    return sum(scores) / len(scores)


def corpus_self_bleu(groups: Sequence[Sequence[Tokens]], N: int = 4, mode: str = "pairwise") -> float | None:
    vals = [v for v in (self_bleu(g, N, mode) for g in groups) if v is not None]
    return sum(vals) / len(vals) if vals else None


@dataclass
class MetricReport:
    scalars: dict[str, float | None]
    per_source: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.scalars, "per_source": self.per_source, "config": self.config}

    def table(self) -> str:
        width = max(len(k) for k in self.scalars)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  ------"]
        for k, v in self.scalars.items():
            lines.append(f"{k:<{width}}  {'n/a' if v is None else f'{v:.4f}'}")
        return "\n".join(lines)


def evaluate_groups(groups: Sequence[tuple[Sequence[Tokens], Tokens]], self_bleu_mode: str = "pairwise",
                    config: dict | None = None) -> MetricReport:
    """Full metric family: Top-1 BLEU-1..4, Oracle BLEU-4, Distinct-2/3, Entropy-1..4, Self-BLEU-3/4."""
    if not groups:
        raise ValueError("no hypothesis groups")
    texts = [h for hyps, _ in groups for h in hyps]
    scalars: dict[str, float | None] = {}
    for n in range(1, 5):
        scalars[f"top1_bleu_{n}"] = top1_metric(groups, n)
    scalars["oracle_bleu_4"] = oracle_metric(groups, 4)
    for k in (2, 3):
        scalars[f"distinct_{k}"] = distinct_k(texts, k)
    for k in range(1, 5):
        scalars[f"entropy_{k}"] = entropy_k(texts, k)
    for n in (3, 4):
        scalars[f"self_bleu_{n}"] = corpus_self_bleu([hyps for hyps, _ in groups], n, self_bleu_mode)
    per_source = []
    for i, (hyps, ref) in enumerate(groups):
        per_source.append({
            "source": i,
            "top1_bleu_4": bleu_sentence(hyps[0], ref, 4),
            "oracle_index": oracle_select(hyps, ref, 4),
            "self_bleu_4": self_bleu(hyps, 4, self_bleu_mode),
        })
    return MetricReport(scalars, per_source, dict(config or {}, self_bleu_mode=self_bleu_mode))
