"""Slow, loop-based metric references written without the library's helpers."""

import math


def bf_grams(toks, n):
    out = []
    for i in range(len(toks) - n + 1):
        out.append(" ".join(toks[i:i + n]))
    return out


def bf_count(items, x):
    c = 0
    for y in items:
        if y == x:
            c += 1
    return c


def bf_clipped(hyp, ref, n):
    hg, rg = bf_grams(hyp, n), bf_grams(ref, n)
    seen, m = [], 0
    for g in hg:
        if g not in seen:
            seen.append(g)
            m += min(bf_count(hg, g), bf_count(rg, g))
    return m, len(hg)


def bf_bleu_sentence(hyp, ref, N=4):
    if not hyp:
        return 0.0
    logs = 0.0
    for n in range(1, N + 1):
        m, t = bf_clipped(hyp, ref, n)
        logs += math.log(m / t if m else 1.0 / (t + 1))
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1 - len(ref) / len(hyp))
    return bp * math.exp(logs / N)


def bf_bleu_corpus(hyps, refs, N=4):
    ms, ts = [0] * N, [0] * N
    for h, r in zip(hyps, refs):
        for n in range(1, N + 1):
            m, t = bf_clipped(h, r, n)
            ms[n - 1] += m
            ts[n - 1] += t
    if 0 in ms:
        return 0.0
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(m / t) for m, t in zip(ms, ts)) / N)


def bf_distinct(texts, k):
    grams = [g for t in texts for g in bf_grams(t, k)]
    uniq = []
    for g in grams:
        if g not in uniq:
            uniq.append(g)
    return len(uniq) / len(grams) if grams else 0.0


def bf_entropy(texts, k):
    grams = [g for t in texts for g in bf_grams(t, k)]
    h = 0.0
    for g in sorted(set(grams)):
        p = bf_count(grams, g) / len(grams)
        h -= p * math.log(p, 2)
    return h


def bf_self_bleu(group, N=4):
    vals = []
    for i in range(len(group)):
        for j in range(len(group)):
            if i != j:
                vals.append(bf_bleu_sentence(group[i], group[j], N))
    return sum(vals) / len(vals)
