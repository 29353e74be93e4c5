"""Tokenisation, vocabulary and JSONL corpus loading."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

TMAX = 10
LMAX = 64

PAD, BOS, UNK, EOP = "<PAD>", "<BOS>", "<UNK>", "<EOP>"
PAD_ID, BOS_ID, UNK_ID, EOP_ID = 0, 1, 2, 3
KEYWORD_SEP = ";"

_PUNCT = re.compile(r"""([.,!?;:'"])""")


class CorpusError(ValueError):
    """Malformed or invalid corpus record; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def begin_token(t: int) -> str:
    return f"<B-{t}>"


def end_token(t: int) -> str:
    return f"<E-{t}>"


def begin_id(t: int) -> int:
    if not 1 <= t <= TMAX:
        raise IndexError(f"sentence index {t} outside 1..{TMAX}")
    return 3 + t


def end_id(t: int) -> int:
    if not 1 <= t <= TMAX:
        raise IndexError(f"sentence index {t} outside 1..{TMAX}")
    return 3 + TMAX + t


RESERVED: tuple[str, ...] = (
    (PAD, BOS, UNK, EOP)
    + tuple(begin_token(t) for t in range(1, TMAX + 1))
    + tuple(end_token(t) for t in range(1, TMAX + 1))
)
NUM_RESERVED = len(RESERVED)  # 24
_RESERVED_FOLDED = {tok.lower() for tok in RESERVED}


def begin_index(token_id: int) -> int | None:
    """Sentence index encoded by a ``<B-t>`` id, else None."""
    t = token_id - 3
    return t if 1 <= t <= TMAX else None


def end_index(token_id: int) -> int | None:
    t = token_id - 3 - TMAX
    return t if 1 <= t <= TMAX else None


def is_reserved_string(token: str) -> bool:
    return token.lower() in _RESERVED_FOLDED


def tokenize(text: str) -> list[str]:
    """Lowercase, detach ``.,!?;:'"`` and split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def split_sentences(text: str) -> list[str]:
    """Lossy sentence splitter on ``.?!``; only meant for raw-text import."""
    parts = re.split(r"(?<=[.?!])\s+", text.strip())
    return [p for p in parts if p.strip()]


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_RESERVED]) != RESERVED:
            raise CorpusError("vocabulary does not start with the reserved special tokens")
        self.id_to_token = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    @property
    def normal_ids(self) -> range:
        return range(NUM_RESERVED, len(self.id_to_token))

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.id_to_token)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def build_vocabulary(corpus: Iterable[str | Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Word-level vocabulary over an iterable of texts or token lists.

    Tokens seen at least ``min_freq`` times get ids after the reserved prefix in
    descending frequency order, ties broken lexicographically.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts: Counter[str] = Counter()
    seen_any = False
    for item in corpus:
        seen_any = True
        counts.update(tokenize(item) if isinstance(item, str) else item)
    if not seen_any:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, c in counts.items() if c >= min_freq and not is_reserved_string(tok)),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED) + kept)


@dataclass
class RawRecord:
    source: list[str]
    sentences: list[list[str]]
    line: int | None = None


@dataclass
class Paragraph:
    source_tokens: list[int]
    sentences: list[list[int]]
    line: int | None = None

    @property
    def T(self) -> int:
        return len(self.sentences)


@dataclass
class CorpusStats:
    examples: int
    mean_input_tokens: float
    mean_output_tokens: float
    mean_output_sentences: float
    extra: dict = field(default_factory=dict)


def parse_source(value, line: int) -> list[str]:
    if isinstance(value, str):
        return tokenize(value)
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        out: list[str] = []
        for i, item in enumerate(value):
            if i:
                out.append(KEYWORD_SEP)
            out.extend(tokenize(item))
        return out
    raise CorpusError('"input" must be a string or a list of strings', line)


def parse_record(obj, line: int | None = None, require_sentences: bool = True) -> RawRecord:
    if not isinstance(obj, dict):
        raise CorpusError("record is not a JSON object", line)
    if "input" not in obj:
        raise CorpusError('missing field "input"', line)
    source = parse_source(obj["input"], line)
    if not source:
        raise CorpusError("empty input", line)
    sentences: list[list[str]] = []
    if "sentences" in obj:
        raw = obj["sentences"]
        if not isinstance(raw, list) or not all(isinstance(s, str) for s in raw):
            raise CorpusError('"sentences" must be a list of strings', line)
        sentences = [tokenize(s) for s in raw]
        if not sentences:
            raise CorpusError("no sentences", line)
        if len(sentences) > TMAX:
            raise CorpusError(f"{len(sentences)} sentences exceeds the maximum of {TMAX}", line)
        for i, s in enumerate(sentences, 1):
            if not s:
                raise CorpusError(f"sentence {i} is empty", line)
            if len(s) > LMAX - 2:
                raise CorpusError(f"sentence {i} has {len(s)} tokens, limit is {LMAX - 2}", line)
    elif require_sentences:
        raise CorpusError('missing field "sentences"', line)
    for tok in source + [t for s in sentences for t in s]:
        if is_reserved_string(tok):
            raise CorpusError(f"reserved token {tok!r} used as text", line)
    return RawRecord(source, sentences, line)


def read_jsonl(path, require_sentences: bool = True) -> list[RawRecord]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, 1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON ({exc.msg})", lineno) from None
            records.append(parse_record(obj, lineno, require_sentences))
    return records


def encode_record(record: RawRecord, vocab: Vocabulary) -> Paragraph:
    return Paragraph(vocab.encode(record.source), [vocab.encode(s) for s in record.sentences], record.line)


def load_jsonl(path, vocab: Vocabulary) -> list[Paragraph]:
    return [encode_record(r, vocab) for r in read_jsonl(path)]


def vocabulary_from_records(records: Iterable[RawRecord], min_freq: int = 1) -> Vocabulary:
    def texts():
        for r in records:
            yield r.source
            yield from r.sentences

    return build_vocabulary(texts(), min_freq)


def corpus_stats(records: Sequence[RawRecord]) -> CorpusStats:
    n = len(records)
    if n == 0:
        return CorpusStats(0, 0.0, 0.0, 0.0)
    return CorpusStats(
        examples=n,
        mean_input_tokens=sum(len(r.source) for r in records) / n,
        mean_output_tokens=sum(len(s) for r in records for s in r.sentences) / n,
        mean_output_sentences=sum(len(r.sentences) for r in records) / n,
    )
