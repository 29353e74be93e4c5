"""Synthetic templated paragraphs for hermetic experiments.

Each paragraph tells a tiny story about a person at a place (the input
keywords) and one object that is *not* in the input, so a single input admits
many valid paragraphs. Templates keep a fixed story order and every sentence
has at most six tokens.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

NAMES = ("anna", "ben", "carl", "dana", "eve", "fred", "gina", "hank")
OBJECTS = ("dog", "cat", "ball", "kite", "cake", "book", "hat", "bike")
PLACES = ("park", "store", "lake", "school", "beach")
ADJECTIVES = ("red", "big", "old", "new", "small")
FEELINGS = ("happy", "sad", "proud", "tired")

TEMPLATES = (
    "{n} wanted a {o} .",
    "{n} went to the {p} .",
    "{n} saw a {a} {o} .",
    "the {o} was {a} .",
    "{n} lost the {o} .",
    "a friend found it .",
    "then {n} was {f} .",
    "{n} felt very {f} .",
)

OVERFIT_SEED = 20211
OVERFIT_SIZE = 8


def make_paragraph(rng: np.random.Generator, n_sentences: int, name: str | None = None,
                   place: str | None = None) -> dict:
    name = name if name is not None else NAMES[rng.integers(len(NAMES))]
    place = place if place is not None else PLACES[rng.integers(len(PLACES))]
    obj = OBJECTS[rng.integers(len(OBJECTS))]
    picks = sorted(rng.choice(len(TEMPLATES), size=n_sentences, replace=False).tolist())
    sentences = []
    for i in picks:
        sentences.append(TEMPLATES[i].format(n=name, o=obj, p=place,
                                             a=ADJECTIVES[rng.integers(len(ADJECTIVES))],
                                             f=FEELINGS[rng.integers(len(FEELINGS))]))
    return {"input": [name, place], "sentences": sentences}


def generate_corpus(n: int, seed: int = 0, min_sentences: int = 3, max_sentences: int = 5) -> list[dict]:
    if not 1 <= min_sentences <= max_sentences <= len(TEMPLATES):
        raise ValueError(f"sentence range [{min_sentences}, {max_sentences}] not within 1..{len(TEMPLATES)}")
    rng = np.random.default_rng(seed)
    return [make_paragraph(rng, int(rng.integers(min_sentences, max_sentences + 1))) for _ in range(n)]


def overfit_corpus() -> list[dict]:
    """Eight 3-sentence paragraphs with pairwise-distinct inputs."""
    rng = np.random.default_rng(OVERFIT_SEED)
    combos = [(a, b) for a in NAMES for b in PLACES]
    chosen = rng.choice(len(combos), size=OVERFIT_SIZE, replace=False)
    return [make_paragraph(rng, 3, *combos[i]) for i in chosen]


def write_jsonl(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def bundled_overfit_path():
    """Path of the shipped copy of :func:`overfit_corpus`."""
    return resources.files("permgen").joinpath("data/toy8.jsonl")
