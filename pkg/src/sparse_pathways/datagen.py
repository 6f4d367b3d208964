"""Synthetic order-2 Markov "languages" over a shared symbol universe.

Every language draws its transitions from one universe-wide logit table,
restricted and renormalised to its own alphabet.  Languages with overlapping
alphabets therefore agree (up to normalisation) on shared contexts, which
gives joint training something real to transfer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterator

import numpy as np

UNIVERSE = 64
ALPHABET_SIZE = 32
OVERLAP_RANGE = (8, 16)
LANGUAGES = ("en", "fr", "it", "nl")
# relative training-data sizes of the four languages
RESOURCE_RATIO = (44.7, 1.1, 0.2, 1.6)
LARGEST_TRAIN = 400_000
EVAL_TOKENS = 10_000
SHARPNESS = 2.5

CORPUS_MAGIC = b"PWCORPUS"


class StochasticError(ValueError):
    """A transition row is not a probability distribution."""


@dataclass
class LanguageSpec:
    language: str
    alphabet: np.ndarray          # sorted universe ids, shape (A,)
    transitions: np.ndarray       # (A, A, A): P(next | prev2, prev1) over alphabet positions
    counts: dict[str, int]        # tokens per split
    universe: int = UNIVERSE

    def validate(self, context_window: int = 8) -> None:
        a = len(self.alphabet)
        if self.transitions.shape != (a, a, a):
            raise StochasticError(f"{self.language}: transition table shape {self.transitions.shape}")
        if np.any(self.transitions < 0) or not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-6):
            raise StochasticError(f"{self.language}: transition rows must be non-negative and sum to 1")
        if np.any(self.alphabet < 0) or np.any(self.alphabet >= self.universe):
            raise ValueError(f"{self.language}: alphabet outside the universe")
        for split, n in self.counts.items():
            if n < context_window + 1:
                raise ValueError(f"{self.language}: split {split} has {n} tokens, need > {context_window}")

    def to_json(self) -> dict:
        return {
            "language": self.language,
            "universe": self.universe,
            "alphabet": self.alphabet.tolist(),
            "counts": dict(self.counts),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LanguageSpec":
        return cls(d["language"], np.asarray(d["alphabet"], dtype=np.int64),
                   np.asarray(d["transitions"], dtype=np.float64), dict(d["counts"]), d["universe"])


@dataclass
class Corpus:
    language: str
    splits: dict[str, np.ndarray]   # uint16 universe ids
    seed: int
    vocab_size: int = UNIVERSE

    def __eq__(self, other) -> bool:
        return (isinstance(other, Corpus) and self.language == other.language
                and list(self.splits) == list(other.splits)
                and all(np.array_equal(self.splits[s], other.splits[s]) for s in self.splits))


@dataclass
class Suite:
    specs: list[LanguageSpec]
    corpora: dict[str, Corpus] = field(default_factory=dict)

    @property
    def languages(self) -> list[str]:
        return [s.language for s in self.specs]


def scaled_counts(ratio=RESOURCE_RATIO, largest: int = LARGEST_TRAIN) -> list[int]:
    top = max(ratio)
    return [int(round(largest * r / top)) for r in ratio]


def _pick_alphabets(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    lo, hi = OVERLAP_RANGE
    while True:
        alphabets = [np.sort(rng.choice(UNIVERSE, ALPHABET_SIZE, replace=False)) for _ in range(n)]
        ok = all(lo <= len(np.intersect1d(a, b)) <= hi for a, b in combinations(alphabets, 2))
        if ok:
            return alphabets


def restricted_table(logits: np.ndarray, alphabet: np.ndarray) -> np.ndarray:
    """Softmax of the universe logits over one alphabet, for every alphabet context."""
    sub = logits[np.ix_(alphabet, alphabet, alphabet)]
    sub = sub - sub.max(axis=2, keepdims=True)
    p = np.exp(sub)
    return p / p.sum(axis=2, keepdims=True)


def make_specs(seed: int) -> list[LanguageSpec]:
    rng = np.random.default_rng([seed, 0])
    logits = SHARPNESS * rng.standard_normal((UNIVERSE, UNIVERSE, UNIVERSE))
    alphabets = _pick_alphabets(rng, len(LANGUAGES))
    train = scaled_counts()
    specs = []
    for lang, alpha, n in zip(LANGUAGES, alphabets, train):
        counts = {"train": n, "valid": EVAL_TOKENS, "test": EVAL_TOKENS}
        specs.append(LanguageSpec(lang, alpha, restricted_table(logits, alpha), counts))
    return specs


def sample_sequence(spec: LanguageSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    """Order-2 Markov sample of universe ids; the first two symbols are uniform."""
    if length < 3:
        raise ValueError("length must be >= 3")
    spec.validate(context_window=0)
    a = len(spec.alphabet)
    cdf = np.cumsum(spec.transitions, axis=2)
    cdf[..., -1] = 1.0
    u = rng.random(length)
    pos = np.empty(length, dtype=np.int64)
    pos[0] = min(int(u[0] * a), a - 1)
    pos[1] = min(int(u[1] * a), a - 1)
    p2, p1 = int(pos[0]), int(pos[1])
    flat = cdf.reshape(a * a, a)
    for t in range(2, length):
        row = flat[p2 * a + p1]
        nxt = int(np.searchsorted(row, u[t], side="right"))
        if nxt >= a:
            nxt = a - 1
        pos[t] = nxt
        p2, p1 = p1, nxt
    return spec.alphabet[pos].astype(np.uint16)


def generate_corpus(spec: LanguageSpec, seed: int, index: int = 0) -> Corpus:
    """One contiguous stream cut into train / valid / test."""
    rng = np.random.default_rng([seed, 1, index])
    total = sum(spec.counts.values())
    stream = sample_sequence(spec, total, rng)
    splits = {}
    start = 0
    for split in ("train", "valid", "test"):
        n = spec.counts[split]
        splits[split] = stream[start:start + n].copy()
        start += n
    return Corpus(spec.language, splits, seed, spec.universe)


def make_default_suite(seed: int) -> Suite:
    specs = make_specs(seed)
    corpora = {s.language: generate_corpus(s, seed, i) for i, s in enumerate(specs)}
    return Suite(specs, corpora)


# --------------------------------------------------------------------------- examples & batches

def examples(tokens: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """All (k-context, next symbol) pairs of a token stream."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) <= k:
        raise ValueError(f"need more than {k} tokens, got {len(tokens)}")
    ctx = np.lib.stride_tricks.sliding_window_view(tokens[:-1], k)
    return np.ascontiguousarray(ctx), tokens[k:].copy()


def batches(tokens: np.ndarray, k: int, batch_size: int, rng: np.random.Generator
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless shuffled minibatches; each epoch is a fresh permutation."""
    ctx, tgt = examples(tokens, k)
    n = len(tgt)
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            yield ctx[idx], tgt[idx]


# --------------------------------------------------------------------------- persistence

def write_corpus(path, corpus: Corpus) -> None:
    name = corpus.language.encode("utf-8")
    parts = [CORPUS_MAGIC, struct.pack("<I", len(name)), name,
             struct.pack("<IIII", corpus.vocab_size, *(len(corpus.splits[s]) for s in ("train", "valid", "test")))]
    for s in ("train", "valid", "test"):
        parts.append(np.ascontiguousarray(corpus.splits[s], dtype="<u2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_corpus(path, seed: int = -1) -> Corpus:
    blob = Path(path).read_bytes()
    if blob[:8] != CORPUS_MAGIC:
        raise ValueError(f"{path}: not a corpus file")
    pos = 8
    (nlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    language = blob[pos:pos + nlen].decode("utf-8")
    pos += nlen
    vocab, *counts = struct.unpack_from("<IIII", blob, pos)
    pos += 16
    ids = np.frombuffer(blob, dtype="<u2", offset=pos)
    if len(ids) != sum(counts):
        raise ValueError(f"{path}: expected {sum(counts)} ids, found {len(ids)}")
    splits = {}
    start = 0
    for s, n in zip(("train", "valid", "test"), counts):
        splits[s] = ids[start:start + n].astype(np.uint16)
        start += n
    return Corpus(language, splits, seed, vocab)


def write_specs(path, specs: list[LanguageSpec]) -> None:
    Path(path).write_text(json.dumps([s.to_json() for s in specs]), encoding="utf-8")


def read_specs(path) -> list[LanguageSpec]:
    return [LanguageSpec.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
