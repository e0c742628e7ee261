"""Vocabulary, alignments, collapsing functions and n-gram counting.

Conventions used throughout the package:

* A sentence is a tuple of word indices in ``[0, len(vocab))``; it never
  contains the blank token.
* An alignment is a tuple of extended-vocabulary indices, where the blank
  token is the last index (``vocab.blank_id``).
* A probability matrix is a float64 array of shape ``(T_a, |V| + 1)`` whose
  rows are distributions over the extended vocabulary; a logit matrix is its
  pre-softmax form.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Sentence = tuple[int, ...]
Alignment = tuple[int, ...]
NGram = tuple[int, ...]
NGramCountTable = dict[NGram, float]


@dataclass(frozen=True)
class Vocabulary:
    """Word symbols plus the reserved blank token (stored as the last index)."""

    words: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary words must be unique")

    @property
    def blank_id(self) -> int:
        return len(self.words)

    @property
    def extended_size(self) -> int:
        return len(self.words) + 1

    def __len__(self) -> int:
        return len(self.words)

    def index(self, word: str) -> int:
        return self.words.index(word)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in self.words:
                f.write(w + "\n")

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            words = tuple(line.strip() for line in f if line.strip())
        return cls(words)


def validate_sentence(y: Sequence[int], vocab: Vocabulary) -> Sentence:
    y = tuple(int(t) for t in y)
    if any(t < 0 or t >= len(vocab) for t in y):
        raise ValueError("sentence contains out-of-vocabulary or blank tokens")
    return y


def validate_alignment(a: Sequence[int], vocab: Vocabulary) -> Alignment:
    a = tuple(int(t) for t in a)
    if any(t < 0 or t >= vocab.extended_size for t in a):
        raise ValueError("alignment contains out-of-range tokens")
    return a


def collapse_ctc(a: Sequence[int], blank_id: int) -> Sentence:
    """Merge consecutive repeated tokens, then remove blanks."""
    out = []
    prev = None
    for t in a:
        if t != prev:
            if t != blank_id:
                out.append(t)
            prev = t
    return tuple(out)


def collapse_sctc(a: Sequence[int], blank_id: int) -> Sentence:
    """Remove blanks only; repeated words are preserved."""
    return tuple(t for t in a if t != blank_id)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def validate_prob_matrix(p: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probability matrix must be 2-dimensional")
    if (p < -atol).any() or (p > 1 + atol).any():
        raise ValueError("probabilities outside [0, 1]")
    if not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("rows must sum to 1")
    return p


def reference_ngram_counts(y: Sequence[int], n: int) -> NGramCountTable:
    """Occurrence counts of all order-``n`` n-grams in ``y``.

    The total count equals ``max(len(y) - n + 1, 0)``.
    """
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    y = tuple(y)
    return dict(Counter(y[i : i + n] for i in range(len(y) - n + 1)))


def multi_reference_ngram_counts(
    refs: Iterable[Sequence[int]], n: int
) -> NGramCountTable:
    """Per-gram arithmetic mean of the n-gram counts of each reference."""
    refs = list(refs)
    if not refs:
        raise ValueError("at least one reference is required")
    total: Counter = Counter()
    for r in refs:
        total.update(reference_ngram_counts(r, n))
    return {g: c / len(refs) for g, c in total.items()}


def read_corpus(path, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    """Read a TSV corpus of ``source<TAB>target`` lines with space-separated tokens."""
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            src_s, tgt_s = line.split("\t")
            src = tuple(src_vocab.index(w) for w in src_s.split())
            tgt = tuple(tgt_vocab.index(w) for w in tgt_s.split()) if tgt_s else ()
            pairs.append((src, tgt))
    return pairs


def write_corpus(path, pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for src, tgt in pairs:
            src_s = " ".join(src_vocab.words[t] for t in src)
            tgt_s = " ".join(tgt_vocab.words[t] for t in tgt)
            f.write(f"{src_s}\t{tgt_s}\n")
