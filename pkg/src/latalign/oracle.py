"""Brute-force enumeration over the full alignment space.

Everything here is deliberately exponential; it exists as ground truth for
the dynamic-programming and lattice algorithms on small instances.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterator, Literal, Sequence

import numpy as np

from .core import (
    Alignment,
    Sentence,
    Vocabulary,
    collapse_ctc,
    collapse_sctc,
    reference_ngram_counts,
)

DEFAULT_BUDGET = 10**6

Mode = Literal["ctc", "sctc"]


class BudgetExceededError(Exception):
    """Raised when an enumeration would exceed the alignment budget."""


def _check_budget(size: int, max_alignments: int) -> None:
    if size > max_alignments:
        raise BudgetExceededError(
            f"enumeration of {size} alignments exceeds budget {max_alignments}"
        )


def enumerate_alignments(
    t_a: int, vocab: Vocabulary, max_alignments: int = DEFAULT_BUDGET
) -> Iterator[Alignment]:
    """Yield every length-``t_a`` sequence over the extended vocabulary.

    Order is lexicographic over token indices.
    """
    _check_budget(vocab.extended_size**t_a, max_alignments)
    return itertools.product(range(vocab.extended_size), repeat=t_a)


def _collapse(a: Sequence[int], blank_id: int, mode: Mode) -> Sentence:
    if mode == "ctc":
        return collapse_ctc(a, blank_id)
    if mode == "sctc":
        return collapse_sctc(a, blank_id)
    raise ValueError(f"unknown mode {mode!r}")


def alignment_probability(p: np.ndarray, a: Sequence[int]) -> float:
    return float(np.prod([p[t, tok] for t, tok in enumerate(a)]))


def collapsed_distribution(
    p: np.ndarray, mode: Mode, max_alignments: int = DEFAULT_BUDGET
) -> dict[Sentence, float]:
    """Exact distribution over collapsed sentences, by full enumeration."""
    t_a, v_ext = p.shape
    blank_id = v_ext - 1
    _check_budget(v_ext**t_a, max_alignments)
    dist: dict[Sentence, float] = {}
    for a in itertools.product(range(v_ext), repeat=t_a):
        prob = alignment_probability(p, a)
        if prob == 0.0:
            continue
        y = _collapse(a, blank_id, mode)
        dist[y] = dist.get(y, 0.0) + prob
    return dist


def exact_likelihood(
    p: np.ndarray,
    y: Sequence[int],
    mode: Mode,
    max_alignments: int = DEFAULT_BUDGET,
) -> float:
    """Total probability of all alignments whose collapse equals ``y``."""
    y = tuple(y)
    t_a, v_ext = p.shape
    blank_id = v_ext - 1
    _check_budget(v_ext**t_a, max_alignments)
    total = 0.0
    for a in itertools.product(range(v_ext), repeat=t_a):
        if _collapse(a, blank_id, mode) == y:
            total += alignment_probability(p, a)
    return total


def exact_ngram_count(
    p: np.ndarray,
    g: Sequence[int],
    mode: Mode,
    max_alignments: int = DEFAULT_BUDGET,
) -> float:
    """Expected occurrence count of n-gram ``g`` in the collapsed output."""
    g = tuple(g)
    n = len(g)
    total = 0.0
    for y, prob in collapsed_distribution(p, mode, max_alignments).items():
        count = sum(1 for i in range(len(y) - n + 1) if y[i : i + n] == g)
        total += prob * count
    return total


def nonmonotonic_alignments(
    t_a: int,
    y: Sequence[int],
    blank_id: int,
    max_alignments: int = DEFAULT_BUDGET,
) -> Iterator[Alignment]:
    """All alignments containing exactly y's word multiset plus blanks.

    This is the union over permutations of ``y`` of their blank placements,
    enumerated without duplicates.
    """
    y = tuple(y)
    if len(y) > t_a:
        raise ValueError("target longer than alignment length")
    multiset = sorted(y) + [blank_id] * (t_a - len(y))
    counts = {tok: multiset.count(tok) for tok in set(multiset)}
    size = math.factorial(t_a)
    for c in counts.values():
        size //= math.factorial(c)
    _check_budget(size, max_alignments)
    seen = set()
    for perm in itertools.permutations(multiset):
        if perm not in seen:
            seen.add(perm)
            yield perm


def exact_best_alignment(
    p: np.ndarray,
    y: Sequence[int],
    max_alignments: int = DEFAULT_BUDGET,
) -> tuple[Alignment, float]:
    """Argmax and max of ``p(a)`` over the non-monotonic alignment space."""
    t_a, v_ext = p.shape
    blank_id = v_ext - 1
    best_a, best_p = None, -1.0
    for a in nonmonotonic_alignments(t_a, y, blank_id, max_alignments):
        prob = alignment_probability(p, a)
        if prob > best_p:
            best_a, best_p = a, prob
    assert best_a is not None
    return best_a, best_p


def exact_sum_nonmonotonic(
    p: np.ndarray,
    y: Sequence[int],
    max_alignments: int = DEFAULT_BUDGET,
) -> float:
    """Total probability over the non-monotonic alignment space of ``y``."""
    t_a, v_ext = p.shape
    blank_id = v_ext - 1
    return sum(
        alignment_probability(p, a)
        for a in nonmonotonic_alignments(t_a, y, blank_id, max_alignments)
    )


def exact_f1_loss(
    p: np.ndarray,
    y: Sequence[int],
    n: int,
    mode: Mode,
    max_alignments: int = DEFAULT_BUDGET,
) -> float:
    """F1 matching loss with all probabilistic counts taken from enumeration.

    The denominator uses the exact expected total model count, not the
    shifted 1-gram approximation, so this is a diagnostic rather than a
    bit-for-bit oracle for the lattice loss.
    """
    ref = reference_ngram_counts(tuple(y), n)
    dist = collapsed_distribution(p, mode, max_alignments)
    model: dict = {}
    total_model = 0.0
    for sent, prob in dist.items():
        for g, c in reference_ngram_counts(sent, n).items():
            model[g] = model.get(g, 0.0) + prob * c
            total_model += prob * c
    match = sum(min(c, model.get(g, 0.0)) for g, c in ref.items())
    denom = sum(ref.values()) + total_model
    if denom == 0.0:
        return 0.0
    return -2.0 * match / denom
