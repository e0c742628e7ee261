import math

import numpy as np
import pytest

from latalign import oracle
from latalign.core import Vocabulary

UNIFORM_3x3 = np.full((3, 3), 1.0 / 3.0)  # two words + blank


def test_enumerate_alignments_exhaustive_and_ordered():
    v = Vocabulary(("A", "B"))
    got = list(oracle.enumerate_alignments(2, v))
    assert got == sorted(got)
    assert len(got) == 9
    assert got[0] == (0, 0) and got[-1] == (2, 2)


def test_enumerate_budget():
    v = Vocabulary(("A", "B"))
    with pytest.raises(oracle.BudgetExceededError):
        list(oracle.enumerate_alignments(2, v, max_alignments=8))


def test_collapsed_distribution_sums_to_one():
    for mode in ("ctc", "sctc"):
        dist = oracle.collapsed_distribution(UNIFORM_3x3, mode)
        assert math.isclose(sum(dist.values()), 1.0, abs_tol=1e-12)


def test_exact_likelihood_uniform_sctc():
    # 2 words + blank, T_a=3, uniform rows: y=(0,) has C(3,1)=3 alignments,
    # each with probability (1/3)^3
    assert math.isclose(
        oracle.exact_likelihood(UNIFORM_3x3, (0,), "sctc"), 3 / 27, rel_tol=1e-12
    )
    # y=(0,0): blank in one of 3 slots
    assert math.isclose(
        oracle.exact_likelihood(UNIFORM_3x3, (0, 0), "sctc"), 3 / 27, rel_tol=1e-12
    )


def test_exact_likelihood_uniform_ctc():
    # y=(0,): any nonempty subset of positions emits word 0, the rest blanks,
    # minus nothing since repeats merge; count sequences collapsing to (0,):
    # choose a nonempty contiguous-or-not pattern... enumerate instead.
    dist = oracle.collapsed_distribution(UNIFORM_3x3, "ctc")
    assert math.isclose(
        oracle.exact_likelihood(UNIFORM_3x3, (0,), "ctc"), dist[(0,)], rel_tol=1e-12
    )


def test_exact_likelihood_deterministic_rows():
    p = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    # only alignment is (0, blank, 0)
    assert oracle.exact_likelihood(p, (0, 0), "ctc") == 1.0
    assert oracle.exact_likelihood(p, (0, 0), "sctc") == 1.0
    assert oracle.exact_likelihood(p, (0,), "ctc") == 0.0


def test_exact_ngram_count_matches_manual():
    p = np.array([[0.5, 0.0, 0.5], [0.0, 1.0, 0.0]])
    # alignments: (0,1) p=.5 -> (0,1); (blank,1) p=.5 -> (1,)
    assert math.isclose(oracle.exact_ngram_count(p, (0, 1), "sctc"), 0.5)
    assert math.isclose(oracle.exact_ngram_count(p, (1,), "sctc"), 1.0)
    assert math.isclose(oracle.exact_ngram_count(p, (0,), "sctc"), 0.5)
    assert oracle.exact_ngram_count(p, (1, 0), "sctc") == 0.0


def test_nonmonotonic_alignments_counts():
    # y = (0, 1), T_a = 3: arrangements of {0, 1, blank} = 3! = 6
    got = set(oracle.nonmonotonic_alignments(3, (0, 1), blank_id=2))
    assert len(got) == 6
    assert (2, 1, 0) in got
    # repeated word: y = (0, 0), T_a = 3 -> 3!/2! = 3 distinct
    got = set(oracle.nonmonotonic_alignments(3, (0, 0), blank_id=2))
    assert got == {(0, 0, 2), (0, 2, 0), (2, 0, 0)}


def test_nonmonotonic_rejects_too_long_target():
    with pytest.raises(ValueError):
        list(oracle.nonmonotonic_alignments(1, (0, 1), blank_id=2))


def test_exact_best_alignment():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]])
    a, prob = oracle.exact_best_alignment(p, (1, 0))
    # best placement of {0, 1, blank}: word1 at t=1 (.6), word0 at t=0 (.7),
    # blank at t=2 (.6)
    assert a == (0, 1, 2)
    assert math.isclose(prob, 0.7 * 0.6 * 0.6, rel_tol=1e-12)


def test_exact_sum_nonmonotonic_uniform():
    # 6 arrangements, each (1/3)^3
    assert math.isclose(
        oracle.exact_sum_nonmonotonic(UNIFORM_3x3, (0, 1)), 6 / 27, rel_tol=1e-12
    )


def test_sum_dominates_max():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = rng.dirichlet(np.ones(3), size=4)
        y = tuple(rng.integers(0, 2, size=2))
        _, best = oracle.exact_best_alignment(p, y)
        assert oracle.exact_sum_nonmonotonic(p, y) >= best - 1e-15


def test_exact_f1_loss_bounds():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = rng.dirichlet(np.ones(3), size=4)
        loss = oracle.exact_f1_loss(p, (0, 1), 2, "sctc")
        assert -1.0 - 1e-12 <= loss <= 0.0
