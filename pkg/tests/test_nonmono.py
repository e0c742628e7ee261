import itertools
import math

import numpy as np
import pytest

from latalign import nonmono, oracle
from latalign.core import reference_ngram_counts, softmax_rows
from latalign.monotonic import LossAndGrad, ZeroLikelihoodError
from latalign.nonmono import (
    bipartite_loss,
    build_assignment,
    combined_loss,
    f1_loss,
    hungarian_max,
    ngram_count_ctc,
    ngram_count_sctc,
    ngram_count_sctc_direct,
    repeat_count,
    sum_ngram_counts_ctc,
    sum_ngram_counts_sctc,
    total_repeat_count,
    transition_matrix,
)

# p1(A)=0.6, p2(A)=0.5, blank otherwise
P_TWO = np.array([[0.6, 0.4], [0.5, 0.5]])


def big_logits(rows, v_ext=None):
    """Logits whose softmax is numerically one-hot per row.

    The last column is the blank; pass v_ext when no row uses it.
    """
    v = max(rows) + 1 if v_ext is None else v_ext
    out = np.full((len(rows), v), -200.0)
    for t, k in enumerate(rows):
        out[t, k] = 200.0
    return out


def test_build_assignment_columns():
    prob = build_assignment(P_TWO, (0,))
    assert prob.column_labels == (0, 1)
    assert np.allclose(prob.weights, np.log(P_TWO))
    prob = build_assignment(P_TWO, ())
    assert prob.column_labels == (1, 1)
    prob = build_assignment(np.full((2, 2), 0.5), (0, 0))
    assert prob.column_labels == (0, 0)
    assert np.allclose(prob.weights[:, 0], prob.weights[:, 1])


def test_build_assignment_rejects_long_target():
    with pytest.raises(ValueError):
        build_assignment(P_TWO, (0, 0, 0))


def test_hungarian_identity():
    p = np.eye(3) * 0.99994 + 2e-5  # near-deterministic diagonal
    p /= p.sum(axis=1, keepdims=True)
    perm, total = hungarian_max(build_assignment(p, (0, 1)))
    assert perm == (0, 1, 2)
    assert math.isclose(total, math.log(p[0, 0] * p[1, 1] * p[2, 2]))


def test_hungarian_cross_match():
    # model emits (B, A) deterministically; target (A, B) still matches
    p = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    perm, total = hungarian_max(build_assignment(p, (0, 1)))
    assert perm == (1, 0)
    assert total == 0.0


def test_hungarian_infinite_edges():
    # no mass on word 0 anywhere: any matching hits a -inf edge
    p = np.array([[0.0, 1.0], [0.0, 1.0]])
    _, total = hungarian_max(build_assignment(p, (0,)))
    assert total == -np.inf


def test_hungarian_matches_oracle():
    rng = np.random.default_rng(21)
    for _ in range(50):
        t_a = int(rng.integers(1, 7))
        v = int(rng.integers(1, 4))
        p = rng.dirichlet(np.ones(v + 1), size=t_a)
        T = int(rng.integers(0, min(t_a, 3) + 1))
        y = tuple(rng.integers(0, v, size=T))
        _, total = hungarian_max(build_assignment(p, y))
        _, best = oracle.exact_best_alignment(p, y)
        assert math.isclose(math.exp(total), best, rel_tol=1e-9)
        # max never exceeds the sum over the space
        assert math.exp(total) <= oracle.exact_sum_nonmonotonic(p, y) + 1e-12


def test_bipartite_loss_perfect_cross_order():
    logits = big_logits([1, 0], v_ext=3)  # emits (B, A); target (A, B)
    out = bipartite_loss(logits, (0, 1))
    assert out.value == pytest.approx(0.0, abs=1e-10)


def test_bipartite_loss_raises_on_zero():
    logits = np.full((1, 2), 0.0)
    logits[0, 0] = -np.inf  # p(word 0) = 0 exactly
    p = softmax_rows(logits)
    assert p[0, 0] == 0.0
    with pytest.raises(ZeroLikelihoodError):
        bipartite_loss(logits, (0,))


def test_bipartite_gradient_finite_difference():
    rng = np.random.default_rng(4)
    for _ in range(10):
        logits = rng.normal(0, 1.0, (4, 3))
        y = (0, 1)
        out = bipartite_loss(logits, y)
        base_perm, _ = hungarian_max(build_assignment(softmax_rows(logits), y))
        h = 1e-6
        for t in range(4):
            for k in range(3):
                lp = logits.copy()
                lp[t, k] += h
                lm = logits.copy()
                lm[t, k] -= h
                # skip coordinates where the argmax matching switches
                pp, _ = hungarian_max(build_assignment(softmax_rows(lp), y))
                pm, _ = hungarian_max(build_assignment(softmax_rows(lm), y))
                if pp != base_perm or pm != base_perm:
                    continue
                fd = (bipartite_loss(lp, y).value - bipartite_loss(lm, y).value) / (
                    2 * h
                )
                assert math.isclose(fd, out.grad[t, k], rel_tol=1e-4, abs_tol=1e-7)


def test_transition_matrix_structure():
    p = np.array([[0.2, 0.8], [0.3, 0.7], [0.9, 0.1]])
    A = nonmono.transition_matrix(p)
    assert A.shape == (3, 3)
    assert np.allclose(np.tril(A), 0.0)
    assert A[0, 1] == 1.0 and A[1, 2] == 1.0
    assert math.isclose(A[0, 2], p[1, 1])  # single blank in between


def test_transition_matrix_extremes():
    all_blank = np.array([[0.0, 1.0]] * 4)
    A = transition_matrix(all_blank)
    assert np.allclose(A[np.triu_indices(4, 1)], 1.0)
    no_blank = np.array([[1.0, 0.0]] * 4)
    A = transition_matrix(no_blank)
    for i in range(4):
        for j in range(4):
            assert A[i, j] == (1.0 if j == i + 1 else 0.0)


def test_ngram_count_values():
    assert math.isclose(ngram_count_sctc(P_TWO, (0,)), 1.1, rel_tol=1e-12)
    assert math.isclose(ngram_count_ctc(P_TWO, (0,)), 0.8, rel_tol=1e-12)
    assert math.isclose(repeat_count(P_TWO, 0), 0.3, rel_tol=1e-12)


def test_ngram_count_deterministic_bigram():
    # deterministic (A, blank, B): count of (A, B) after blank removal is 1
    p = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    assert math.isclose(ngram_count_sctc(p, (0, 1)), 1.0, rel_tol=1e-12)
    # deterministic (A, A, B): the (A, A) bigram vanishes under repeat merging
    p = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert ngram_count_ctc(p, (0, 0)) == pytest.approx(0.0, abs=1e-12)
    assert math.isclose(ngram_count_sctc(p, (0, 0)), 1.0, rel_tol=1e-12)


def test_ngram_count_order_exceeds_lattice():
    assert ngram_count_sctc(P_TWO, (0, 0, 0)) == 0.0


def test_ngram_count_rejects_bad_grams():
    with pytest.raises(ValueError):
        ngram_count_sctc(P_TWO, ())
    with pytest.raises(ValueError):
        ngram_count_sctc(P_TWO, (1,))  # blank index
    with pytest.raises(ValueError):
        ngram_count_ctc(np.full((3, 3), 1 / 3), (0, 1, 0))  # n > 2


def test_ngram_counts_match_oracle():
    rng = np.random.default_rng(31)
    for _ in range(60):
        t_a = int(rng.integers(1, 6))
        v = int(rng.integers(1, 4))
        p = rng.dirichlet(np.ones(v + 1), size=t_a)
        n = int(rng.integers(1, 4))
        g = tuple(rng.integers(0, v, size=n))
        exact = oracle.exact_ngram_count(p, g, "sctc")
        assert math.isclose(
            ngram_count_sctc(p, g), exact, rel_tol=1e-9, abs_tol=1e-12
        )
        if n <= 2:
            exact_c = oracle.exact_ngram_count(p, g, "ctc")
            assert math.isclose(
                ngram_count_ctc(p, g), exact_c, rel_tol=1e-9, abs_tol=1e-12
            )


def test_state_recursion_matches_direct_sum():
    rng = np.random.default_rng(33)
    for _ in range(30):
        t_a = int(rng.integers(1, 6))
        p = rng.dirichlet(np.ones(3), size=t_a)
        n = int(rng.integers(1, 5))
        g = tuple(rng.integers(0, 2, size=n))
        assert math.isclose(
            ngram_count_sctc(p, g),
            ngram_count_sctc_direct(p, g),
            rel_tol=1e-12,
            abs_tol=1e-15,
        )


def test_repeat_identity():
    # expected merged-repeat mass equals the gap between the two collapses
    rng = np.random.default_rng(35)
    for _ in range(30):
        t_a = int(rng.integers(1, 6))
        v = int(rng.integers(1, 4))
        p = rng.dirichlet(np.ones(v + 1), size=t_a)
        w = int(rng.integers(0, v))
        gap = oracle.exact_ngram_count(p, (w,), "sctc") - oracle.exact_ngram_count(
            p, (w,), "ctc"
        )
        assert math.isclose(repeat_count(p, w), gap, rel_tol=1e-9, abs_tol=1e-12)


def test_sum_ngram_counts():
    all_blank = np.array([[0.0, 1.0]] * 3)
    assert sum_ngram_counts_sctc(all_blank, 1) == 0.0
    no_blank = np.array([[1.0, 0.0]] * 4)
    assert sum_ngram_counts_sctc(no_blank, 2) == 3.0
    assert math.isclose(
        sum_ngram_counts_sctc(P_TWO, 1), 1.1, rel_tol=1e-12
    )
    assert math.isclose(
        sum_ngram_counts_ctc(P_TWO, 1), 1.1 - 0.3, rel_tol=1e-12
    )
    with pytest.raises(ValueError):
        sum_ngram_counts_ctc(P_TWO, 3)


def test_sum_shift_exact_when_blank_free():
    rng = np.random.default_rng(41)
    for _ in range(20):
        t_a = int(rng.integers(2, 6))
        v = int(rng.integers(2, 4))
        p = np.zeros((t_a, v + 1))
        p[:, :v] = rng.dirichlet(np.ones(v), size=t_a)
        total = sum(
            oracle.exact_ngram_count(p, g, "sctc")
            for g in itertools.product(range(v), repeat=2)
        )
        assert math.isclose(
            sum_ngram_counts_sctc(p, 2), total, rel_tol=1e-9, abs_tol=1e-12
        )


def test_total_repeat_count_sums_words():
    rng = np.random.default_rng(43)
    p = rng.dirichlet(np.ones(4), size=5)
    assert math.isclose(
        total_repeat_count(p), sum(repeat_count(p, w) for w in range(3)), rel_tol=1e-12
    )


def test_f1_loss_perfect():
    logits = big_logits([0, 1, 2], v_ext=4)
    ref = reference_ngram_counts((0, 1, 2), 1)
    out = f1_loss(logits, ref, 1, "sctc")
    assert out.value == pytest.approx(-1.0, abs=1e-6)


def test_f1_loss_all_blank():
    logits = big_logits([2, 2, 2])  # blank is the last index of 3
    ref = reference_ngram_counts((0, 1), 1)
    out = f1_loss(logits, ref, 1, "sctc")
    assert out.value == pytest.approx(0.0, abs=1e-6)


def test_f1_loss_empty_reference_empty_model():
    logits = big_logits([1])  # always blank, vocab size 1
    out = f1_loss(logits, {}, 1, "sctc")
    assert out.value == 0.0
    assert np.allclose(out.grad, 0.0)


def test_f1_loss_bounds_random():
    rng = np.random.default_rng(45)
    for _ in range(30):
        logits = rng.normal(0, 1.5, (5, 4))
        y = tuple(rng.integers(0, 3, size=3))
        n = int(rng.integers(1, 3))
        mode = "ctc" if rng.integers(0, 2) else "sctc"
        out = f1_loss(logits, reference_ngram_counts(y, n), n, mode)
        assert -1.0 - 1e-9 <= out.value <= 1e-12


def test_f1_loss_matches_oracle_counts():
    # substitute enumerated counts into the same score formula
    rng = np.random.default_rng(47)
    for _ in range(15):
        logits = rng.normal(0, 1.0, (5, 3))
        p = softmax_rows(logits)
        y = tuple(rng.integers(0, 2, size=3))
        n = 2
        ref = reference_ngram_counts(y, n)
        match = sum(
            min(c, oracle.exact_ngram_count(p, g, "sctc")) for g, c in ref.items()
        )
        denom = sum(ref.values()) + sum_ngram_counts_sctc(p, n)
        expected = -2.0 * match / denom
        got = f1_loss(logits, ref, n, "sctc").value
        assert math.isclose(got, expected, rel_tol=1e-9, abs_tol=1e-12)


def test_f1_loss_rejects_bad_modes():
    ref = reference_ngram_counts((0, 1, 0), 3)
    with pytest.raises(ValueError):
        f1_loss(np.zeros((4, 3)), ref, 3, "ctc")
    with pytest.raises(ValueError):
        f1_loss(np.zeros((4, 3)), ref, 3, "nope")


def test_f1_gradient_finite_difference():
    rng = np.random.default_rng(49)
    checked = 0
    for _ in range(8):
        logits = rng.normal(0, 1.0, (4, 3))
        y = tuple(rng.integers(0, 2, size=3))
        for n, mode in ((1, "sctc"), (2, "sctc"), (2, "ctc")):
            ref = reference_ngram_counts(y, n)
            if not ref:
                continue
            p = softmax_rows(logits)
            count_fn = ngram_count_ctc if mode == "ctc" else ngram_count_sctc
            # skip instances near a min() tie, where the subgradient is one-sided
            margins = [abs(count_fn(p, g) - c) for g, c in ref.items()]
            if min(margins) < 1e-3:
                continue
            out = f1_loss(logits, ref, n, mode)
            h = 1e-6
            for t in range(4):
                for k in range(3):
                    lp = logits.copy()
                    lp[t, k] += h
                    lm = logits.copy()
                    lm[t, k] -= h
                    fd = (
                        f1_loss(lp, ref, n, mode).value
                        - f1_loss(lm, ref, n, mode).value
                    ) / (2 * h)
                    assert math.isclose(
                        fd, out.grad[t, k], rel_tol=1e-4, abs_tol=1e-7
                    )
            checked += 1
    assert checked >= 5


def test_combined_loss():
    l1 = LossAndGrad(value=-0.4, grad=np.ones((2, 2)))
    l2 = LossAndGrad(value=-0.6, grad=np.zeros((2, 2)))
    out = combined_loss(0.5, l1, l2)
    assert out.value == pytest.approx(-0.5)
    assert np.allclose(out.grad, 0.5)
    assert combined_loss(1.0, l1, l2).value == pytest.approx(-0.4)
    assert combined_loss(0.0, l1, l2).value == pytest.approx(-0.6)
    with pytest.raises(ValueError):
        combined_loss(1.5, l1, l2)
