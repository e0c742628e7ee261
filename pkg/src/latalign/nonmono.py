"""Non-monotonic objectives: best-alignment bipartite matching and
differentiable n-gram F1 losses over the output lattice.

Count lattices live in linear space (counts are bounded by the lattice
length); losses take logits so gradients flow through the row softmax.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
import torch
from dataclasses import dataclass
from scipy.optimize import linear_sum_assignment

from .core import (
    NGramCountTable,
    Sentence,
    softmax_rows,
    validate_prob_matrix,
)
from .monotonic import LossAndGrad, ZeroLikelihoodError

# Stand-in for log(0) edge weights in the assignment problem; large enough to
# never be chosen over a finite edge, small enough that T_a of them cannot
# overflow.
LOG_ZERO_SENTINEL = -1.0e15


@dataclass
class AssignmentProblem:
    """Square max-weight matching between lattice positions and target slots.

    Columns 0..T-1 carry the target words of ``y`` in order; the remaining
    columns are blank slots. ``weights[t][s]`` is the log-probability of
    position ``t`` producing the label of column ``s``.
    """

    weights: np.ndarray
    column_labels: tuple[int, ...]


def build_assignment(p: np.ndarray, y: Sequence[int]) -> AssignmentProblem:
    p = validate_prob_matrix(p)
    y = tuple(y)
    t_a, v_ext = p.shape
    blank = v_ext - 1
    if len(y) > t_a:
        raise ValueError("target longer than the lattice")
    labels = y + (blank,) * (t_a - len(y))
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    weights = lp[:, list(labels)]
    return AssignmentProblem(weights=weights, column_labels=labels)


def hungarian_max(problem: AssignmentProblem) -> tuple[tuple[int, ...], float]:
    """Maximum-weight perfect matching; returns (column of each row, weight).

    Edges with -inf weight are replaced by a large negative sentinel for the
    solver; the reported total restores -inf if such an edge was matched.
    """
    w = problem.weights
    finite = np.where(np.isfinite(w), w, LOG_ZERO_SENTINEL)
    rows, cols = linear_sum_assignment(finite, maximize=True)
    perm = tuple(int(c) for c in cols[np.argsort(rows)])
    total = float(sum(w[t, perm[t]] for t in range(len(perm))))
    return perm, total


def bipartite_loss(logits: np.ndarray, y: Sequence[int]) -> LossAndGrad:
    """Negative log-probability of the best non-monotonic alignment.

    The gradient is the subgradient with the argmax matching held fixed:
    the matched cells behave like cross-entropy targets.
    """
    logits = np.asarray(logits, dtype=np.float64)
    p = softmax_rows(logits)
    perm, total = hungarian_max(build_assignment(p, y))
    if not np.isfinite(total):
        raise ZeroLikelihoodError("best alignment has zero probability")
    problem = build_assignment(p, y)
    grad = p.copy()
    for t, c in enumerate(perm):
        grad[t, problem.column_labels[c]] -= 1.0
    return LossAndGrad(value=-total, grad=grad)


def transition_matrix(p: np.ndarray) -> np.ndarray:
    """A[i][j]: probability that all positions strictly between i and j are
    blank; zero for j <= i, one for j == i + 1. Built by running products."""
    p = validate_prob_matrix(p)
    t_a, v_ext = p.shape
    blank = v_ext - 1
    A = np.zeros((t_a, t_a))
    for i in range(t_a):
        prod = 1.0
        for j in range(i + 1, t_a):
            A[i, j] = prod
            prod *= p[j, blank]
    return A


def _check_gram(g: Sequence[int], v_ext: int) -> tuple[int, ...]:
    g = tuple(int(t) for t in g)
    if len(g) < 1:
        raise ValueError("n-gram must have order >= 1")
    if any(t < 0 or t >= v_ext - 1 for t in g):
        raise ValueError("n-gram contains blank or out-of-range tokens")
    return g


def ngram_count_sctc(p: np.ndarray, g: Sequence[int]) -> float:
    """Expected count of ``g`` in the blank-removing collapse of the lattice.

    State-vector recursion, O(n * T_a^2).
    """
    p = validate_prob_matrix(p)
    g = _check_gram(g, p.shape[1])
    t_a = p.shape[0]
    if len(g) > t_a:
        return 0.0
    A = transition_matrix(p)
    s = p[:, g[0]].copy()
    for tok in g[1:]:
        s = (s @ A) * p[:, tok]
    return float(s.sum())


def ngram_count_sctc_direct(p: np.ndarray, g: Sequence[int]) -> float:
    """Reference n-fold summation, O(n * T_a^n); small instances only."""
    p = validate_prob_matrix(p)
    g = _check_gram(g, p.shape[1])
    t_a = p.shape[0]
    n = len(g)
    if n > t_a:
        return 0.0
    A = transition_matrix(p)
    total = 0.0
    for idxs in itertools.product(range(t_a), repeat=n):
        term = p[idxs[0], g[0]]
        for k in range(1, n):
            term *= A[idxs[k - 1], idxs[k]] * p[idxs[k], g[k]]
        total += term
    return total


def sum_ngram_counts_sctc(p: np.ndarray, n: int) -> float:
    """Total expected model n-gram count under the blank-removing collapse.

    For n = 1 this is exact; for n > 1 it is the 1-gram total shifted by
    n - 1, which is exact only when the collapsed output is almost surely at
    least n - 1 tokens long (it underestimates otherwise).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = validate_prob_matrix(p)
    blank = p.shape[1] - 1
    total1 = float((1.0 - p[:, blank]).sum())
    return total1 - (n - 1)


def repeat_count(p: np.ndarray, w: int) -> float:
    """Expected number of adjacent repeats of word ``w`` removed by the
    repeat-merging collapse."""
    p = validate_prob_matrix(p)
    (w,) = _check_gram((w,), p.shape[1])
    return float((p[:-1, w] * p[1:, w]).sum())


def total_repeat_count(p: np.ndarray) -> float:
    """Sum of repeat_count over all words."""
    p = validate_prob_matrix(p)
    blank = p.shape[1] - 1
    return float((p[:-1, :blank] * p[1:, :blank]).sum())


def ngram_count_ctc(p: np.ndarray, g: Sequence[int]) -> float:
    """Expected count of ``g`` under the full CTC collapse; n in {1, 2} only.

    Reuses the blank-only count, subtracting the merged-repeat mass when the
    gram's tokens coincide.
    """
    p = validate_prob_matrix(p)
    g = _check_gram(g, p.shape[1])
    n = len(g)
    if n > 2:
        raise ValueError("CTC-side n-gram counts support only n in {1, 2}")
    c_s = ngram_count_sctc(p, g)
    if n == 1:
        return c_s - repeat_count(p, g[0])
    if g[0] == g[1]:
        return c_s - repeat_count(p, g[0])
    return c_s


def sum_ngram_counts_ctc(p: np.ndarray, n: int) -> float:
    """CTC-side analogue of sum_ngram_counts_sctc, n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError("CTC-side totals support only n in {1, 2}")
    p = validate_prob_matrix(p)
    blank = p.shape[1] - 1
    total1 = float((1.0 - p[:, blank]).sum()) - total_repeat_count(p)
    return total1 - (n - 1)


# ---------------------------------------------------------------------------
# Differentiable F1 loss (torch graph shared with the training loop).
# ---------------------------------------------------------------------------


def _transition_torch(logp_eps: torch.Tensor) -> torch.Tensor:
    """Torch transition matrix from the per-position blank log-probabilities."""
    t_a = logp_eps.shape[0]
    le = logp_eps.clamp_min(2.0 * np.log(np.finfo(np.float64).tiny))
    spad = torch.cat([le.new_zeros(1), torch.cumsum(le, 0)])
    # sum over positions strictly between i and j: spad[j] - spad[i + 1]
    m = spad[:t_a].unsqueeze(0) - spad[1:].unsqueeze(1)
    A = torch.exp(m)
    mask = torch.arange(t_a).unsqueeze(0) > torch.arange(t_a).unsqueeze(1)
    return torch.where(mask, A, torch.zeros_like(A))


def _gram_count_torch(
    p: torch.Tensor, A: torch.Tensor, g: tuple[int, ...], mode: str
) -> torch.Tensor:
    s = p[:, g[0]]
    for tok in g[1:]:
        s = (s @ A) * p[:, tok]
    count = s.sum()
    if mode == "ctc" and (len(g) == 1 or g[0] == g[1]):
        count = count - (p[:-1, g[0]] * p[1:, g[0]]).sum()
    return count


def f1_loss_torch(
    logp: torch.Tensor, ref_counts: NGramCountTable, n: int, mode: str
) -> torch.Tensor:
    """Negative n-gram matching F1 as a torch scalar.

    ``logp`` is a (T_a, |V*|) log-probability matrix in the autograd graph.
    Model counts are computed only for grams with positive reference count;
    min() ties resolve to the saturated (constant) side.
    """
    if mode not in ("ctc", "sctc"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "ctc" and n not in (1, 2):
        raise ValueError("CTC-mode matching supports only n in {1, 2}")
    if n < 1:
        raise ValueError("n must be >= 1")
    t_a, v_ext = logp.shape
    blank = v_ext - 1
    p = logp.exp()
    A = _transition_torch(logp[:, blank]) if n > 1 else None
    match = logp.new_zeros(())
    for g, cref in ref_counts.items():
        if cref <= 0 or len(g) != n:
            continue
        c = _gram_count_torch(p, A, g, mode)
        if c.item() < cref:
            match = match + c
        else:
            match = match + cref
    total1 = (1.0 - p[:, blank]).sum()
    if mode == "ctc":
        total1 = total1 - (p[:-1, :blank] * p[1:, :blank]).sum()
    model_total = total1 - (n - 1)
    ref_total = float(sum(ref_counts.values()))
    denom = ref_total + model_total
    if abs(denom.item()) < 1e-12:
        return logp.new_zeros(())
    return -2.0 * match / denom


def f1_loss(
    logits: np.ndarray, ref_counts: NGramCountTable, n: int, mode: str
) -> LossAndGrad:
    """Negative matching F1 with gradient w.r.t. logits."""
    lt = torch.tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    logp = torch.log_softmax(lt, dim=-1)
    loss = f1_loss_torch(logp, ref_counts, n, mode)
    if loss.requires_grad:
        loss.backward()
        grad = lt.grad.numpy()
    else:
        grad = np.zeros_like(np.asarray(logits, dtype=np.float64))
    return LossAndGrad(value=float(loss.item()), grad=grad)


def combined_loss(alpha: float, l1: LossAndGrad, l2: LossAndGrad) -> LossAndGrad:
    """Linear interpolation of two losses and their gradients."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return LossAndGrad(
        value=alpha * l1.value + (1.0 - alpha) * l2.value,
        grad=alpha * l1.grad + (1.0 - alpha) * l2.grad,
    )
