"""Dynamic-programming likelihoods and losses for CTC and its blank-only
simplification, with gradients w.r.t. logits.

The numpy forward passes are the readable reference implementations; the
torch kernels mirror them batched and provide reverse-mode gradients.
Log-space everywhere, with an impossible state mapped to a large negative
sentinel in torch so gradients stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .core import Sentence, log_softmax_rows, validate_prob_matrix

NEG = -1.0e30  # log-space sentinel for probability zero (torch kernels)


class ZeroLikelihoodError(Exception):
    """The target has probability zero under the lattice; loss undefined."""


@dataclass
class LossAndGrad:
    """Scalar objective plus its gradient w.r.t. the input logits."""

    value: float
    grad: np.ndarray


@dataclass
class ForwardTable:
    """alpha[t][s]: log-probability of emitting y_{1:s} with prefix a_{1:t}."""

    alpha: np.ndarray  # (T_a + 1, T + 1), log-space


def num_adjacent_repeats(y: Sequence[int]) -> int:
    return sum(1 for i in range(1, len(y)) if y[i] == y[i - 1])


def ctc_feasible(t_a: int, y: Sequence[int]) -> bool:
    return t_a >= len(y) + num_adjacent_repeats(y)


def sctc_forward(p: np.ndarray, y: Sequence[int]) -> ForwardTable:
    """Forward lattice for the blank-removing collapse.

    Recursion: alpha_t(s) = alpha_{t-1}(s-1) p_t(y_s) + alpha_{t-1}(s) p_t(eps).
    Targets longer than the lattice get likelihood zero (-inf), not an error.
    """
    p = validate_prob_matrix(p)
    y = tuple(y)
    t_a, v_ext = p.shape
    blank = v_ext - 1
    T = len(y)
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    alpha = np.full((t_a + 1, T + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(1, t_a + 1):
        stay = alpha[t - 1] + lp[t - 1, blank]
        alpha[t] = stay
        if T > 0:
            emit = alpha[t - 1, :-1] + lp[t - 1, list(y)]
            alpha[t, 1:] = np.logaddexp(stay[1:], emit)
    return ForwardTable(alpha=alpha)


def sctc_log_likelihood(p: np.ndarray, y: Sequence[int]) -> float:
    table = sctc_forward(p, y)
    return float(table.alpha[-1, -1])


def ctc_forward(p: np.ndarray, y: Sequence[int]) -> float:
    """Log-likelihood under the standard blank-interleaved CTC lattice.

    Returns -inf for infeasible targets (T_a < T + number of adjacent
    repeated words) rather than raising.
    """
    p = validate_prob_matrix(p)
    y = tuple(y)
    t_a, v_ext = p.shape
    blank = v_ext - 1
    if not ctc_feasible(t_a, y):
        return -np.inf
    z = [blank]
    for tok in y:
        z.extend((tok, blank))
    S = len(z)
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    alpha = np.full(S, -np.inf)
    alpha[0] = lp[0, z[0]]
    if S > 1:
        alpha[1] = lp[0, z[1]]
    for t in range(1, t_a):
        prev = alpha
        alpha = np.full(S, -np.inf)
        for s in range(S):
            v = prev[s]
            if s >= 1:
                v = np.logaddexp(v, prev[s - 1])
            if s >= 2 and z[s] != blank and z[s] != z[s - 2]:
                v = np.logaddexp(v, prev[s - 2])
            alpha[s] = v + lp[t, z[s]]
    if S > 1:
        return float(np.logaddexp(alpha[-1], alpha[-2]))
    return float(alpha[-1])


# ---------------------------------------------------------------------------
# Batched torch kernels (shared with the training loop).
# ---------------------------------------------------------------------------


def sctc_log_likelihood_torch(logp: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """logp: (B, T_a, |V*|) log-probabilities; ys: (B, T) labels. -> (B,)"""
    B, t_a, v_ext = logp.shape
    T = ys.shape[1]
    blank = v_ext - 1
    lp_eps = logp[:, :, blank]
    alpha = logp.new_full((B, T + 1), NEG)
    alpha[:, 0] = 0.0
    if T == 0:
        return alpha[:, 0] + lp_eps.sum(dim=1)
    lp_y = torch.gather(logp, 2, ys.unsqueeze(1).expand(B, t_a, T))
    for t in range(t_a):
        stay = alpha + lp_eps[:, t : t + 1]
        emit = alpha[:, :-1] + lp_y[:, t, :]
        alpha = torch.cat(
            [stay[:, :1], torch.logaddexp(stay[:, 1:], emit)], dim=1
        )
    return alpha[:, T]


def ctc_log_likelihood_torch(logp: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """logp: (B, T_a, |V*|); ys: (B, T). Assumes feasible targets. -> (B,)"""
    B, t_a, v_ext = logp.shape
    T = ys.shape[1]
    blank = v_ext - 1
    S = 2 * T + 1
    z = torch.full((B, S), blank, dtype=torch.long)
    if T > 0:
        z[:, 1::2] = ys
    lp_z = torch.gather(logp, 2, z.unsqueeze(1).expand(B, t_a, S))
    alpha = logp.new_full((B, S), NEG)
    alpha[:, 0] = lp_z[:, 0, 0]
    if S > 1:
        alpha[:, 1] = lp_z[:, 0, 1]
    can_skip = torch.zeros((B, S), dtype=torch.bool)
    if S > 2:
        can_skip[:, 2:] = (z[:, 2:] != blank) & (z[:, 2:] != z[:, :-2])
    pad1 = logp.new_full((B, 1), NEG)
    pad2 = logp.new_full((B, 2), NEG)
    for t in range(1, t_a):
        a1 = torch.cat([pad1, alpha[:, :-1]], dim=1)
        a2 = torch.cat([pad2, alpha[:, :-2]], dim=1)
        a2 = torch.where(can_skip, a2, torch.full_like(a2, NEG))
        alpha = torch.logaddexp(torch.logaddexp(alpha, a1), a2) + lp_z[:, t]
    if S > 1:
        return torch.logaddexp(alpha[:, -1], alpha[:, -2])
    return alpha[:, -1]


def _loss_from_torch(
    logits: np.ndarray, y: Sequence[int], kernel, feasible: bool
) -> LossAndGrad:
    y = tuple(y)
    if not feasible:
        raise ZeroLikelihoodError(
            f"target of length {len(y)} infeasible for lattice of length "
            f"{logits.shape[0]}"
        )
    lt = torch.tensor(np.asarray(logits, dtype=np.float64), requires_grad=True)
    logp = torch.log_softmax(lt, dim=-1).unsqueeze(0)
    ys = torch.tensor([y], dtype=torch.long)
    ll = kernel(logp, ys)[0]
    if ll.item() <= NEG / 2:
        raise ZeroLikelihoodError("target has zero probability under the lattice")
    loss = -ll
    loss.backward()
    return LossAndGrad(value=float(loss.item()), grad=lt.grad.numpy())


def sctc_loss(logits: np.ndarray, y: Sequence[int]) -> LossAndGrad:
    """Negative log-likelihood of ``y`` under the blank-removing collapse.

    Takes logits (not probabilities) because the gradient contract is w.r.t.
    the pre-softmax scores.
    """
    feasible = len(tuple(y)) <= logits.shape[0]
    return _loss_from_torch(logits, y, sctc_log_likelihood_torch, feasible)


def ctc_loss(logits: np.ndarray, y: Sequence[int]) -> LossAndGrad:
    """Negative CTC log-likelihood of ``y``, with gradient w.r.t. logits."""
    feasible = ctc_feasible(logits.shape[0], y)
    return _loss_from_torch(logits, y, ctc_log_likelihood_torch, feasible)
