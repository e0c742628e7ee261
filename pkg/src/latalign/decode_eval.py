"""Decoding and evaluation: argmax and prefix beam search with n-gram
language-model fusion and length bonus, corpus BLEU, n-gram F1, entropy,
perplexity, and length-bucket reports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import (
    Sentence,
    collapse_ctc,
    collapse_sctc,
    reference_ngram_counts,
    validate_prob_matrix,
)
from .monotonic import ctc_forward

NEG_INF = float("-inf")


def argmax_decode(p: np.ndarray, mode: str = "ctc") -> Sentence:
    """Per-position argmax alignment, collapsed. Ties pick the lowest index."""
    p = validate_prob_matrix(p)
    blank = p.shape[1] - 1
    idx = p.argmax(axis=1)
    if mode == "ctc":
        return collapse_ctc(idx, blank)
    if mode == "sctc":
        return collapse_sctc(idx, blank)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# n-gram language model with add-k smoothing and backoff
# ---------------------------------------------------------------------------


class NGramLM:
    """Add-k smoothed n-gram model over word indices, with backoff to shorter
    contexts for unseen histories.

    Predictable symbols are the ``vocab_size`` words plus end-of-sentence
    (index ``vocab_size``); contexts are padded on the left with a
    begin-of-sentence marker. Conditional distributions sum to one over the
    ``vocab_size + 1`` predictable symbols.
    """

    def __init__(self, vocab_size: int, order: int = 4, k: float = 0.1):
        if order < 1:
            raise ValueError("order must be >= 1")
        if k <= 0:
            raise ValueError("smoothing constant k must be > 0")
        self.vocab_size = vocab_size
        self.order = order
        self.k = k
        self.eos = vocab_size
        self.bos = vocab_size + 1
        self._counts: dict[tuple[int, ...], Counter] = {}
        self._totals: dict[tuple[int, ...], int] = {}

    def fit(self, corpus: Iterable[Sequence[int]]) -> "NGramLM":
        n_sent = 0
        for y in corpus:
            n_sent += 1
            padded = (self.bos,) * (self.order - 1) + tuple(y)
            events = tuple(y) + (self.eos,)
            for i, w in enumerate(events):
                ctx = padded[i : i + self.order - 1]
                for m in range(self.order):
                    sub = ctx[len(ctx) - m :]
                    self._counts.setdefault(sub, Counter())[w] += 1
                    self._totals[sub] = self._totals.get(sub, 0) + 1
        if n_sent == 0:
            raise ValueError("training corpus is empty")
        return self

    def cond_logprob(self, w: int, history: Sequence[int]) -> float:
        """log p(w | history); w may be a word index or the EOS index."""
        padded = (self.bos,) * (self.order - 1) + tuple(history)
        ctx = padded[len(padded) - (self.order - 1) :] if self.order > 1 else ()
        n_symbols = self.vocab_size + 1
        for m in range(len(ctx), -1, -1):
            sub = ctx[len(ctx) - m :]
            total = self._totals.get(sub, 0)
            if total > 0 or m == 0:
                count = self._counts.get(sub, Counter()).get(w, 0)
                return math.log((count + self.k) / (total + self.k * n_symbols))
        raise AssertionError("unreachable")

    def sentence_logprob(self, y: Sequence[int]) -> float:
        """log p(y) including the end-of-sentence event."""
        y = tuple(y)
        total = 0.0
        for i, w in enumerate(y + (self.eos,)):
            total += self.cond_logprob(w, y[:i])
        return total


def train_lm(corpus: Sequence[Sequence[int]], order: int = 4, k: float = 0.1) -> NGramLM:
    if not corpus:
        raise ValueError("training corpus is empty")
    vocab_size = 1 + max((t for y in corpus for t in y), default=-1)
    return NGramLM(vocab_size, order=order, k=k).fit(corpus)


def perplexity(lm: NGramLM, corpus: Sequence[Sequence[int]]) -> float:
    """exp of the mean negative log-probability per token (EOS included)."""
    if not corpus:
        raise ValueError("corpus is empty")
    nll = -sum(lm.sentence_logprob(y) for y in corpus)
    n_tokens = sum(len(y) + 1 for y in corpus)
    return math.exp(nll / n_tokens)


# ---------------------------------------------------------------------------
# CTC prefix beam search with shallow fusion
# ---------------------------------------------------------------------------


@dataclass
class BeamConfig:
    beam_size: int = 20
    alpha: float = 0.0  # language model weight
    beta: float = 0.0  # length bonus weight

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


def _length_bonus(length: int, beta: float) -> float:
    if beta == 0.0:
        return 0.0
    return beta * (math.log(length) if length > 0 else NEG_INF)


def beam_decode(
    p: np.ndarray, lm: Optional[NGramLM], cfg: BeamConfig
) -> Sentence:
    """Prefix beam search over collapsed CTC hypotheses.

    Each surviving prefix carries its ends-in-blank / ends-in-word total
    probabilities; the LM score is added word-synchronously, and the EOS
    term plus length bonus at finalization. The greedy collapsed output is
    always scored as a fallback candidate, so the result never has a lower
    combined score than argmax decoding.
    """
    p = validate_prob_matrix(p)
    t_a, v_ext = p.shape
    blank = v_ext - 1
    with np.errstate(divide="ignore"):
        lp = np.log(p)
    use_lm = lm is not None and cfg.alpha != 0.0

    # prefix -> [log p(ends in blank), log p(ends in word), lm log p(prefix)]
    beams: dict[Sentence, list[float]] = {(): [0.0, NEG_INF, 0.0]}
    for t in range(t_a):
        new: dict[Sentence, list[float]] = {}

        def entry(prefix, parent_lm, last_word):
            e = new.get(prefix)
            if e is None:
                lm_score = parent_lm
                if last_word is not None and use_lm:
                    lm_score = parent_lm + lm.cond_logprob(last_word, prefix[:-1])
                e = [NEG_INF, NEG_INF, lm_score]
                new[prefix] = e
            return e

        for prefix, (lb, lnb, lm_score) in beams.items():
            total = np.logaddexp(lb, lnb)
            # stay on blank: prefix unchanged
            e = entry(prefix, lm_score, None)
            e[0] = np.logaddexp(e[0], total + lp[t, blank])
            # repeat the last emitted word: collapses, prefix unchanged
            if prefix:
                e[1] = np.logaddexp(e[1], lnb + lp[t, prefix[-1]])
            for w in range(blank):
                if lp[t, w] == NEG_INF:
                    continue
                src = lb if (prefix and w == prefix[-1]) else total
                if src == NEG_INF:
                    continue
                ext = entry(prefix + (w,), lm_score, w)
                ext[1] = np.logaddexp(ext[1], src + lp[t, w])

        def prune_score(item):
            # Length bonus applies only at finalization (it scores complete
            # sentences), so it is excluded from pruning.
            prefix, (lb, lnb, lm_score) = item
            return np.logaddexp(lb, lnb) + cfg.alpha * lm_score

        ranked = sorted(new.items(), key=lambda it: (-prune_score(it), it[0]))
        beams = dict(ranked[: cfg.beam_size])

    def final_score(prefix, lb, lnb, lm_score):
        total = np.logaddexp(lb, lnb)
        if use_lm:
            lm_score = lm_score + lm.cond_logprob(lm.eos, prefix)
        return total + cfg.alpha * lm_score + _length_bonus(len(prefix), cfg.beta)

    candidates = {
        prefix: final_score(prefix, lb, lnb, s) for prefix, (lb, lnb, s) in beams.items()
    }
    greedy = argmax_decode(p, "ctc")
    if greedy not in candidates:
        lm_score = 0.0
        if use_lm:
            lm_score = lm.sentence_logprob(greedy)
        candidates[greedy] = (
            ctc_forward(p, greedy)
            + cfg.alpha * lm_score
            + _length_bonus(len(greedy), cfg.beta)
        )
    return max(sorted(candidates), key=lambda y: candidates[y])


def grid_search_ab(
    dev_ps: Sequence[np.ndarray],
    dev_refs: Sequence[Sentence],
    lm: Optional[NGramLM],
    alphas: Sequence[float],
    betas: Sequence[float],
    beam_size: int = 20,
) -> tuple[float, float]:
    """Grid point maximizing dev BLEU; ties pick the lexicographically
    smallest (alpha, beta)."""
    if not dev_ps or not alphas or not betas:
        raise ValueError("dev set and grid must be nonempty")
    best_ab, best_bleu = None, -1.0
    for a in sorted(alphas):
        for b in sorted(betas):
            cfg = BeamConfig(beam_size=beam_size, alpha=a, beta=b)
            hyps = [beam_decode(p, lm, cfg) for p in dev_ps]
            score = bleu(hyps, dev_refs)
            if score > best_bleu:
                best_ab, best_bleu = (a, b), score
    return best_ab


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def bleu(hyps: Sequence[Sentence], refs: Sequence[Sentence], max_n: int = 4) -> float:
    """Corpus BLEU: modified n-gram precision up to ``max_n``, geometric
    mean over orders that occur (effective order), brevity penalty."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in size")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = tuple(hyp), tuple(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h_counts = reference_ngram_counts(hyp, n)
            r_counts = reference_ngram_counts(ref, n)
            totals[n - 1] += sum(h_counts.values())
            matches[n - 1] += sum(
                min(c, r_counts.get(g, 0)) for g, c in h_counts.items()
            )
    if hyp_len == 0:
        return 0.0
    log_prec = 0.0
    orders = 0
    for n in range(max_n):
        if totals[n] == 0:
            continue
        orders += 1
        if matches[n] == 0:
            return 0.0
        log_prec += math.log(matches[n] / totals[n])
    if orders == 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec / orders)


def ngram_f1(hyps: Sequence[Sentence], refs: Sequence[Sentence], n: int = 2) -> float:
    """Corpus-level n-gram matching F1 in [0, 1]."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in size")
    match = h_total = r_total = 0.0
    for hyp, ref in zip(hyps, refs):
        h = reference_ngram_counts(tuple(hyp), n)
        r = reference_ngram_counts(tuple(ref), n)
        h_total += sum(h.values())
        r_total += sum(r.values())
        match += sum(min(c, r.get(g, 0)) for g, c in h.items())
    denom = h_total + r_total
    return 2.0 * match / denom if denom > 0 else 0.0


def avg_entropy(ps: Sequence[np.ndarray]) -> float:
    """Mean natural-log row entropy over all positions of all matrices."""
    if not ps:
        raise ValueError("need at least one probability matrix")
    total = 0.0
    count = 0
    for p in ps:
        p = validate_prob_matrix(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = np.where(p > 0, -p * np.log(p), 0.0)
        total += float(contrib.sum())
        count += p.shape[0]
    return total / count


def length_bucket_report(
    hyps: Sequence[Sentence],
    refs: Sequence[Sentence],
    boundaries: Sequence[int],
) -> list[dict]:
    """Per-bucket BLEU by reference length, plus an overall row.

    ``boundaries`` are sorted cut points; bucket i covers lengths in
    [boundaries[i-1], boundaries[i]). Empty buckets are omitted. The overall
    row is corpus BLEU on everything, not an average of buckets.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference corpora differ in size")
    if list(boundaries) != sorted(boundaries):
        raise ValueError("bucket boundaries must be sorted")
    edges = [0, *boundaries, None]
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        pairs = [
            (h, r)
            for h, r in zip(hyps, refs)
            if len(r) >= lo and (hi is None or len(r) < hi)
        ]
        if not pairs:
            continue
        bh, br = zip(*pairs)
        label = f"{lo}-{hi - 1}" if hi is not None else f"{lo}+"
        rows.append({"bucket": label, "count": len(pairs), "bleu": bleu(bh, br)})
    rows.append({"bucket": "all", "count": len(hyps), "bleu": bleu(hyps, refs)})
    return rows
