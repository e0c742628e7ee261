"""Oracle-equivalence, gradient and invariant suites.

Each suite draws random small instances, compares the production code
against brute force or finite differences, and reports the maximum observed
error. The CLI ``verify`` subcommand runs all suites and fails on any
violation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import decode_eval, experiments, model, monotonic, nonmono, oracle
from .core import reference_ngram_counts, softmax_rows


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_err: float
    n_checks: int
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "max_err": self.max_err,
            "n_checks": self.n_checks,
            "detail": self.detail,
        }


def _rel_err(got: float, want: float, floor: float = 1e-30) -> float:
    return abs(got - want) / max(abs(want), floor)


def _random_instance(rng, max_ta=6, max_v=3, max_t=3, spread=1.5):
    v = int(rng.integers(1, max_v + 1))
    t_a = int(rng.integers(1, max_ta + 1))
    logits = rng.normal(0.0, spread, (t_a, v + 1))
    p = softmax_rows(logits)
    t = int(rng.integers(0, min(max_t, t_a) + 1))
    y = tuple(int(w) for w in rng.integers(0, v, t))
    return logits, p, y, v


def _random_gram(rng, v, n):
    return tuple(int(w) for w in rng.integers(0, v, n))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def suite_total_probability(n=50, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 100])
    max_err = 0.0
    for _ in range(n):
        _, p, _, _ = _random_instance(rng)
        total = sum(oracle.collapsed_distribution(p, "sctc").values())
        max_err = max(max_err, abs(total - 1.0))
    return SuiteResult("oracle_total_probability", max_err <= tol, max_err, n)


def suite_likelihood(mode: str, n=200, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 101, 0 if mode == "sctc" else 1])
    max_err = 0.0
    for _ in range(n):
        _, p, y, _ = _random_instance(rng)
        want = oracle.exact_likelihood(p, y, mode)
        if mode == "sctc":
            got = math.exp(monotonic.sctc_log_likelihood(p, y))
        else:
            ll = monotonic.ctc_forward(p, y)
            got = math.exp(ll) if np.isfinite(ll) else 0.0
        err = _rel_err(got, want) if want > 0 else abs(got)
        max_err = max(max_err, err)
    return SuiteResult(f"likelihood_{mode}", max_err <= tol, max_err, n)


def suite_likelihood_bound(n=100, seed=0, tol=1e-12):
    """Blank-only likelihood <= full-collapse likelihood for repeat-free y."""
    rng = np.random.default_rng([seed, 102])
    max_err = 0.0
    checks = 0
    for _ in range(n):
        _, p, y, _ = _random_instance(rng)
        if monotonic.num_adjacent_repeats(y) > 0:
            continue
        checks += 1
        s = oracle.exact_likelihood(p, y, "sctc")
        c = oracle.exact_likelihood(p, y, "ctc")
        max_err = max(max_err, s - c)
    return SuiteResult("sctc_subset_of_ctc", max_err <= tol, max_err, checks)


def suite_permutation_sum(n=50, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 103])
    max_err = 0.0
    checks = 0
    for _ in range(n):
        _, p, y, _ = _random_instance(rng, max_ta=5)
        if len(y) > p.shape[0]:
            continue
        checks += 1
        perms = set(itertools.permutations(y))
        total = sum(oracle.exact_likelihood(p, yp, "sctc") for yp in perms)
        want = oracle.exact_sum_nonmonotonic(p, y)
        max_err = max(max_err, _rel_err(total, want, 1e-15))
    return SuiteResult("permutation_sum_identity", max_err <= tol, max_err, checks)


def suite_counts_sctc(n=200, seed=0, tol=1e-9, orders=(1, 2, 3, 4)):
    rng = np.random.default_rng([seed, 104])
    max_err = 0.0
    checks = 0
    for _ in range(n):
        _, p, _, v = _random_instance(rng)
        for order in orders:
            if order > p.shape[0]:
                continue
            g = _random_gram(rng, v, order)
            want = oracle.exact_ngram_count(p, g, "sctc")
            got = nonmono.ngram_count_sctc(p, g)
            max_err = max(max_err, _rel_err(got, want, 1e-12))
            checks += 1
    return SuiteResult("counts_sctc", max_err <= tol, max_err, checks)


def suite_counts_ctc(n=200, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 105])
    max_err = 0.0
    checks = 0
    for i in range(n):
        _, p, _, v = _random_instance(rng)
        grams = [_random_gram(rng, v, 1)]
        if p.shape[0] >= 2:
            w = int(rng.integers(0, v))
            grams.append((w, w))  # repeated-token case of the correction
            grams.append(_random_gram(rng, v, 2))
        for g in grams:
            want = oracle.exact_ngram_count(p, g, "ctc")
            got = nonmono.ngram_count_ctc(p, g)
            max_err = max(max_err, _rel_err(got, want, 1e-12))
            checks += 1
    return SuiteResult("counts_ctc", max_err <= tol, max_err, checks)


def suite_statevec_vs_direct(n=100, seed=0, tol=1e-12):
    rng = np.random.default_rng([seed, 106])
    max_err = 0.0
    checks = 0
    for _ in range(n):
        _, p, _, v = _random_instance(rng, max_ta=5)
        for order in (1, 2, 3, 4):
            if order > p.shape[0]:
                continue
            g = _random_gram(rng, v, order)
            got = nonmono.ngram_count_sctc(p, g)
            want = nonmono.ngram_count_sctc_direct(p, g)
            max_err = max(max_err, _rel_err(got, want, 1e-12))
            checks += 1
    return SuiteResult("state_recursion_vs_direct_sum", max_err <= tol, max_err, checks)


def suite_repeat_identity(n=100, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 107])
    max_err = 0.0
    for _ in range(n):
        _, p, _, v = _random_instance(rng)
        w = int(rng.integers(0, v))
        want = oracle.exact_ngram_count(p, (w,), "sctc") - oracle.exact_ngram_count(
            p, (w,), "ctc"
        )
        got = nonmono.repeat_count(p, w)
        max_err = max(max_err, abs(got - want))
    return SuiteResult("repeat_count_identity", max_err <= tol, max_err, n)


def suite_hungarian(n=100, seed=0, tol=1e-9):
    rng = np.random.default_rng([seed, 108])
    max_err = 0.0
    bound_err = 0.0
    for _ in range(n):
        _, p, y, _ = _random_instance(rng, max_ta=7, max_t=4)
        if len(y) > p.shape[0]:
            y = y[: p.shape[0]]
        _, weight = nonmono.hungarian_max(nonmono.build_assignment(p, y))
        _, best = oracle.exact_best_alignment(p, y)
        max_err = max(max_err, _rel_err(math.exp(weight), best, 1e-15))
        total = oracle.exact_sum_nonmonotonic(p, y)
        # -log max >= -log sum, i.e. max <= sum
        bound_err = max(bound_err, math.exp(weight) - total)
    passed = max_err <= tol and bound_err <= tol
    return SuiteResult(
        "hungarian_optimality", passed, max_err, n, f"bound_violation={bound_err:.2e}"
    )


def suite_eq18_blankfree(n=100, seed=0, tol=1e-9):
    """On blank-free lattices the shifted 1-gram total is exact for n=2."""
    rng = np.random.default_rng([seed, 109])
    max_err = 0.0
    for _ in range(n):
        v = int(rng.integers(1, 4))
        t_a = int(rng.integers(2, 6))
        pw = softmax_rows(rng.normal(0.0, 1.5, (t_a, v)))
        p = np.concatenate([pw, np.zeros((t_a, 1))], axis=1)
        got = nonmono.sum_ngram_counts_sctc(p, 2)
        dist = oracle.collapsed_distribution(p, "sctc")
        want = sum(prob * max(len(y) - 1, 0) for y, prob in dist.items())
        max_err = max(max_err, _rel_err(got, want, 1e-12))
    return SuiteResult("ngram_total_blankfree_exact", max_err <= tol, max_err, n)


# ---------------------------------------------------------------------------
# Gradient suites
# ---------------------------------------------------------------------------


def _fd_check(loss_fn, logits, grad, step=1e-5, rel_tol=1e-4, min_grad=1e-8):
    """Central finite differences on every logit; returns max relative error."""
    max_err = 0.0
    flat = logits.reshape(-1)
    for i in range(flat.size):
        base = flat[i]
        flat[i] = base + step
        up = loss_fn(logits)
        flat[i] = base - step
        down = loss_fn(logits)
        flat[i] = base
        fd = (up - down) / (2 * step)
        g = grad.reshape(-1)[i]
        if abs(g) <= min_grad and abs(fd) <= min_grad:
            continue
        max_err = max(max_err, abs(g - fd) / max(abs(fd), min_grad))
    return max_err


def suite_grad_monotonic(mode: str, n=20, seed=0, tol=1e-4):
    rng = np.random.default_rng([seed, 110, 0 if mode == "sctc" else 1])
    max_err = 0.0
    checks = 0
    loss = monotonic.sctc_loss if mode == "sctc" else monotonic.ctc_loss
    while checks < n:
        logits, p, y, _ = _random_instance(rng, max_ta=4, max_t=3)
        if not y:
            continue
        feasible = (
            len(y) <= p.shape[0]
            if mode == "sctc"
            else monotonic.ctc_feasible(p.shape[0], y)
        )
        if not feasible:
            continue
        checks += 1
        res = loss(logits, y)
        err = _fd_check(lambda L: loss(L, y).value, logits, res.grad)
        max_err = max(max_err, err)
    return SuiteResult(f"grad_{mode}", max_err <= tol, max_err, checks)


def _tie_free(logits, ref, n, mode, margin=1e-4):
    p = softmax_rows(logits)
    for g, cref in ref.items():
        c = (
            nonmono.ngram_count_sctc(p, g)
            if mode == "sctc"
            else nonmono.ngram_count_ctc(p, g)
        )
        if abs(c - cref) < margin:
            return False
    return True


def suite_grad_f1(n=20, seed=0, tol=1e-4, cases=(("sctc", 1), ("sctc", 2), ("sctc", 3), ("ctc", 1), ("ctc", 2))):
    rng = np.random.default_rng([seed, 111])
    max_err = 0.0
    checks = 0
    for mode, order in cases:
        done = 0
        while done < n:
            logits, p, y, _ = _random_instance(rng, max_ta=5, max_t=3)
            if len(y) < order:
                continue
            ref = reference_ngram_counts(y, order)
            if not _tie_free(logits, ref, order, mode):
                continue  # min() tie active; perturbed instance instead
            done += 1
            checks += 1
            res = nonmono.f1_loss(logits, ref, order, mode)
            err = _fd_check(
                lambda L: nonmono.f1_loss(L, ref, order, mode).value,
                logits,
                res.grad,
            )
            max_err = max(max_err, err)
    return SuiteResult("grad_f1", max_err <= tol, max_err, checks)


def suite_grad_bipartite(n=20, seed=0, tol=1e-4):
    """Subgradient vs finite differences where the matching is locally stable."""
    rng = np.random.default_rng([seed, 112])
    max_err = 0.0
    checks = 0
    step = 1e-5
    while checks < n:
        logits, p, y, _ = _random_instance(rng, max_ta=5, max_t=3)
        if not y:
            continue
        checks += 1
        res = nonmono.bipartite_loss(logits, y)
        base_perm, _ = nonmono.hungarian_max(
            nonmono.build_assignment(softmax_rows(logits), y)
        )
        flat = logits.reshape(-1)
        for i in range(flat.size):
            b = flat[i]
            vals = []
            stable = True
            for delta in (step, -step):
                flat[i] = b + delta
                perm, _ = nonmono.hungarian_max(
                    nonmono.build_assignment(softmax_rows(logits), y)
                )
                if perm != base_perm:
                    stable = False
                vals.append(nonmono.bipartite_loss(logits, y).value)
            flat[i] = b
            if not stable:
                continue
            fd = (vals[0] - vals[1]) / (2 * step)
            g = res.grad.reshape(-1)[i]
            if abs(g) <= 1e-8 and abs(fd) <= 1e-8:
                continue
            max_err = max(max_err, abs(g - fd) / max(abs(fd), 1e-8))
    return SuiteResult("grad_bipartite", max_err <= tol, max_err, checks)


def suite_grad_model(seed=0, tol=1e-4):
    """End-to-end gradient through the toy model on one small instance."""
    rng = np.random.default_rng([seed, 113])
    params = model.init_params(5, 6, 8, 3, rng)
    src = (0, 3, 1)
    y = (2, 0, 4)

    def loss_value(arrays):
        pt = {n: torch.tensor(a) for n, a in arrays.items()}
        s = torch.tensor([src], dtype=torch.long)
        logp = torch.log_softmax(model._forward_torch(pt, s, 3), dim=-1)
        return float(-monotonic.ctc_log_likelihood_torch(logp, torch.tensor([y]))[0])

    arrays = params.arrays()
    pt = {n: torch.tensor(a, requires_grad=True) for n, a in arrays.items()}
    s = torch.tensor([src], dtype=torch.long)
    logp = torch.log_softmax(model._forward_torch(pt, s, 3), dim=-1)
    loss = -monotonic.ctc_log_likelihood_torch(logp, torch.tensor([y]))[0]
    loss.backward()
    step = 1e-5
    max_err = 0.0
    checks = 0
    for name, a in arrays.items():
        grad = pt[name].grad.numpy()
        flat = a.reshape(-1)
        for i in range(flat.size):
            b = flat[i]
            flat[i] = b + step
            up = loss_value(arrays)
            flat[i] = b - step
            down = loss_value(arrays)
            flat[i] = b
            fd = (up - down) / (2 * step)
            g = grad.reshape(-1)[i]
            if abs(g) <= 1e-7 and abs(fd) <= 1e-7:
                continue
            max_err = max(max_err, abs(g - fd) / max(abs(fd), 1e-7))
            checks += 1
    return SuiteResult("grad_model_end_to_end", max_err <= tol, max_err, checks)


# ---------------------------------------------------------------------------
# Loss-shape, decoding, LM and training suites
# ---------------------------------------------------------------------------


def suite_f1_range(n=100, seed=0, tol=1e-12):
    rng = np.random.default_rng([seed, 114])
    worst = 0.0
    for _ in range(n):
        logits, p, y, _ = _random_instance(rng, max_ta=5, max_t=3)
        if not y:
            continue
        for order in (1, 2):
            if len(y) < order:
                continue
            ref = reference_ngram_counts(y, order)
            val = nonmono.f1_loss(logits, ref, order, "sctc").value
            worst = max(worst, val, -1.0 - val)
    return SuiteResult("f1_loss_range", worst <= tol, worst, n)


def suite_beam_exact(n=50, seed=0, tol=1e-9):
    """Full-width beam with no fusion equals the exhaustive MAP sentence."""
    rng = np.random.default_rng([seed, 115])
    max_err = 0.0
    monotone_err = 0.0
    for _ in range(n):
        _, p, _, _ = _random_instance(rng, max_ta=4, max_v=2)
        dist = oracle.collapsed_distribution(p, "ctc")
        best_prob = max(dist.values())
        got = decode_eval.beam_decode(
            p, None, decode_eval.BeamConfig(beam_size=100000)
        )
        max_err = max(max_err, _rel_err(dist[got], best_prob, 1e-15))
        # beam at alpha=beta=0 never scores below the greedy collapse
        narrow = decode_eval.beam_decode(p, None, decode_eval.BeamConfig(beam_size=4))
        greedy = decode_eval.argmax_decode(p, "ctc")
        monotone_err = max(
            monotone_err,
            monotonic.ctc_forward(p, greedy) - monotonic.ctc_forward(p, narrow),
        )
    passed = max_err <= tol and monotone_err <= tol
    return SuiteResult(
        "beam_exact_and_dominates_argmax", passed, max_err, n,
        f"argmax_dominance_violation={monotone_err:.2e}",
    )


def suite_entropy_invariance(n=20, seed=0, tol=1e-12):
    rng = np.random.default_rng([seed, 116])
    max_err = 0.0
    for _ in range(n):
        ps = [softmax_rows(rng.normal(0, 1, (int(rng.integers(1, 5)), 4))) for _ in range(3)]
        base = decode_eval.avg_entropy(ps)
        shuffled = [p[rng.permutation(p.shape[0])] for p in ps[::-1]]
        max_err = max(max_err, abs(base - decode_eval.avg_entropy(shuffled)))
    return SuiteResult("entropy_permutation_invariance", max_err <= tol, max_err, n)


def suite_lm(seed=0):
    rng = np.random.default_rng([seed, 117])
    corpus = [tuple(int(w) for w in rng.integers(0, 5, rng.integers(3, 8))) for _ in range(200)]
    lm = decode_eval.train_lm(corpus, order=3, k=0.1)
    max_err = 0.0
    for _ in range(20):
        hist = tuple(int(w) for w in rng.integers(0, 5, rng.integers(0, 4)))
        total = sum(
            math.exp(lm.cond_logprob(w, hist)) for w in range(lm.vocab_size + 1)
        )
        max_err = max(max_err, abs(total - 1.0))
    ppl = decode_eval.perplexity(lm, corpus)
    tokens = [w for y in corpus for w in y]
    rng.shuffle(tokens)
    it = iter(tokens)
    shuffled = [tuple(next(it) for _ in y) for y in corpus]
    ppl_shuffled = decode_eval.perplexity(lm, shuffled)
    passed = max_err <= 1e-9 and ppl >= 1.0 and ppl <= ppl_shuffled
    return SuiteResult(
        "lm_normalization_and_perplexity", passed, max_err, 20,
        f"ppl={ppl:.2f} shuffled={ppl_shuffled:.2f}",
    )


def suite_train_reproducibility(seed=0):
    datasets = experiments.make_datasets(seed, vocab_size=6, n_train=40, n_dev=5, n_test=5)
    cfg = model.TrainConfig(
        pretrain_steps=25, finetune_steps=10, batch_size=8, hidden_dim=8, seed=seed
    )
    runs = []
    for _ in range(2):
        params, _ = model.train(cfg, datasets.train)
        runs.append(params)
    same = all(
        np.array_equal(runs[0].arrays()[n], runs[1].arrays()[n])
        for n in model.PARAM_NAMES
    )
    return SuiteResult("train_bit_reproducibility", same, 0.0 if same else 1.0, 1)


def suite_finetune_improvement(seed=0, window=500):
    """Moving-average finetune loss must not degrade across windows."""
    datasets = experiments.make_datasets(
        seed, vocab_size=10, n_train=600, n_dev=20, n_test=20
    )
    cfg = model.TrainConfig(
        pretrain_steps=200, finetune_steps=2 * 200, batch_size=16,
        hidden_dim=16, seed=seed,
    )
    _, metrics = model.train(cfg, datasets.train)
    losses = [m["loss"] for m in metrics if m["phase"] == "finetune"]
    w = min(window, len(losses) // 2)
    first = float(np.mean(losses[:w]))
    last = float(np.mean(losses[-w:]))
    err = max(0.0, last - first)
    return SuiteResult(
        "finetune_moving_average_improves", err <= 1e-6, err, len(losses),
        f"first={first:.4f} last={last:.4f}",
    )


DEFAULT_SUITES: list[Callable[[], SuiteResult]] = [
    lambda: suite_total_probability(),
    lambda: suite_likelihood("sctc"),
    lambda: suite_likelihood("ctc"),
    lambda: suite_likelihood_bound(),
    lambda: suite_permutation_sum(),
    lambda: suite_counts_sctc(),
    lambda: suite_counts_ctc(),
    lambda: suite_statevec_vs_direct(),
    lambda: suite_repeat_identity(),
    lambda: suite_hungarian(),
    lambda: suite_eq18_blankfree(),
    lambda: suite_grad_monotonic("sctc"),
    lambda: suite_grad_monotonic("ctc"),
    lambda: suite_grad_f1(),
    lambda: suite_grad_bipartite(),
    lambda: suite_grad_model(),
    lambda: suite_f1_range(),
    lambda: suite_beam_exact(),
    lambda: suite_entropy_invariance(),
    lambda: suite_lm(),
    lambda: suite_train_reproducibility(),
    lambda: suite_finetune_improvement(),
]


def run_all(
    corrupt_transition: bool = False, suites=None
) -> list[SuiteResult]:
    """Run every suite; ``corrupt_transition`` is a test-mode mutation hook
    that perturbs the transition matrix to prove the harness can fail."""
    import unittest.mock

    suites = suites if suites is not None else DEFAULT_SUITES
    results = []
    if corrupt_transition:
        real = nonmono.transition_matrix

        def corrupted(p):
            A = real(p)
            return A + 1e-3 * (A > 0)

        ctx = unittest.mock.patch.object(nonmono, "transition_matrix", corrupted)
    else:
        import contextlib

        ctx = contextlib.nullcontext()
    with ctx:
        for suite in suites:
            results.append(suite())
    return results
