"""End-to-end toy experiment: synthetic two-mode data, pretrain/finetune,
decoding and evaluation. Shared by the CLI and the verification suites."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from . import decode_eval, model
from .core import Sentence, softmax_rows
from .decode_eval import BeamConfig, NGramLM
from .model import SyntheticTask, ToyModelParams, TrainConfig


@dataclass
class ToyDatasets:
    task: SyntheticTask
    train: list
    dev: list
    test: list


def make_datasets(
    seed: int,
    vocab_size: int = 20,
    reorder_prob: float = 0.5,
    n_train: int = 8000,
    n_dev: int = 1000,
    n_test: int = 1000,
    min_len: int = 6,
    max_len: int = 10,
) -> ToyDatasets:
    task = model.make_task(vocab_size, reorder_prob, seed, min_len, max_len)
    pairs = model.generate_synthetic(task, n_train + n_dev + n_test, seed)
    return ToyDatasets(
        task=task,
        train=pairs[:n_train],
        dev=pairs[n_train : n_train + n_dev],
        test=pairs[n_train + n_dev :],
    )


def batched_prob_matrices(
    params: ToyModelParams, sources: Sequence[Sentence]
) -> list[np.ndarray]:
    """Forward a corpus, grouped by source length for speed."""
    groups: dict[int, list[int]] = {}
    for i, src in enumerate(sources):
        groups.setdefault(len(src), []).append(i)
    pt = {n: torch.tensor(a) for n, a in params.arrays().items()}
    out: list[Optional[np.ndarray]] = [None] * len(sources)
    with torch.no_grad():
        for length in sorted(groups):
            idxs = groups[length]
            src = torch.tensor([sources[i] for i in idxs], dtype=torch.long)
            logits = model._forward_torch(pt, src, params.upsample_factor).numpy()
            for j, i in enumerate(idxs):
                out[i] = softmax_rows(logits[j])
    return out  # type: ignore[return-value]


def evaluate_params(
    params: ToyModelParams, pairs, mode: str = "ctc"
) -> dict[str, float]:
    """Argmax-decode a corpus and report BLEU, 2-gram F1 and avg entropy."""
    sources = [src for src, _ in pairs]
    refs = [tgt for _, tgt in pairs]
    ps = batched_prob_matrices(params, sources)
    hyps = [decode_eval.argmax_decode(p, mode) for p in ps]
    return {
        "bleu": decode_eval.bleu(hyps, refs),
        "f1_2gram": decode_eval.ngram_f1(hyps, refs, 2),
        "entropy": decode_eval.avg_entropy(ps),
    }


def default_train_config(seed: int) -> TrainConfig:
    return TrainConfig(
        pretrain_objective="ctc",
        finetune_objective="f1",
        finetune_n=2,
        finetune_mode="ctc",
        pretrain_steps=900,
        finetune_steps=250,
        pretrain_lr=5e-3,
        finetune_lr=1e-3,
        batch_size=32,
        hidden_dim=32,
        seed=seed,
    )


def run_toy_experiment(
    seed: int,
    datasets: Optional[ToyDatasets] = None,
    cfg: Optional[TrainConfig] = None,
    eval_split: str = "test",
) -> dict:
    """Pretrain-only vs pretrain+finetune comparison on the two-mode task."""
    if datasets is None:
        datasets = make_datasets(seed)
    if cfg is None:
        cfg = default_train_config(seed)
    cfg.validate()
    n_src = len(datasets.task.src_vocab)
    n_tgt_ext = len(datasets.task.tgt_vocab) + 1
    rng = np.random.default_rng([cfg.seed, 0])
    params = model.init_params(
        n_src, n_tgt_ext, cfg.hidden_dim, cfg.upsample_factor, rng
    )
    metrics: list = []
    model.pretrain(params, datasets.train, cfg, metrics)
    pre_params = params.copy()
    model.finetune(params, datasets.train, cfg, metrics)
    pairs = getattr(datasets, eval_split)
    pre = evaluate_params(pre_params, pairs)
    fine = evaluate_params(params, pairs)
    return {
        "seed": seed,
        "pretrain": pre,
        "finetune": fine,
        "bleu_gain": fine["bleu"] - pre["bleu"],
        "params_pretrain": pre_params,
        "params_finetune": params,
        "metrics": metrics,
    }


def beam_vs_argmax(
    params: ToyModelParams,
    datasets: ToyDatasets,
    alphas: Sequence[float] = (0.0, 0.1, 0.3),
    betas: Sequence[float] = (0.0, 0.5, 1.0),
    beam_size: int = 20,
    n_dev: int = 50,
    n_test: int = 300,
    lm_order: int = 4,
) -> dict:
    """Grid-search the fusion weights on dev, compare beam and argmax BLEU."""
    lm = decode_eval.train_lm([tgt for _, tgt in datasets.train], order=lm_order)
    dev = datasets.dev[:n_dev]
    test = datasets.test[:n_test]
    dev_ps = batched_prob_matrices(params, [s for s, _ in dev])
    alpha, beta = decode_eval.grid_search_ab(
        dev_ps, [t for _, t in dev], lm, alphas, betas, beam_size
    )
    test_ps = batched_prob_matrices(params, [s for s, _ in test])
    test_refs = [t for _, t in test]
    cfg = BeamConfig(beam_size=beam_size, alpha=alpha, beta=beta)
    beam_hyps = [decode_eval.beam_decode(p, lm, cfg) for p in test_ps]
    argmax_hyps = [decode_eval.argmax_decode(p, "ctc") for p in test_ps]
    return {
        "alpha": alpha,
        "beta": beta,
        "beam_bleu": decode_eval.bleu(beam_hyps, test_refs),
        "argmax_bleu": decode_eval.bleu(argmax_hyps, test_refs),
    }
