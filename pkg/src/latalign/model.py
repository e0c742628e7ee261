"""Minimal trainable non-autoregressive model and its training schedule.

The model is deliberately tiny: token embedding, uniform copy of each source
embedding ``upsample_factor`` times, one position-wise tanh layer, and an
output projection over the extended vocabulary. All the interesting
behaviour lives in the objectives, which act on the output lattice only.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import Sentence, Vocabulary, reference_ngram_counts
from .monotonic import (
    ctc_feasible,
    ctc_log_likelihood_torch,
    sctc_log_likelihood_torch,
)
from .nonmono import build_assignment, f1_loss_torch, hungarian_max

logger = logging.getLogger(__name__)

PARAM_NAMES = ("embed", "w_h", "b_h", "w_o", "b_o")


class TrainingDivergedError(Exception):
    def __init__(self, step: int, phase: str):
        super().__init__(f"non-finite loss at {phase} step {step}")
        self.step = step
        self.phase = phase


@dataclass
class ToyModelParams:
    embed: np.ndarray  # (|V_src|, d)
    w_h: np.ndarray  # (d, d)
    b_h: np.ndarray  # (d,)
    w_o: np.ndarray  # (d, |V*|)
    b_o: np.ndarray  # (|V*|,)
    upsample_factor: int = 3

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(
            **{n: a.copy() for n, a in self.arrays().items()},
            upsample_factor=self.upsample_factor,
        )


def init_params(
    n_src: int,
    n_tgt_extended: int,
    hidden_dim: int,
    upsample_factor: int,
    rng: np.random.Generator,
) -> ToyModelParams:
    """Uniform [-0.1, 0.1] initialization, fixed for reproducibility."""
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    return ToyModelParams(
        embed=u(n_src, hidden_dim),
        w_h=u(hidden_dim, hidden_dim),
        b_h=u(hidden_dim),
        w_o=u(hidden_dim, n_tgt_extended),
        b_o=u(n_tgt_extended),
        upsample_factor=upsample_factor,
    )


def _forward_torch(
    pt: dict[str, torch.Tensor], sources: torch.Tensor, upsample_factor: int
) -> torch.Tensor:
    """sources: (B, T_src) long -> logits (B, T_src * factor, |V*|)."""
    emb = pt["embed"][sources]  # (B, T_src, d)
    dec = emb.repeat_interleave(upsample_factor, dim=1)
    h = torch.tanh(dec @ pt["w_h"] + pt["b_h"])
    return h @ pt["w_o"] + pt["b_o"]


def forward(params: ToyModelParams, source: Sequence[int]) -> np.ndarray:
    """Logits of shape (upsample_factor * |source|, |V*|)."""
    source = tuple(source)
    if not source:
        raise ValueError("source must be nonempty")
    pt = {n: torch.tensor(a) for n, a in params.arrays().items()}
    src = torch.tensor([source], dtype=torch.long)
    with torch.no_grad():
        logits = _forward_torch(pt, src, params.upsample_factor)
    return logits[0].numpy()


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(a) for n, a in params.items()},
            v={n: np.zeros_like(a) for n, a in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, g in grads.items():
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Synthetic two-mode task
# ---------------------------------------------------------------------------


@dataclass
class SyntheticTask:
    """Bijective token mapping with optional half-swap reordering.

    A pair is monotonic (target = mapped source) with probability
    ``1 - reorder_prob``, otherwise the mapped target has its two halves
    swapped, manufacturing global reordering with an unchanged word multiset.
    """

    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    mapping: tuple[int, ...]  # src index -> tgt index, bijective
    reorder_prob: float
    min_len: int = 6
    max_len: int = 10

    def __post_init__(self):
        if not 0.0 <= self.reorder_prob <= 1.0:
            raise ValueError("reorder_prob must be in [0, 1]")
        if sorted(self.mapping) != list(range(len(self.tgt_vocab))):
            raise ValueError("mapping must be a bijection")


def make_task(
    vocab_size: int,
    reorder_prob: float,
    seed: int,
    min_len: int = 6,
    max_len: int = 10,
) -> SyntheticTask:
    rng = np.random.default_rng([seed, 1])
    src_vocab = Vocabulary(tuple(f"s{i:02d}" for i in range(vocab_size)))
    tgt_vocab = Vocabulary(tuple(f"t{i:02d}" for i in range(vocab_size)))
    mapping = tuple(int(i) for i in rng.permutation(vocab_size))
    return SyntheticTask(src_vocab, tgt_vocab, mapping, reorder_prob, min_len, max_len)


def swap_halves(y: Sequence[int]) -> tuple[int, ...]:
    y = tuple(y)
    h = len(y) // 2
    return y[h:] + y[:h]


def generate_synthetic(
    task: SyntheticTask, n_pairs: int, seed: int
) -> list[tuple[Sentence, Sentence]]:
    """Deterministic corpus of (source, target) index pairs.

    Sources avoid adjacent repeated tokens so the per-token output lattice
    can represent every monotonic target exactly.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng([seed, 2])
    v = len(task.src_vocab)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(task.min_len, task.max_len + 1))
        src = [int(rng.integers(v))]
        while len(src) < length:
            tok = int(rng.integers(v))
            if tok != src[-1]:
                src.append(tok)
        tgt = tuple(task.mapping[t] for t in src)
        if rng.random() < task.reorder_prob:
            tgt = swap_halves(tgt)
        pairs.append((tuple(src), tgt))
    return pairs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    pretrain_objective: str = "ctc"  # ctc | sctc
    finetune_objective: str = "f1"  # f1 | bipartite
    finetune_n: int = 2
    finetune_mode: str = "ctc"  # collapse mode for the f1 objective
    pretrain_steps: int = 1000
    finetune_steps: int = 300
    pretrain_lr: float = 5e-3
    finetune_lr: float = 1e-3
    batch_size: int = 32
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    hidden_dim: int = 32
    upsample_factor: int = 3
    seed: int = 0
    eval_every: int = 200

    def validate(self) -> None:
        if self.pretrain_objective not in ("ctc", "sctc"):
            raise ValueError("pretrain_objective must be ctc or sctc")
        if self.finetune_objective not in ("f1", "bipartite"):
            raise ValueError("finetune_objective must be f1 or bipartite")
        if self.finetune_objective == "f1":
            if self.finetune_mode not in ("ctc", "sctc"):
                raise ValueError("finetune_mode must be ctc or sctc")
            if self.finetune_mode == "ctc" and self.finetune_n not in (1, 2):
                raise ValueError(
                    "n-gram matching under the full CTC collapse supports "
                    "only n in {1, 2}"
                )
        if self.finetune_objective == "bipartite" and self.pretrain_objective != "sctc":
            raise ValueError(
                "bipartite finetuning requires a blank-only (sctc) pretrained "
                "model; repeat merging breaks the assignment formulation"
            )


def _group_by_shape(batch):
    groups: dict[tuple[int, int], list] = {}
    for src, tgt in batch:
        groups.setdefault((len(src), len(tgt)), []).append((src, tgt))
    return groups


def _batch_loss(
    pt: dict[str, torch.Tensor],
    batch,
    objective: str,
    cfg: TrainConfig,
) -> torch.Tensor:
    """Mean per-sample loss of one batch as a torch scalar."""
    losses = []
    for (t_src, _), items in sorted(_group_by_shape(batch).items()):
        srcs = torch.tensor([s for s, _ in items], dtype=torch.long)
        logits = _forward_torch(pt, srcs, cfg.upsample_factor)
        logp = torch.log_softmax(logits, dim=-1)
        if objective in ("ctc", "sctc"):
            ys = torch.tensor([t for _, t in items], dtype=torch.long)
            kernel = (
                ctc_log_likelihood_torch
                if objective == "ctc"
                else sctc_log_likelihood_torch
            )
            losses.append(-kernel(logp, ys))
        elif objective == "f1":
            for i, (_, tgt) in enumerate(items):
                ref = reference_ngram_counts(tgt, cfg.finetune_n)
                losses.append(
                    f1_loss_torch(logp[i], ref, cfg.finetune_n, cfg.finetune_mode)
                )
        elif objective == "bipartite":
            p_np = logp.detach().exp().numpy()
            for i, (_, tgt) in enumerate(items):
                problem = build_assignment(p_np[i], tgt)
                perm, _ = hungarian_max(problem)
                labels = torch.tensor(
                    [problem.column_labels[c] for c in perm], dtype=torch.long
                )
                losses.append(-logp[i].gather(1, labels.unsqueeze(1)).sum())
        else:
            raise ValueError(f"unknown objective {objective!r}")
    flat = [l.reshape(-1) for l in losses]
    return torch.cat(flat).mean()


def _run_phase(
    params: ToyModelParams,
    corpus,
    objective: str,
    steps: int,
    lr: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
    phase: str,
    metrics: list,
    eval_fn: Optional[Callable] = None,
) -> None:
    arrays = params.arrays()
    state = AdamState.zeros_like(arrays)
    usable = corpus
    if objective == "ctc":
        usable = [
            pair
            for pair in corpus
            if ctc_feasible(len(pair[0]) * cfg.upsample_factor, pair[1])
        ]
    else:
        usable = [
            pair for pair in corpus if len(pair[1]) <= len(pair[0]) * cfg.upsample_factor
        ]
    if len(usable) < len(corpus):
        warnings.warn(
            f"skipping {len(corpus) - len(usable)} infeasible pairs for "
            f"objective {objective}"
        )
    if not usable:
        raise ValueError("no feasible training pairs")
    for step in range(steps):
        idx = rng.choice(len(usable), size=min(cfg.batch_size, len(usable)), replace=False)
        batch = [usable[i] for i in idx]
        pt = {n: torch.tensor(a, requires_grad=True) for n, a in arrays.items()}
        loss = _batch_loss(pt, batch, objective, cfg)
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(step, phase)
        loss.backward()
        grads = {n: pt[n].grad.numpy() for n in arrays}
        adam_step(arrays, grads, state, lr, cfg.adam_betas, cfg.adam_eps)
        record = {"phase": phase, "step": step, "loss": float(loss.item())}
        if eval_fn is not None and (step + 1) % cfg.eval_every == 0:
            record.update(eval_fn(params, phase, step))
        metrics.append(record)


def pretrain(
    params: ToyModelParams,
    corpus,
    cfg: TrainConfig,
    metrics: Optional[list] = None,
    eval_fn=None,
) -> list:
    metrics = metrics if metrics is not None else []
    rng = np.random.default_rng([cfg.seed, 10])
    _run_phase(
        params, corpus, cfg.pretrain_objective, cfg.pretrain_steps,
        cfg.pretrain_lr, cfg, rng, "pretrain", metrics, eval_fn,
    )
    return metrics


def finetune(
    params: ToyModelParams,
    corpus,
    cfg: TrainConfig,
    metrics: Optional[list] = None,
    eval_fn=None,
) -> list:
    metrics = metrics if metrics is not None else []
    rng = np.random.default_rng([cfg.seed, 11])
    _run_phase(
        params, corpus, cfg.finetune_objective, cfg.finetune_steps,
        cfg.finetune_lr, cfg, rng, "finetune", metrics, eval_fn,
    )
    return metrics


def train(
    cfg: TrainConfig,
    corpus,
    n_src: Optional[int] = None,
    n_tgt: Optional[int] = None,
    eval_fn=None,
) -> tuple[ToyModelParams, list]:
    """Pretrain with the monotonic objective, then finetune with the
    non-monotonic one. Fully reproducible given the config seed."""
    cfg.validate()
    if n_src is None:
        n_src = 1 + max(t for src, _ in corpus for t in src)
    if n_tgt is None:
        n_tgt = 1 + max((t for _, tgt in corpus for t in tgt), default=0)
    rng = np.random.default_rng([cfg.seed, 0])
    params = init_params(n_src, n_tgt + 1, cfg.hidden_dim, cfg.upsample_factor, rng)
    metrics: list = []
    pretrain(params, corpus, cfg, metrics, eval_fn)
    if cfg.finetune_steps > 0:
        finetune(params, corpus, cfg, metrics, eval_fn)
    return params, metrics


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ToyModelParams, config: dict) -> None:
    """npz archive: parameter tensors by name, plus the config as JSON."""
    meta = dict(config)
    meta["upsample_factor"] = params.upsample_factor
    np.savez(
        path,
        __config__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        **params.arrays(),
    )


def load_checkpoint(path) -> tuple[ToyModelParams, dict]:
    data = np.load(path)
    config = json.loads(bytes(data["__config__"]).decode())
    params = ToyModelParams(
        **{n: data[n] for n in PARAM_NAMES},
        upsample_factor=int(config["upsample_factor"]),
    )
    return params, config
