"""Latent-alignment training objectives for non-autoregressive sequence
transduction: monotonic (CTC and a blank-only simplification) and
non-monotonic (bipartite matching, differentiable n-gram F1), with
brute-force oracles, a toy trainable model, and CTC beam decoding with
language-model fusion."""

from .core import (
    Vocabulary,
    collapse_ctc,
    collapse_sctc,
    multi_reference_ngram_counts,
    reference_ngram_counts,
    softmax_rows,
)
from .monotonic import (
    ForwardTable,
    LossAndGrad,
    ZeroLikelihoodError,
    ctc_forward,
    ctc_loss,
    sctc_forward,
    sctc_loss,
)
from .nonmono import (
    bipartite_loss,
    build_assignment,
    combined_loss,
    f1_loss,
    hungarian_max,
    ngram_count_ctc,
    ngram_count_sctc,
    repeat_count,
    sum_ngram_counts_ctc,
    sum_ngram_counts_sctc,
    transition_matrix,
)

__all__ = [
    "Vocabulary",
    "collapse_ctc",
    "collapse_sctc",
    "reference_ngram_counts",
    "multi_reference_ngram_counts",
    "softmax_rows",
    "ForwardTable",
    "LossAndGrad",
    "ZeroLikelihoodError",
    "sctc_forward",
    "sctc_loss",
    "ctc_forward",
    "ctc_loss",
    "build_assignment",
    "hungarian_max",
    "bipartite_loss",
    "transition_matrix",
    "ngram_count_sctc",
    "ngram_count_ctc",
    "sum_ngram_counts_sctc",
    "sum_ngram_counts_ctc",
    "repeat_count",
    "f1_loss",
    "combined_loss",
]

__version__ = "0.1.0"
