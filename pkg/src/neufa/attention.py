"""Bidirectional attention: one compatibility matrix, two normalizations.

Two key sets K1 [n1 x d_k1] and K2 [n2 x d_k2] produce a single shared
matrix A [n1 x n2].  Normalizing A over its first axis weighs the n1 rows
of V1 for every position in n2; normalizing the transpose weighs V2 for
every position in n1.  Both summaries are therefore convex combinations
of value rows, which is what makes the attention weights readable as
soft alignments.

The diagonal constraint matrix penalizes attention mass far from the
relative diagonal.  Its entries use half-index relative positions
p = (i + 0.5) / n1 and q = (j + 0.5) / n2 so the ratio terms stay finite
at the edges, and it is a plain constant: gradients flow only through
the attention weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Linear
from .tensor import Tensor

__all__ = [
    "BiAttentionConfig",
    "BiAttentionOutput",
    "DiagonalConstraint",
    "shared_matrix_multiplicative",
    "shared_matrix_additive",
    "bidirectional_attend",
    "diagonal_constraint_matrix",
    "diagonal_attention_loss",
]

FORMS = ("multiplicative", "additive")


@dataclass(frozen=True)
class BiAttentionConfig:
    d_a: int
    form: str
    d_k1: int
    d_k2: int
    d_v1: int
    d_v2: int

    def __post_init__(self):
        for field in ("d_a", "d_k1", "d_k2", "d_v1", "d_v2"):
            if getattr(self, field) < 1:
                raise ConfigurationError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.form not in FORMS:
            raise ConfigurationError(f"form must be one of {FORMS}, got {self.form!r}")


@dataclass
class BiAttentionOutput:
    A: Tensor    # [n1 x n2] shared compatibility matrix
    W12: Tensor  # [n1 x n2], each column sums to 1 over the n1 axis
    W21: Tensor  # [n2 x n1], each column sums to 1 over the n2 axis
    O1: Tensor   # [n2 x d_v1] convex summaries of V1
    O2: Tensor   # [n1 x d_v2] convex summaries of V2


@dataclass
class DiagonalConstraint:
    D: np.ndarray
    half_index: bool = True


def shared_matrix_multiplicative(K1: Tensor, K2: Tensor, f1: Linear, f2: Linear) -> Tensor:
    """A = f1(K1) . f2(K2)^T, both projections into the attention space."""
    p1, p2 = f1(K1), f2(K2)
    if p1.data.shape[1] != p2.data.shape[1]:
        raise DimensionError(
            f"projected key extents differ: {p1.shape} vs {p2.shape}"
        )
    return T.matmul(p1, T.transpose(p2))


def shared_matrix_additive(K1: Tensor, K2: Tensor, f1: Linear, f2: Linear, fa: Linear) -> Tensor:
    """A[i, j] = fa(f1(K1)[i] + f2(K2)[j]) via duplication to [n1 x n2 x d_a]."""
    p1, p2 = f1(K1), f2(K2)
    if p1.data.shape[1] != p2.data.shape[1]:
        raise DimensionError(f"projected key extents differ: {p1.shape} vs {p2.shape}")
    n1, n2 = p1.data.shape[0], p2.data.shape[0]
    d_a = p1.data.shape[1]
    grid = T.dup_rows(p1, n2) + T.dup_cols(p2, n1)  # [n1 x n2 x d_a]
    flat = T.reshape(grid, (n1 * n2, d_a))
    return T.reshape(fa(flat), (n1, n2))


def bidirectional_attend(A: Tensor, V1: Tensor, V2: Tensor) -> BiAttentionOutput:
    """Normalize the shared matrix both ways and summarize both value sets."""
    n1, n2 = A.data.shape
    if V1.data.shape[0] != n1:
        raise DimensionError(f"V1 must have {n1} rows to match A, got {V1.shape}")
    if V2.data.shape[0] != n2:
        raise DimensionError(f"V2 must have {n2} rows to match A, got {V2.shape}")
    w12 = T.softmax(A, axis=0)
    w21 = T.softmax(T.transpose(A), axis=0)
    o1 = T.matmul(T.transpose(w12), V1)
    o2 = T.matmul(T.transpose(w21), V2)
    return BiAttentionOutput(A=A, W12=w12, W21=w21, O1=o1, O2=o2)


def diagonal_constraint_matrix(n1: int, n2: int) -> DiagonalConstraint:
    """Constant penalty matrix, minimal where relative positions coincide.

    Entries are tanh(max(p/q, q/p, (1-p)/(1-q), (1-q)/(1-p)) / 2), which
    lives in [tanh(0.5), 1): the ratio max is >= 1 with equality exactly
    at p == q, and tanh never reaches 1.
    """
    if n1 < 1 or n2 < 1:
        raise ConfigurationError(f"extents must be >= 1, got {n1}, {n2}")
    p = (np.arange(n1, dtype=np.float64) + 0.5)[:, None] / n1
    q = (np.arange(n2, dtype=np.float64) + 0.5)[None, :] / n2
    ratios = np.maximum.reduce([p / q, q / p, (1.0 - p) / (1.0 - q), (1.0 - q) / (1.0 - p)])
    return DiagonalConstraint(D=np.tanh(0.5 * ratios))


def diagonal_attention_loss(w_tts: Tensor, w_asr: Tensor, constraint: DiagonalConstraint) -> Tensor:
    """Mean of (W_TTS + W_ASR^T) weighted by the constraint matrix."""
    d = constraint.D
    if w_tts.data.shape != d.shape:
        raise DimensionError(f"W_TTS shape {w_tts.shape} does not match constraint {d.shape}")
    if w_asr.data.shape != d.shape[::-1]:
        raise DimensionError(f"W_ASR shape {w_asr.shape} does not match constraint {d.shape}")
    combined = w_tts + T.transpose(w_asr)
    return T.mean_value(combined * Tensor(d))
