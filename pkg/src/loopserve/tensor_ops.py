"""Dense linear algebra and attention primitives shared by every other module.

All functions are pure, operate on float64 numpy arrays, and reduce in
ascending index order, so results are bit-stable regardless of how callers
parallelize. Matrices are row-major throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AllMaskedRow, DimensionMismatch, EmptyPlan, NonFiniteInput
from .opcount import OpCounter

# Additive-mask constant for the reference sparsification path. exp(-1e8)
# underflows to exactly 0.0 in float64, so the additive form and the gather
# form agree to machine precision.
MASK_CONSTANT = 1e8


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by subtracting each row's max.

    -inf entries are allowed and map to exactly zero weight. A row that is
    entirely -inf has no valid normalization and raises AllMaskedRow; NaN or
    +inf anywhere raises NonFiniteInput.
    """
    a = np.asarray(logits, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got ndim={a.ndim}")
    if np.isnan(a).any() or np.isposinf(a).any():
        raise NonFiniteInput("logits contain NaN or +inf")
    row_max = a.max(axis=1)
    if np.isneginf(row_max).any():
        raise AllMaskedRow("a row is entirely -inf")
    w = np.exp(a - row_max[:, None])
    return w / w.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class AttentionBlock:
    """A rectangular causal attention slice: the trailing n_new query rows
    against all n_total key columns.

    Row r corresponds to global position row_offset + r and may only attend
    to columns <= that position. Every row is a probability distribution.
    """

    weights: np.ndarray
    row_offset: int

    def __post_init__(self):
        w = self.weights
        if w.ndim != 2:
            raise DimensionMismatch("weights must be 2-D")
        n_new, n_total = w.shape
        if n_new > n_total:
            raise DimensionMismatch(f"n_new={n_new} exceeds n_total={n_total}")
        if self.row_offset != n_total - n_new:
            raise DimensionMismatch(
                f"row_offset={self.row_offset} != n_total-n_new={n_total - n_new}"
            )
        if not np.isfinite(w).all():
            raise NonFiniteInput("attention weights must be finite")
        sums = w.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise DimensionMismatch("attention rows must each sum to 1")
        for r in range(n_new):
            if np.any(w[r, self.row_offset + r + 1:] != 0.0):
                raise DimensionMismatch("nonzero weight above the causal boundary")

    @property
    def n_new(self) -> int:
        return self.weights.shape[0]

    @property
    def n_total(self) -> int:
        return self.weights.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def row_positions(self) -> np.ndarray:
        return self.row_offset + np.arange(self.n_new)


def _check_qkv(Q: np.ndarray, K: np.ndarray, V: np.ndarray, row_offset: int) -> None:
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionMismatch("Q, K, V must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise DimensionMismatch(f"Q cols {Q.shape[1]} != K cols {K.shape[1]}")
    if V.shape[0] != K.shape[0]:
        raise DimensionMismatch(f"V rows {V.shape[0]} != K rows {K.shape[0]}")
    if row_offset != K.shape[0] - Q.shape[0] or row_offset < 0:
        raise DimensionMismatch(
            f"row_offset={row_offset} must equal K rows - Q rows >= 0"
        )


def scaled_dot_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    row_offset: int,
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, AttentionBlock]:
    """Full causal attention. Returns the output rows and the attention block
    itself for diagnostics.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    _check_qkv(Q, K, V, row_offset)
    n_new, n_total = Q.shape[0], K.shape[0]
    logits = (Q @ K.T) / math.sqrt(Q.shape[1])
    if counter is not None:
        counter.add(n_new * n_total)
    cols = np.arange(n_total)
    rows = row_offset + np.arange(n_new)
    logits[cols[None, :] > rows[:, None]] = -np.inf
    A = softmax_rows(logits)
    Z = A @ V
    return Z, AttentionBlock(weights=A, row_offset=row_offset)


def _row_columns(plan, g: int) -> np.ndarray:
    """Columns of global row g selected by the plan, ascending. Falls back to
    the diagonal cell when the plan leaves the row uncovered (softmax over an
    empty set is undefined and the diagonal is always causally valid)."""
    cols = {c for c in plan.selected_verticals if 0 <= c <= g}
    cols.update(g - d for d in plan.selected_slashes if 0 <= g - d)
    if not cols:
        cols = {g}
    return np.fromiter(sorted(cols), dtype=np.intp)


def masked_sparse_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    plan,
    row_offset: int,
    counter: OpCounter | None = None,
    return_weights: bool = False,
):
    """Attention evaluated only on the plan's slash/vertical lines.

    Scores are gathered per row and normalized over the computed cells, which
    equals the additive-mask formulation in the limit of an infinite mask
    constant while avoiding the underflow of explicitly masked logits. The
    number of score cells computed is at most the sum of selected line
    lengths; `counter` records the exact count.

    `plan` is any object exposing `selected_slashes` and `selected_verticals`
    iterables of global offsets/columns.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    _check_qkv(Q, K, V, row_offset)
    if not plan.selected_slashes and not plan.selected_verticals:
        raise EmptyPlan("plan selects no lines")
    n_new = Q.shape[0]
    scale = 1.0 / math.sqrt(Q.shape[1])
    Z = np.zeros((n_new, V.shape[1]))
    weights = np.zeros((n_new, K.shape[0])) if return_weights else None
    for r in range(n_new):
        cols = _row_columns(plan, row_offset + r)
        if counter is not None:
            counter.add(len(cols))
        scores = (K[cols] @ Q[r]) * scale
        w = np.exp(scores - scores.max())
        w /= w.sum()
        Z[r] = w @ V[cols]
        if return_weights:
            weights[r, cols] = w
    if return_weights:
        return Z, AttentionBlock(weights=weights, row_offset=row_offset)
    return Z


def masked_sparse_attention_reference(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    plan,
    row_offset: int,
    mask_constant: float = MASK_CONSTANT,
) -> np.ndarray:
    """Additive-mask form of masked_sparse_attention, for equivalence tests.

    Builds the binary keep-mask M from the plan plus the diagonal fallback
    and evaluates softmax(QK^T/sqrt(d) - c(1-M)) V over full rows.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    _check_qkv(Q, K, V, row_offset)
    if not plan.selected_slashes and not plan.selected_verticals:
        raise EmptyPlan("plan selects no lines")
    n_new, n_total = Q.shape[0], K.shape[0]
    M = np.zeros((n_new, n_total))
    for r in range(n_new):
        M[r, _row_columns(plan, row_offset + r)] = 1.0
    logits = (Q @ K.T) / math.sqrt(Q.shape[1]) - mask_constant * (1.0 - M)
    A = softmax_rows(logits)
    return A @ V
