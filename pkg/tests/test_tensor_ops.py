import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopserve.errors import (
    AllMaskedRow,
    DimensionMismatch,
    EmptyPlan,
    NonFiniteInput,
)
from loopserve.opcount import OpCounter
from loopserve.prefill import SparsePlan, slash_length, vertical_length
from loopserve.synthetic import random_causal_block
from loopserve.tensor_ops import (
    AttentionBlock,
    masked_sparse_attention,
    masked_sparse_attention_reference,
    scaled_dot_attention,
    softmax_rows,
)


def make_plan(slashes=(), verticals=(), n_total=0):
    return SparsePlan(
        selected_slashes=frozenset(slashes),
        selected_verticals=frozenset(verticals),
        achieved_coverage=0.0,
        approx_sum=0.0,
        total_weight=0.0,
        n_total=n_total,
    )


def all_lines_plan(n_total):
    return make_plan(range(n_total), range(n_total), n_total)


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = softmax_rows(np.array([[0.0, 0.0, 0.0]]))
        assert np.allclose(out, 1.0 / 3.0)

    def test_masked_cell_is_zero(self):
        out = softmax_rows(np.array([[1.7, -np.inf]]))
        assert out[0, 0] == 1.0
        assert out[0, 1] == 0.0

    def test_hand_normalization(self):
        out = softmax_rows(np.array([[math.log(1.0), math.log(3.0)]]))
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_all_masked_row_rejected(self):
        with pytest.raises(AllMaskedRow):
            softmax_rows(np.array([[-np.inf, -np.inf]]))

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteInput):
            softmax_rows(np.array([[0.0, np.nan]]))

    def test_large_offsets_stable(self):
        out = softmax_rows(np.array([[1e4, 1e4 + 1.0]]))
        assert np.isfinite(out).all()
        assert abs(out.sum() - 1.0) < 1e-9

    def test_rows_sum_to_one_1000_seeds(self):
        for seed in range(1000):
            rng = np.random.Generator(np.random.PCG64(seed))
            m = rng.normal(scale=5.0, size=(3, 7))
            out = softmax_rows(m)
            assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-9


class TestScaledDotAttention:
    def test_single_token(self):
        Q = np.array([[0.3, -0.1]])
        K = np.array([[1.0, 2.0]])
        V = np.array([[5.0, 6.0, 7.0]])
        Z, block = scaled_dot_attention(Q, K, V, row_offset=0)
        assert np.allclose(block.weights, [[1.0]])
        assert np.allclose(Z, V)

    def test_two_identical_keys(self):
        Q = np.array([[1.0, 1.0]])
        K = np.array([[0.5, 0.5], [0.5, 0.5]])
        V = np.array([[1.0], [3.0]])
        Z, block = scaled_dot_attention(Q, K, V, row_offset=1)
        assert np.allclose(block.weights, [[0.5, 0.5]])
        assert np.allclose(Z, [[2.0]])

    def test_hand_softmax_second_row(self):
        Q = np.array([[1.0], [1.0]])
        K = np.array([[0.0], [math.log(4.0)]])
        V = np.array([[1.0], [0.0]])
        _, block = scaled_dot_attention(Q, K, V, row_offset=0)
        assert np.allclose(block.weights[1], [0.2, 0.8], atol=1e-9)
        assert np.allclose(block.weights[0], [1.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            scaled_dot_attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)), 0)

    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_causality_exact(self, seed, n_new, extra):
        rng = np.random.Generator(np.random.PCG64(seed))
        n_total = n_new + extra - 1
        d = 3
        Q = rng.normal(size=(n_new, d))
        K = rng.normal(size=(n_total, d))
        V = rng.normal(size=(n_total, 2))
        _, block = scaled_dot_attention(Q, K, V, row_offset=n_total - n_new)
        for r in range(n_new):
            g = block.row_offset + r
            assert np.all(block.weights[r, g + 1:] == 0.0)
            assert np.all(block.weights[r, : g + 1] > 0.0)


class TestMaskedSparseAttention:
    def random_qkv(self, seed, n_new=3, n_total=6, d=4):
        rng = np.random.Generator(np.random.PCG64(seed))
        return (
            rng.normal(size=(n_new, d)),
            rng.normal(size=(n_total, d)),
            rng.normal(size=(n_total, 2)),
        )

    def test_all_lines_equals_dense(self):
        Q, K, V = self.random_qkv(0)
        dense, _ = scaled_dot_attention(Q, K, V, row_offset=3)
        sparse = masked_sparse_attention(Q, K, V, all_lines_plan(6), row_offset=3)
        assert np.abs(sparse - dense).max() <= 1e-12

    def test_diagonal_only_plan(self):
        Q, K, V = self.random_qkv(1)
        plan = make_plan(slashes=[0], n_total=6)
        Z = masked_sparse_attention(Q, K, V, plan, row_offset=3)
        assert np.allclose(Z, V[3:6])

    def test_hand_renormalization_2x4(self):
        Q, K, V = self.random_qkv(2, n_new=2, n_total=4)
        dense, block = scaled_dot_attention(Q, K, V, row_offset=2)
        plan = make_plan(slashes=[0], verticals=[2], n_total=4)
        Z = masked_sparse_attention(Q, K, V, plan, row_offset=2)
        # row 0 (global 2): cells {2}; row 1 (global 3): cells {2, 3}
        w0 = block.weights[0, [2]]
        w0 = w0 / w0.sum()
        w1 = block.weights[1, [2, 3]]
        w1 = w1 / w1.sum()
        assert np.allclose(Z[0], w0 @ V[[2]], atol=1e-12)
        assert np.allclose(Z[1], w1 @ V[[2, 3]], atol=1e-12)

    def test_empty_plan_rejected(self):
        Q, K, V = self.random_qkv(3)
        with pytest.raises(EmptyPlan):
            masked_sparse_attention(Q, K, V, make_plan(n_total=6), row_offset=3)

    def test_uncovered_rows_fall_back_to_diagonal(self):
        Q, K, V = self.random_qkv(4)
        # vertical 5 is causal only for the last row; earlier rows fall back
        plan = make_plan(verticals=[5], n_total=6)
        Z = masked_sparse_attention(Q, K, V, plan, row_offset=3)
        assert np.allclose(Z[0], V[3])
        assert np.allclose(Z[1], V[4])

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_additive_mask_reference(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        n_new, n_total, d = 3, 7, 4
        Q = rng.normal(size=(n_new, d))
        K = rng.normal(size=(n_total, d))
        V = rng.normal(size=(n_total, 2))
        plan = make_plan(
            slashes=rng.choice(n_total, size=2, replace=False),
            verticals=rng.choice(n_total, size=2, replace=False),
            n_total=n_total,
        )
        fast = masked_sparse_attention(Q, K, V, plan, row_offset=n_total - n_new)
        ref = masked_sparse_attention_reference(Q, K, V, plan, row_offset=n_total - n_new)
        assert np.abs(fast - ref).max() <= 1e-9

    def test_op_count_bounded_by_line_lengths(self):
        rng = np.random.Generator(np.random.PCG64(7))
        n_new, n_total, d = 5, 9, 4
        Q = rng.normal(size=(n_new, d))
        K = rng.normal(size=(n_total, d))
        V = rng.normal(size=(n_total, 3))
        plan = make_plan(slashes=[0, 2], verticals=[1, 6], n_total=n_total)
        counter = OpCounter()
        masked_sparse_attention(Q, K, V, plan, n_total - n_new, counter=counter)
        budget = sum(slash_length(n_new, n_total, x) for x in plan.selected_slashes)
        budget += sum(vertical_length(n_new, n_total, x) for x in plan.selected_verticals)
        assert counter.scores <= budget


class TestAttentionBlock:
    def test_rejects_non_stochastic_rows(self):
        with pytest.raises(DimensionMismatch):
            AttentionBlock(weights=np.array([[0.5, 0.2]]), row_offset=1)

    def test_rejects_causality_violation(self):
        w = np.array([[0.5, 0.5], [0.5, 0.5]])
        with pytest.raises(DimensionMismatch):
            AttentionBlock(weights=w, row_offset=0)

    def test_random_generator_produces_valid_blocks(self):
        block = random_causal_block(4, 9, seed=11)
        assert block.n_new == 4 and block.n_total == 9
        assert abs(block.total_weight - 4.0) < 1e-9
