import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopserve.errors import DimensionMismatch, EmptyWindow, SizeMismatch
from loopserve.kvcompress import ground_truth_topB
from loopserve.metrics import (
    MetricsRecord,
    accuracy,
    adjacent_vs_distant,
    block_overlap_series,
    f1,
    lcs_length,
    line_overlap_ratio,
    recovery_curve,
    rouge_l,
    segment_overlap,
    task_score,
    write_csv,
    write_json,
)
from loopserve.prefill import SparsePlan
from loopserve.synthetic import drifting_attention, planted_sparse_block, random_causal_block


def plan_of(slashes, verticals, n_total):
    return SparsePlan(
        selected_slashes=frozenset(slashes),
        selected_verticals=frozenset(verticals),
        achieved_coverage=0.0,
        approx_sum=0.0,
        total_weight=1.0,
        n_total=n_total,
    )


def exhaustive_lcs(a, b):
    """Oracle: longest subsequence of b that is also a subsequence of a."""
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    best = 0
    for k in range(len(b), 0, -1):
        for combo in itertools.combinations(b, k):
            if is_subseq(combo, a):
                return k
    return best


class TestF1:
    def test_identical(self):
        assert f1("a b c".split(), "a b c".split()) == 1.0

    def test_disjoint(self):
        assert f1(["x"], ["y"]) == 0.0

    def test_hand_two_thirds(self):
        assert f1("a b c".split(), "a b d".split()) == pytest.approx(2 / 3)

    def test_multiset_semantics(self):
        assert f1(["a", "a"], ["a"]) == pytest.approx(2 / 3)

    def test_empty_prediction(self):
        assert f1([], ["a"]) == 0.0

    def test_empty_reference_rejected(self):
        with pytest.raises(EmptyWindow):
            f1(["a"], [])


class TestRougeL:
    def test_identical(self):
        assert rouge_l("a b".split(), "a b".split()) == 1.0

    def test_disjoint(self):
        assert rouge_l(["x"], ["a", "b"]) == 0.0

    def test_recall_form(self):
        assert rouge_l("the cat sat".split(), "the cat".split()) == 1.0

    def test_subsequence_not_substring(self):
        assert rouge_l("a x b y c".split(), "a b c".split()) == 1.0

    @given(st.integers(0, 5000))
    @settings(max_examples=50, deadline=None)
    def test_lcs_matches_exhaustive_oracle(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        alphabet = list("abcd")
        a = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(0, 9))]
        b = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(1, 8))]
        assert lcs_length(a, b) == exhaustive_lcs(a, b)


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([1, 2], [1, 2]) == 1.0

    def test_all_wrong(self):
        assert accuracy([1, 2], [2, 1]) == 0.0

    def test_three_of_four(self):
        assert accuracy([1, 1, 1, 0], [1, 1, 1, 1]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(SizeMismatch):
            accuracy([1], [1, 2])


class TestScoreBounds:
    @given(st.integers(0, 2000))
    @settings(max_examples=50, deadline=None)
    def test_all_metrics_within_unit_interval(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        vocab = list("abcdef")
        pred = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(0, 10))]
        ref = [vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 10))]
        for score in (f1(pred, ref), rouge_l(pred, ref)):
            assert 0.0 <= score <= 1.0
        assert f1(ref, ref) == 1.0
        assert rouge_l(ref, ref) == 1.0


class TestRecoveryCurve:
    def test_endpoints(self):
        blocks = {0: random_causal_block(6, 6, seed=0)}
        points = dict(recovery_curve(blocks, [0.0, 1.0]))
        assert points[0.0] == 0.0
        assert points[1.0] == pytest.approx(1.0, abs=1e-9)

    def test_monotone_in_eta(self):
        blocks = {h: random_causal_block(8, 8, seed=h) for h in range(3)}
        points = recovery_curve(blocks, np.linspace(0, 1, 11))
        ys = [y for _, y in points]
        assert all(b >= a - 1e-12 for a, b in zip(ys, ys[1:]))

    def test_planted_block_shape(self):
        # heavy lines hold >= 90% of mass, so a small top fraction recovers it
        block, _ = planted_sparse_block(32, 32, seed=1, heavy_mass=0.92)
        points = dict(recovery_curve({0: block}, [0.1, 1.0]))
        assert points[0.1] >= 0.9


class TestLineOverlap:
    def test_identical(self):
        p = plan_of([0, 1], [2], 8)
        assert line_overlap_ratio(p, p) == 1.0

    def test_disjoint(self):
        assert line_overlap_ratio(plan_of([0], [1], 8), plan_of([2], [3], 8)) == 0.0

    def test_hand_two_thirds(self):
        a = plan_of([0], [2], 8)
        b = plan_of([0, 1], [2], 8)
        assert line_overlap_ratio(a, b) == pytest.approx(2 / 3)

    def test_dimension_mismatch_is_error(self):
        with pytest.raises(DimensionMismatch):
            line_overlap_ratio(plan_of([0], [], 8), plan_of([0], [], 9))


class TestSegmentOverlap:
    def test_identical_sets(self):
        a = plan_of([0, 1], [3], 8)
        assert segment_overlap(a, a) == 1.0

    def test_disjoint(self):
        assert segment_overlap(plan_of([0], [], 8), plan_of([1], [2], 8)) == 0.0

    def test_hand_half(self):
        first = plan_of([0, 1], [], 6)
        second = plan_of([0, 1], [2, 3], 8)
        assert segment_overlap(first, second) == 0.5

    def test_wider_first_segment_rejected(self):
        with pytest.raises(DimensionMismatch):
            segment_overlap(plan_of([0], [], 9), plan_of([0], [], 8))


class TestBlockOverlapSeries:
    def test_single_block(self):
        m = block_overlap_series([np.array([1, 2])], budget=2)
        assert m.shape == (1, 1) and m[0, 0] == 1.0

    def test_identical_selections_all_ones(self):
        sel = [np.array([1, 2, 3])] * 3
        assert (block_overlap_series(sel, 3) == 1.0).all()

    def test_drifting_generator_decays_with_distance(self):
        budget, n_blocks = 12, 5
        for seed in range(5):
            heads = drifting_attention(96, 40, n_heads=2, n_blocks=n_blocks, seed=seed)
            block_len = 40 // n_blocks
            selections = []
            for b in range(n_blocks):
                rows = slice(b * block_len, (b + 1) * block_len)
                selections.append(ground_truth_topB([h[rows] for h in heads], budget))
            adj, far = adjacent_vs_distant(block_overlap_series(selections, budget))
            assert adj > far


class TestEmission:
    def record(self):
        return MetricsRecord(
            instance_id="qa-1",
            task_scores=[{"turn": 1, "metric": "f1", "value": 0.5}],
            series={"recovery": [(0.1, 0.4), (0.2, 0.9)]},
            op_counts={"decode_scores": 10},
        )

    def test_series_x_must_increase(self):
        with pytest.raises(SizeMismatch):
            MetricsRecord(instance_id="x", series={"s": [(0.2, 1.0), (0.1, 2.0)]})

    def test_csv_stable_layout(self, tmp_path):
        path = tmp_path / "out.csv"
        write_csv([self.record()], str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "instance_id,metric,x,y"
        assert lines[1] == "qa-1,f1,1.0,0.5"
        assert lines[2] == "qa-1,recovery,0.1,0.4"

    def test_json_round_trip(self, tmp_path):
        import json

        path = tmp_path / "out.json"
        write_json([self.record()], str(path))
        docs = json.loads(path.read_text())
        assert docs[0]["instance_id"] == "qa-1"
        assert docs[0]["series"]["recovery"] == [[0.1, 0.4], [0.2, 0.9]]

    def test_task_score_dispatch(self):
        assert task_score("qa", ["a"], ["a"]) == 1.0
        assert task_score("summarization", ["a", "b"], ["a", "b"]) == 1.0
        assert task_score("fewshot", ["x"], ["x"]) == 1.0
        assert task_score("fewshot", ["x"], ["y"]) == 0.0
