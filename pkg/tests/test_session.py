import numpy as np
import pytest

from loopserve.benchgen import (
    build_qa_instance,
    make_noise_paragraphs,
    make_qa_corpus,
    corpus_texts,
)
from loopserve.errors import SequenceTooLong
from loopserve.kvcompress import CompressionConfig
from loopserve.model import ModelConfig, generate, init_weights
from loopserve.session import Session, SessionParams, run_session, run_turn
from loopserve.tokenizer import build_vocab

CFG = ModelConfig(
    n_layers=2, n_heads=2, d_model=8, d_k=4, d_v=4, vocab_size=400, max_seq_len=512
)


@pytest.fixture(scope="module")
def weights():
    return init_weights(CFG, seed=7)


@pytest.fixture(scope="module")
def corpus_and_vocab():
    corpus = make_qa_corpus(12, seed=3)
    noise = make_noise_paragraphs(6, seed=4)
    vocab = build_vocab(corpus_texts(corpus) + noise)
    assert len(vocab) <= CFG.vocab_size
    return corpus, noise, vocab


def lossless_params(mode, seed=0):
    return SessionParams(
        mode=mode,
        alpha=1.0,
        comp=CompressionConfig(budget=None),
        max_new=12,
        seed=seed,
    )


class TestRunTurn:
    def test_single_turn_lossless_matches_dense_generate(self, weights):
        prompt = [5, 9, 2, 2, 7, 1]
        session = Session(weights, seed=0)
        result = run_turn(session, prompt, lossless_params("loopserve"))
        assert result.answer == generate(weights, prompt, max_new=12)

    def test_two_sessions_identical(self, weights):
        params = SessionParams(mode="loopserve", alpha=0.9, max_new=10, seed=5,
                               comp=CompressionConfig(budget=8, interval=4, warmup=4))
        transcripts = []
        for _ in range(2):
            session = Session(weights, seed=5)
            r1 = run_turn(session, [4, 8, 15, 16], params)
            r2 = run_turn(session, [23, 42, 4], params)
            transcripts.append((r1.answer, r2.answer))
        assert transcripts[0] == transcripts[1]

    def test_three_turn_bookkeeping(self, weights):
        session = Session(weights, seed=1)
        params = lossless_params("loopserve")
        inputs = [[3, 1, 4, 1, 5], [9, 2, 6], [5, 3, 5, 8]]
        answers = [run_turn(session, x, params).answer for x in inputs]
        expected_len = sum(map(len, inputs)) + sum(map(len, answers))
        assert len(session.history) == expected_len
        assert session.turn_index == 3
        # one plan per turn per (layer, head)
        assert len(session.plans) == 3 * CFG.n_layers * CFG.n_heads
        for (turn, l, h), plan in session.plans.items():
            assert 0 <= turn < 3
            assert plan.achieved_coverage >= 1.0 - 1e-9

    def test_history_matches_block_structure(self, weights):
        session = Session(weights, seed=2)
        params = lossless_params("dense")
        r1 = run_turn(session, [10, 11], params)
        assert session.history == [10, 11] + r1.answer
        r2 = run_turn(session, [12], params)
        assert session.history == [10, 11] + r1.answer + [12] + r2.answer
        # archive rolls decode rows back: it covers history up to turn 2's input
        assert session.archive.length == len([10, 11] + r1.answer + [12])

    def test_empty_input_rejected(self, weights):
        with pytest.raises(ValueError):
            run_turn(Session(weights, seed=0), [], lossless_params("dense"))

    def test_sequence_too_long(self, weights):
        session = Session(weights, seed=0)
        with pytest.raises(SequenceTooLong):
            run_turn(session, [1] * 510, lossless_params("dense"))

    def test_sparse_prefill_cheaper_on_low_alpha(self, weights):
        rng = np.random.Generator(np.random.PCG64(0))
        prompt = [int(x) for x in rng.integers(0, 300, size=180)]
        dense = run_turn(Session(weights, seed=3), prompt,
                         SessionParams(mode="dense", max_new=4, seed=3))
        sparse = run_turn(Session(weights, seed=3), prompt,
                          SessionParams(mode="loopserve", alpha=0.6, max_new=4, seed=3,
                                        sample_rate=0.1, sample_floor=16))
        assert sparse.plan_stats is not None
        assert sparse.plan_stats["mean_coverage"] >= 0.6 - 1e-9
        assert dense.op_counts["prefill_scores"] == dense.op_counts["prefill_dense_cells"]
        assert sparse.op_counts["prefill_scores"] < dense.op_counts["prefill_scores"]


class TestModes:
    def test_lossless_reduction_all_modes_agree(self, weights, corpus_and_vocab):
        corpus, noise, vocab = corpus_and_vocab
        inst = build_qa_instance(corpus, 2, None, noise, seed=11, instance_id="qa-11")
        results = {
            mode: run_session(weights, inst, vocab, lossless_params(mode))
            for mode in ("dense", "loopserve", "obswindow")
        }
        assert results["dense"].answers == results["loopserve"].answers
        assert results["dense"].answers == results["obswindow"].answers

    def test_obswindow_selects_once_per_turn(self, weights, corpus_and_vocab):
        corpus, noise, vocab = corpus_and_vocab
        inst = build_qa_instance(corpus, 2, None, noise, seed=12, instance_id="qa-12")
        params = SessionParams(
            mode="obswindow", max_new=10, seed=0,
            comp=CompressionConfig(budget=12, interval=4, warmup=4, obs_window=8),
        )
        res = run_session(weights, inst, vocab, params)
        n_heads = CFG.n_layers * CFG.n_heads
        for j in (1, 2):
            turn_events = [e for e in res.events if e["turn"] == j]
            assert len(turn_events) == n_heads
            assert all(e["step"] == 0 for e in turn_events)

    def test_loopserve_compression_bounds_cache(self, weights, corpus_and_vocab):
        corpus, noise, vocab = corpus_and_vocab
        inst = build_qa_instance(corpus, 2, None, noise, seed=13, instance_id="qa-13")
        budget, window = 10, 4
        params = SessionParams(
            mode="loopserve", alpha=0.9, max_new=16, seed=0,
            comp=CompressionConfig(budget=budget, interval=4, warmup=4, obs_window=window),
        )
        res = run_session(weights, inst, vocab, params)
        for tr in res.turn_results:
            stats = tr.decode_stats
            assert stats.compressed
            first = stats.events[0]["step"]
            for step, retained in enumerate(stats.step_retained, start=1):
                if step >= first:
                    assert retained <= budget + window

    def test_transcript_schema(self, weights, corpus_and_vocab):
        corpus, noise, vocab = corpus_and_vocab
        inst = build_qa_instance(corpus, 3, None, noise, seed=14, instance_id="qa-14")
        res = run_session(weights, inst, vocab, lossless_params("loopserve"))
        t = res.transcript
        assert t["instance_id"] == "qa-14"
        assert t["mode"] == "loopserve"
        assert len(t["turns"]) == 3
        for turn in t["turns"]:
            assert set(turn) == {
                "input_tokens", "answer_tokens", "plan_stats", "op_counts", "wall_ms"
            }
            assert turn["wall_ms"] is None  # timings only when requested

    def test_empty_instance_rejected(self, weights, corpus_and_vocab):
        _, _, vocab = corpus_and_vocab
        from loopserve.benchgen import DialogueInstance

        with pytest.raises(ValueError):
            run_session(
                weights, DialogueInstance(id="x", task="qa", turns=[]), vocab,
                lossless_params("dense"),
            )
