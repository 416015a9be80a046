"""Multi-turn session loop wiring sparsified prefilling to progressive decoding.

Each turn appends the previous answer plus the new user input as a block of
fresh rows, prefills their keys/values against the whole accumulated history
(reusing cached K/V for everything before the block), records one line plan
per head, and decodes the answer. Key/value rows written during decoding are
rolled back at the end of the turn; the answer tokens are re-prefilled as
part of the next turn's block, which is also what keeps their cache entries
exact rather than inherited from compressed decoding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .kvcompress import (
    CompressionConfig,
    DecodeState,
    progressive_decode,
    retained_union,
    select_topB_obs,
    token_scores,
)
from .model import (
    KVCache,
    ModelWeights,
    argmax_token,
    decode_step,
    forward_extend,
    logits_from_hidden,
)
from .errors import SequenceTooLong
from .opcount import OpCounter
from .prefill import SparsePlan, sample_rows, sparsify_head

MODES = ("dense", "loopserve", "obswindow")


@dataclass(frozen=True)
class SessionParams:
    mode: str = "loopserve"
    alpha: float = 0.955
    comp: CompressionConfig = field(default_factory=CompressionConfig)
    sample_rate: float = 0.1
    sample_floor: int = 32
    max_new: int = 24
    eos_id: int | None = None
    seed: int = 0
    collect_timings: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.comp.validate()


@dataclass
class TurnResult:
    answer: list[int]
    input_tokens: list[int]
    plan_stats: dict | None
    op_counts: dict
    events: list
    decode_stats: object
    wall_ms: float | None


class Session:
    """One dialogue's accumulated state: token history, the append-only KV
    archive, and every turn's per-head plans."""

    def __init__(self, weights: ModelWeights, seed: int = 0):
        self.weights = weights
        self.history: list[int] = []
        self.archive = KVCache(weights.config)
        self.last_answer: list[int] = []
        self.plans: dict = {}  # (turn, layer, head) -> SparsePlan
        self.turn_index = 0
        self.seed = seed

    def head_seed(self, turn: int, layer: int, head: int) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(turn, layer, head))
        return int(ss.generate_state(1, dtype=np.uint64)[0])


def _obs_seed_from_blocks(blocks: dict, window: int) -> dict:
    seed = {}
    for lh, block in blocks.items():
        lo = max(0, block.n_new - window)
        cols = np.arange(block.n_total)
        seed[lh] = [(cols, block.weights[r]) for r in range(lo, block.n_new)]
    return seed


def _plan_stats(plans: dict, n_new: int) -> dict:
    if not plans:
        return {}
    coverages = [p.achieved_coverage for p in plans.values()]
    return {
        "heads": len(plans),
        "mean_coverage": float(np.mean(coverages)),
        "min_coverage": float(np.min(coverages)),
        "total_lines": int(
            sum(len(p.selected_slashes) + len(p.selected_verticals) for p in plans.values())
        ),
        "total_cost": int(sum(p.cost(n_new) for p in plans.values())),
    }


def run_turn(session: Session, new_input: list[int], params: SessionParams) -> TurnResult:
    """Execute one dialogue turn and append its answer to the history."""
    params.validate()
    if len(new_input) == 0:
        raise ValueError("new_input must be nonempty")
    weights = session.weights
    c = weights.config
    t0 = time.perf_counter() if params.collect_timings else None

    block_tokens = session.last_answer + list(new_input)
    session.history.extend(new_input)
    if len(session.history) + params.max_new > c.max_seq_len:
        raise SequenceTooLong(
            f"history {len(session.history)} + max_new {params.max_new} "
            f"exceeds max_seq_len={c.max_seq_len}"
        )

    turn = session.turn_index
    prefill_counter = OpCounter()
    n_new = len(block_tokens)

    if params.mode == "loopserve":
        def sparsifier(layer: int, head: int, Q: np.ndarray, K_all: np.ndarray, positions):
            if params.alpha >= 1.0:
                rows = np.arange(len(positions))  # full coverage needs every row
            else:
                rows = sample_rows(
                    len(positions),
                    params.sample_rate,
                    params.sample_floor,
                    seed=session.head_seed(turn, layer, head),
                )
            return sparsify_head(
                Q[rows], K_all, params.alpha, positions[rows], counter=prefill_counter
            )

        res = forward_extend(
            weights, session.archive, block_tokens,
            sparsifier=sparsifier, counter=prefill_counter,
        )
        for (l, h), plan in res.plans.items():
            session.plans[(turn, l, h)] = plan
        plan_stats = _plan_stats(res.plans, n_new)
    else:
        res = forward_extend(weights, session.archive, block_tokens, counter=prefill_counter)
        plan_stats = None

    prefilled_len = session.archive.length
    first_logits = logits_from_hidden(weights, res.hidden[-1])[0]
    window = params.comp.window()
    obs_seed = _obs_seed_from_blocks(res.blocks, window)

    decode_counter = OpCounter()
    if params.mode == "obswindow":
        answer, stats = _obswindow_decode(
            session, first_logits, obs_seed, params, decode_counter
        )
    else:
        comp = params.comp if params.mode == "loopserve" else CompressionConfig(budget=None)
        state = DecodeState(
            cache=session.archive, first_logits=first_logits, obs_seed=obs_seed
        )
        answer, stats = progressive_decode(
            weights, state, comp, params.max_new,
            eos_id=params.eos_id, counter=decode_counter,
        )

    session.archive.truncate(prefilled_len)
    session.history.extend(answer)
    session.last_answer = list(answer)
    session.turn_index += 1

    heads_total = c.n_layers * c.n_heads
    op_counts = {
        "prefill_scores": prefill_counter.scores,
        "prefill_dense_cells": heads_total * n_new * prefilled_len,
        "decode_scores": decode_counter.scores,
        "decode_steps": max(0, len(answer) - 1),
    }
    wall_ms = (time.perf_counter() - t0) * 1e3 if t0 is not None else None
    return TurnResult(
        answer=answer,
        input_tokens=list(new_input),
        plan_stats=plan_stats,
        op_counts=op_counts,
        events=list(stats.events),
        decode_stats=stats,
        wall_ms=wall_ms,
    )


def _obswindow_decode(session, first_logits, obs_seed, params, counter):
    """Observation-window baseline: one shared top-B selection from the last
    input rows, taken once after prefilling, then plain decoding against the
    compressed cache (new tokens accumulate; no re-selection)."""
    from .kvcompress import DecodeStats, accumulate_scores

    weights = session.weights
    c = weights.config
    cache = session.archive
    window = params.comp.window()
    heads = [(l, h) for l in range(c.n_layers) for h in range(c.n_heads)]
    stats = DecodeStats()

    if params.comp.budget is None:
        working = {lh: np.arange(cache.length, dtype=np.intp) for lh in heads}
    else:
        per_head = []
        for lh in heads:
            ids, scores = accumulate_scores(obs_seed.get(lh, []))
            full = np.zeros(cache.length)
            full[ids] = scores
            per_head.append(full)
        picked = select_topB_obs(
            np.stack(per_head), params.comp.budget, aggregate="summed_over_heads"
        )
        base = retained_union(picked, window, cache.length)
        working = {lh: base.copy() for lh in heads}
        stats.compressed = True
        for lh in heads:
            stats.events.append(
                {
                    "step": 0,
                    "head": f"L{lh[0]}H{lh[1]}",
                    "retained_ids": [int(g) for g in base],
                    "score_coverage": 1.0,
                }
            )

    answer: list[int] = []
    token = argmax_token(first_logits)
    while len(answer) < params.max_new:
        answer.append(token)
        if params.eos_id is not None and token == params.eos_id:
            break
        pre = {lh: len(working[lh]) + 1 for lh in heads}
        _, token, _ = decode_step(
            weights, cache, answer[-1], working_sets=working, counter=counter
        )
        new_pos = cache.length - 1
        for lh in heads:
            working[lh] = np.append(working[lh], new_pos)
        stats.step_head_scores.append(max(pre.values()))
        stats.step_retained.append(max(len(working[lh]) for lh in heads))
    return answer, stats


@dataclass
class SessionResult:
    instance_id: str
    answers: list
    transcript: dict
    events: list
    turn_results: list


def run_session(weights: ModelWeights, instance, vocab, params: SessionParams) -> SessionResult:
    """Run every turn of a dialogue instance under the chosen mode."""
    from .benchgen import render_turn

    params.validate()
    if not instance.turns:
        raise ValueError("instance has no turns")
    session = Session(weights, seed=params.seed)
    turns_out = []
    answers = []
    events = []
    results = []
    for j, turn in enumerate(instance.turns, start=1):
        tokens = vocab.encode(render_turn(turn))
        result = run_turn(session, tokens, params)
        results.append(result)
        answers.append(result.answer)
        for e in result.events:
            events.append({"turn": j, **e})
        turns_out.append(
            {
                "input_tokens": result.input_tokens,
                "answer_tokens": result.answer,
                "plan_stats": result.plan_stats,
                "op_counts": result.op_counts,
                "wall_ms": result.wall_ms,
            }
        )
    transcript = {
        "instance_id": instance.id,
        "mode": params.mode,
        "seed": params.seed,
        "turns": turns_out,
    }
    return SessionResult(
        instance_id=instance.id,
        answers=answers,
        transcript=transcript,
        events=events,
        turn_results=results,
    )
