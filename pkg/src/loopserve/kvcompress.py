"""Progressive top-B token retention and KV-cache compaction during decoding.

Token importance is scored by summing, over an observation window of recent
attention rows, the weight each row puts on a candidate position. Every
re-selection interval the per-head working set is rebuilt as the top-B
scorers plus the trailing recent window, so decode-step cost tracks the
budget rather than the full history length.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyWindow, InvalidConfig, InvalidIds, SizeMismatch
from .model import KVCache, ModelWeights, argmax_token, decode_step
from .opcount import OpCounter


@dataclass(frozen=True)
class CompressionConfig:
    budget: int | None = 1024  # None disables compression entirely
    interval: int = 16
    warmup: int = 16
    obs_window: int | None = None  # defaults to interval

    def window(self) -> int:
        return self.interval if self.obs_window is None else self.obs_window

    def validate(self) -> None:
        if self.budget is not None and self.budget < 1:
            raise InvalidConfig("budget must be >= 1 (or None for unlimited)")
        if self.interval < 1 or self.warmup < 1 or self.window() < 1:
            raise InvalidConfig("interval, warmup, and obs_window must be >= 1")


@dataclass(frozen=True)
class KVCacheHead:
    """Retained key/value rows of one head, indexed by global position."""

    keys: np.ndarray
    values: np.ndarray
    retained_ids: np.ndarray
    full_len: int

    def __post_init__(self):
        ids = self.retained_ids
        if ids.ndim != 1 or (len(ids) > 1 and not (np.diff(ids) > 0).all()):
            raise InvalidIds("retained_ids must be strictly increasing")
        if len(ids) and (ids[0] < 0 or ids[-1] >= self.full_len):
            raise InvalidIds("retained_ids outside [0, full_len)")
        if self.keys.shape[0] != len(ids) or self.values.shape[0] != len(ids):
            raise InvalidIds("row count does not match retained_ids")


def token_scores(window_rows: np.ndarray) -> np.ndarray:
    """Score of candidate a = sum over the window's attention rows of the
    weight on key column a."""
    rows = np.asarray(window_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyWindow("need at least one observation row")
    return rows.sum(axis=0)


def accumulate_scores(buffered_rows) -> tuple[np.ndarray, np.ndarray]:
    """token_scores over rows with heterogeneous column sets.

    Each buffered row is (global ids, weights); missing positions count as
    zero. Returns aligned (ids, scores) with ids ascending.
    """
    totals: dict[int, float] = {}
    n = 0
    for ids, row in buffered_rows:
        n += 1
        for i, g in enumerate(ids):
            g = int(g)
            totals[g] = totals.get(g, 0.0) + float(row[i])
    if n == 0:
        raise EmptyWindow("need at least one observation row")
    ids = np.array(sorted(totals), dtype=np.intp)
    return ids, np.array([totals[int(g)] for g in ids])


def _top_by_score(ids: np.ndarray, scores: np.ndarray, budget: int) -> np.ndarray:
    if budget >= len(ids):
        return np.sort(ids)
    order = np.lexsort((ids, -scores))  # descending score, ties to smaller id
    return np.sort(ids[order[:budget]])


def select_topB_obs(
    scores: np.ndarray,
    budget: int,
    aggregate: str = "per_head",
    candidate_ids: np.ndarray | None = None,
):
    """Top-B candidate positions per head, or for all heads jointly when
    aggregate="summed_over_heads". Ties prefer the smaller position."""
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    ids = np.arange(s.shape[1]) if candidate_ids is None else np.asarray(candidate_ids)
    if len(ids) != s.shape[1]:
        raise SizeMismatch("candidate_ids length must match score columns")
    if aggregate == "summed_over_heads":
        return _top_by_score(ids, s.sum(axis=0), budget)
    if aggregate == "per_head":
        return [_top_by_score(ids, s[h], budget) for h in range(s.shape[0])]
    raise ValueError(f"unknown aggregate mode {aggregate!r}")


def ground_truth_topB(output_rows_per_head, budget: int) -> np.ndarray:
    """Importance ranking taken from the actual output rows' attention over
    the input, summed over heads: the oracle for overlap diagnostics."""
    stacked = np.stack([token_scores(rows) for rows in output_rows_per_head])
    return select_topB_obs(stacked, budget, aggregate="summed_over_heads")


def overlap_rate(selected, truth, budget: int) -> float:
    a, b = set(int(x) for x in selected), set(int(x) for x in truth)
    if len(a) != budget or len(b) != budget:
        raise SizeMismatch(f"both sets must have exactly {budget} elements")
    return len(a & b) / budget


def retained_union(selected, recent_window: int, full_len: int) -> np.ndarray:
    """Union of a selected id set and the trailing recent window, sorted."""
    recent = np.arange(max(0, full_len - recent_window), full_len)
    merged = np.union1d(np.asarray(selected, dtype=np.intp), recent)
    return merged.astype(np.intp)


def compact_cache(head: KVCacheHead, retained_ids, recent_window: int) -> KVCacheHead:
    """Keep union(retained_ids, trailing recent_window positions) of a head's
    rows; full_len is unchanged."""
    keep = retained_union(retained_ids, recent_window, head.full_len)
    have = {int(g): i for i, g in enumerate(head.retained_ids)}
    try:
        rows = np.array([have[int(g)] for g in keep], dtype=np.intp)
    except KeyError as exc:
        raise InvalidIds(f"position {exc} is not present in the cache") from exc
    return KVCacheHead(
        keys=head.keys[rows],
        values=head.values[rows],
        retained_ids=keep,
        full_len=head.full_len,
    )


@dataclass
class DecodeState:
    """Everything progressive decoding needs from the prefilled session."""

    cache: KVCache
    first_logits: np.ndarray
    obs_seed: dict  # (layer, head) -> list[(ids, row)]


@dataclass
class DecodeStats:
    events: list = field(default_factory=list)
    step_head_scores: list = field(default_factory=list)  # max per-head cells/step
    step_retained: list = field(default_factory=list)  # max per-head rows after step
    compressed: bool = False


def progressive_decode(
    weights: ModelWeights,
    state: DecodeState,
    comp: CompressionConfig,
    max_new: int,
    eos_id: int | None = None,
    counter: OpCounter | None = None,
    row_collector: list | None = None,
) -> tuple[list[int], DecodeStats]:
    """Greedy decoding with periodic per-head cache re-selection.

    The first `warmup` generated tokens decode against the full cache. At
    n_o = warmup and every `interval` tokens after that, each head's working
    set is rebuilt from the observation window: the last obs_window computed
    attention rows (seeded from the prefill block's tail, then decode rows)
    score every candidate they touched, the top-B scorers are kept, and the
    trailing recent window is always retained on top, since the newest tokens
    anchor the next steps. Between events the working set is trimmed back to
    selected + recent after each append, so post-compression retained rows
    never exceed budget + obs_window.
    """
    comp.validate()
    c = weights.config
    stats = DecodeStats()
    cache = state.cache
    window = comp.window()
    heads = [(l, h) for l in range(c.n_layers) for h in range(c.n_heads)]
    working = {lh: np.arange(cache.length, dtype=np.intp) for lh in heads}
    selected = {lh: None for lh in heads}
    obs_buf = {lh: deque(state.obs_seed.get(lh, []), maxlen=window) for lh in heads}

    answer: list[int] = []
    token = argmax_token(state.first_logits)
    while len(answer) < max_new:
        answer.append(token)
        if eos_id is not None and token == eos_id:
            break
        n_o = len(answer)
        if (
            comp.budget is not None
            and n_o >= comp.warmup
            and (n_o - comp.warmup) % comp.interval == 0
        ):
            for lh in heads:
                ids, scores = accumulate_scores(obs_buf[lh])
                picked = _top_by_score(ids, scores, comp.budget)
                selected[lh] = picked
                working[lh] = retained_union(picked, window, cache.length)
                kept_mass = float(scores[np.isin(ids, working[lh])].sum())
                total_mass = float(scores.sum())
                stats.events.append(
                    {
                        "step": n_o,
                        "head": f"L{lh[0]}H{lh[1]}",
                        "retained_ids": [int(g) for g in working[lh]],
                        "score_coverage": kept_mass / total_mass if total_mass > 0 else 1.0,
                    }
                )
            stats.compressed = True
        pre_counts = {lh: len(working[lh]) + 1 for lh in heads}
        _, token, obs_rows = decode_step(
            weights, cache, answer[-1], working_sets=working, counter=counter
        )
        if row_collector is not None:
            row_collector.append(obs_rows)
        for lh in heads:
            obs_buf[lh].append(obs_rows[lh])
            if stats.compressed:
                working[lh] = retained_union(selected[lh], window, cache.length)
            else:
                working[lh] = np.arange(cache.length, dtype=np.intp)
        stats.step_head_scores.append(max(pre_counts.values()))
        stats.step_retained.append(max(len(working[lh]) for lh in heads))
    return answer, stats
