"""Synthetic attention instances with known structure.

These generators plant the ground truth (heavy lines, relevant tokens, a
drifting focus) so that selection and compression behavior can be checked
against constructions instead of against another implementation.
"""

from __future__ import annotations

import numpy as np

from .tensor_ops import AttentionBlock


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _normalize_causal(raw: np.ndarray, row_offset: int) -> AttentionBlock:
    n_new, n_total = raw.shape
    w = raw.copy()
    for r in range(n_new):
        w[r, row_offset + r + 1:] = 0.0
        s = w[r].sum()
        if s <= 0:
            w[r, row_offset + r] = 1.0
        else:
            w[r] /= s
    return AttentionBlock(weights=w, row_offset=row_offset)


def random_causal_block(
    n_new: int, n_total: int, seed: int, concentration: float = 1.0
) -> AttentionBlock:
    """Row-stochastic causal block with tunable peakedness: larger
    concentration makes rows spikier."""
    rng = _rng(seed)
    raw = rng.random((n_new, n_total)) ** concentration
    return _normalize_causal(raw, n_total - n_new)


def planted_sparse_block(
    n_new: int,
    n_total: int,
    seed: int,
    n_heavy_slashes: int = 2,
    n_heavy_verticals: int = 4,
    heavy_mass: float = 0.92,
) -> tuple[AttentionBlock, frozenset]:
    """Block whose mass concentrates on a known set of lines.

    The planted set always contains slash 0, so every row has at least one
    planted causal cell and the heavy fraction holds globally. Returns the
    block and the planted (kind, index) line set.
    """
    rng = _rng(seed)
    row_offset = n_total - n_new
    slashes = {0}
    if n_heavy_slashes > 1:
        extra = rng.choice(np.arange(1, n_total), size=min(n_heavy_slashes, n_total) - 1,
                           replace=False)
        slashes.update(int(d) for d in extra)
    verticals = {
        int(c)
        for c in rng.choice(n_total, size=min(n_heavy_verticals, n_total), replace=False)
    }
    w = np.zeros((n_new, n_total))
    for r in range(n_new):
        g = row_offset + r
        heavy = sorted(
            {c for c in verticals if c <= g} | {g - d for d in slashes if g - d >= 0}
        )
        rest = sorted(set(range(g + 1)) - set(heavy))
        hw = rng.random(len(heavy)) + 0.1
        w[r, heavy] = heavy_mass * hw / hw.sum()
        if rest:
            lw = rng.random(len(rest)) + 0.1
            w[r, rest] = (1.0 - heavy_mass) * lw / lw.sum()
        else:
            w[r, heavy] = w[r, heavy] / heavy_mass
    block = _normalize_causal(w, row_offset)
    planted = frozenset(
        [("slash", d) for d in slashes] + [("vertical", c) for c in verticals]
    )
    return block, planted


def planted_query_attention(
    n_input: int,
    n_output: int,
    n_heads: int,
    budget: int,
    query_position: str,
    seed: int,
    window: int = 8,
):
    """Attention maps for an input containing a query span that controls
    which tokens matter.

    Output rows put most of their mass on `budget` planted relevant input
    positions. Input rows inside the query span do the same; all other input
    rows attend locally. Returns (per-head input attention blocks, per-head
    output row matrices over input columns, relevant position array).

    With the query at the end, the trailing observation window consists of
    query rows and recovers the relevant set; with the query at the begin or
    middle, the trailing rows are local and miss it.
    """
    rng = _rng(seed)
    relevant = np.sort(rng.choice(n_input // 2, size=budget, replace=False))
    if query_position == "end":
        q_start = n_input - window
    elif query_position == "middle":
        q_start = n_input // 2
    elif query_position == "begin":
        q_start = 0
    else:
        raise ValueError(f"unknown query position {query_position!r}")
    q_rows = set(range(q_start, q_start + window))

    input_blocks = []
    output_rows = []
    for _ in range(n_heads):
        w = np.zeros((n_input, n_input))
        for r in range(n_input):
            if r in q_rows:
                usable = relevant[relevant <= r]
                if len(usable) > 0:
                    w[r, usable] = 0.9 / len(usable)
                w[r, max(0, r - 3): r + 1] += 0.1 / min(r + 1, 4)
            else:
                lo = max(0, r - 3)
                w[r, lo: r + 1] = rng.random(r - lo + 1) + 0.5
        input_blocks.append(_normalize_causal(w, 0))

        out = rng.random((n_output, n_input)) * 0.02
        out[:, relevant] += rng.random((n_output, budget)) + 1.0
        output_rows.append(out / out.sum(axis=1, keepdims=True))
    return input_blocks, output_rows, relevant


def drifting_attention(
    n_input: int,
    n_output: int,
    n_heads: int,
    n_blocks: int,
    seed: int,
):
    """Output-row attention whose focus window drifts along the input.

    Consecutive output blocks share about half of their focus window, so
    ground-truth important-token sets overlap strongly for adjacent blocks
    and weakly for distant ones.
    """
    rng = _rng(seed)
    block_len = n_output // n_blocks
    span = n_input // (n_blocks + 1)
    heads = []
    for _ in range(n_heads):
        out = rng.random((n_output, n_input)) * 0.01
        for b in range(n_blocks):
            lo = b * span
            hi = lo + 2 * span  # windows of consecutive blocks overlap by span
            rows = slice(b * block_len, (b + 1) * block_len if b < n_blocks - 1 else n_output)
            out[rows, lo:hi] += rng.random((out[rows].shape[0], hi - lo)) + 1.0
        heads.append(out / out.sum(axis=1, keepdims=True))
    return heads
