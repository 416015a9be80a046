"""Online selection of slash and vertical attention lines during prefilling.

A vertical line is a single key column; a slash line is a diagonal at a fixed
global offset d = query_position - key_position. Each causal cell of an
attention block lies on exactly one line of each kind, and a given slash
crosses a given vertical in at most one cell. Selection greedily alternates
between the heaviest remaining line of each kind until the chosen lines
recover the requested fraction of total attention mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace as dataclasses_replace

import numpy as np

from .errors import EmptyBlock, InstanceTooLarge, InvalidAlpha
from .opcount import OpCounter
from .tensor_ops import AttentionBlock, softmax_rows


@dataclass(frozen=True)
class Line:
    """One candidate line of an attention block.

    weight is the summed attention mass on the line, length its causal cell
    count within the block, and max_cell the largest single cell, which
    bounds the line's overlap with any single line of the other kind.
    """

    kind: str  # "slash" | "vertical"
    index: int  # global offset d for slashes, column c for verticals
    weight: float
    length: int
    max_cell: float


@dataclass(frozen=True)
class SparsePlan:
    """Selected lines for one attention head.

    achieved_coverage is the exact recovered fraction of total mass on the
    block the plan was estimated from; approx_sum is the final value of the
    pessimistic running counter, which never exceeds the exact recovered mass.
    """

    selected_slashes: frozenset
    selected_verticals: frozenset
    achieved_coverage: float
    approx_sum: float
    total_weight: float
    n_total: int

    def cost(self, n_new: int, n_total: int | None = None) -> int:
        """Sum of selected line lengths over a block of the given shape."""
        n = self.n_total if n_total is None else n_total
        return sum(slash_length(n_new, n, d) for d in self.selected_slashes) + sum(
            vertical_length(n_new, n, c) for c in self.selected_verticals
        )

    def lines(self) -> frozenset:
        return frozenset(
            [("slash", d) for d in self.selected_slashes]
            + [("vertical", c) for c in self.selected_verticals]
        )

    def to_json(self, head: str | None = None) -> dict:
        doc = {
            "slashes": sorted(self.selected_slashes),
            "verticals": sorted(self.selected_verticals),
            "coverage": self.achieved_coverage,
            "approx_sum": self.approx_sum,
            "total_weight": self.total_weight,
            "n_total": self.n_total,
        }
        if head is not None:
            doc["head"] = head
        return doc

    @staticmethod
    def from_json(doc: dict) -> "SparsePlan":
        return SparsePlan(
            selected_slashes=frozenset(doc["slashes"]),
            selected_verticals=frozenset(doc["verticals"]),
            achieved_coverage=doc["coverage"],
            approx_sum=doc["approx_sum"],
            total_weight=doc["total_weight"],
            n_total=doc["n_total"],
        )


def vertical_length(n_new: int, n_total: int, col: int) -> int:
    return max(0, min(n_new, n_total - col))


def slash_length(n_new: int, n_total: int, offset: int) -> int:
    return max(0, min(n_new, n_total - offset))


class _BlockView:
    """Weights plus explicit global row positions; covers both contiguous
    blocks and sampled-row sub-blocks."""

    def __init__(self, weights: np.ndarray, positions: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.positions = np.asarray(positions, dtype=np.intp)
        self.n_total = self.weights.shape[1]
        self.local_row = {int(g): r for r, g in enumerate(self.positions)}

    @staticmethod
    def of(block: AttentionBlock) -> "_BlockView":
        return _BlockView(block.weights, block.row_positions())

    def cell(self, offset: int, col: int) -> float:
        """Value at the unique crossing of slash `offset` and vertical `col`,
        or 0 when that cell is outside the block."""
        r = self.local_row.get(col + offset)
        if r is None:
            return 0.0
        return float(self.weights[r, col])


def sample_rows(n_new: int, rate: float, floor: int, seed: int) -> np.ndarray:
    """Uniform row sample of size min(n_new, max(floor, ceil(rate*n_new))),
    sorted, always containing the last row (it anchors the newest token)."""
    if n_new <= 0:
        raise EmptyBlock("cannot sample rows of an empty block")
    if not (0.0 < rate <= 1.0) or floor < 1:
        raise ValueError("need 0 < rate <= 1 and floor >= 1")
    size = min(n_new, max(floor, math.ceil(rate * n_new)))
    rng = np.random.Generator(np.random.PCG64(seed))
    rest = rng.choice(n_new - 1, size=size - 1, replace=False) if size > 1 else []
    return np.sort(np.append(np.asarray(rest, dtype=np.intp), n_new - 1))


def _line_sums(view: _BlockView) -> tuple[list[Line], list[Line]]:
    w = view.weights
    n_rows, n_total = w.shape
    v_weight = w.sum(axis=0)
    v_max = w.max(axis=0)
    # causal length = number of block rows whose position reaches the column
    v_len = np.array([(view.positions >= c).sum() for c in range(n_total)])

    s_weight: dict[int, float] = {}
    s_max: dict[int, float] = {}
    s_len: dict[int, int] = {}
    for r in range(n_rows):
        g = int(view.positions[r])
        for c in range(min(g, n_total - 1) + 1):
            d = g - c
            val = float(w[r, c])
            s_weight[d] = s_weight.get(d, 0.0) + val
            s_len[d] = s_len.get(d, 0) + 1
            if val > s_max.get(d, 0.0):
                s_max[d] = val

    verticals = [
        Line("vertical", c, float(v_weight[c]), int(v_len[c]), float(v_max[c]))
        for c in range(n_total)
        if v_len[c] > 0
    ]
    slashes = [
        Line("slash", d, s_weight[d], s_len[d], s_max.get(d, 0.0))
        for d in sorted(s_weight)
    ]
    key = lambda ln: (-ln.weight, ln.index)
    return sorted(slashes, key=key), sorted(verticals, key=key)


def line_sums(block: AttentionBlock) -> tuple[list[Line], list[Line]]:
    """All slash and vertical lines of a block, each sorted by descending
    weight with ties broken toward the smaller index."""
    return _line_sums(_BlockView.of(block))


def _greedy(
    slashes: list[Line],
    verticals: list[Line],
    alpha: float,
    total_weight: float,
    view: _BlockView,
) -> SparsePlan:
    if not (0.0 <= alpha <= 1.0):
        raise InvalidAlpha(f"alpha={alpha} outside [0, 1]")
    target = alpha * total_weight
    eps = 1e-12
    s_idx = v_idx = 0
    sel_s: list[int] = []
    sel_v: list[int] = []
    ol_s = ol_v = 0.0
    approx = 0.0
    exact = 0.0  # running union mass, maintained by exact overlap subtraction
    while approx < target - eps and exact < target - eps:
        s = slashes[s_idx] if s_idx < len(slashes) else None
        v = verticals[v_idx] if v_idx < len(verticals) else None
        if s is None and v is None:
            break
        take_slash: bool
        if s is None:
            take_slash = False
        elif v is None:
            take_slash = True
        else:
            gain_s = (s.weight - ol_v) / max(1, s.length - len(sel_v))
            gain_v = (v.weight - ol_s) / max(1, v.length - len(sel_s))
            take_slash = gain_s >= gain_v
        if take_slash:
            approx += s.weight - ol_v
            exact += s.weight - sum(view.cell(s.index, c) for c in sel_v)
            ol_s += s.max_cell
            sel_s.append(s.index)
            s_idx += 1
        else:
            approx += v.weight - ol_s
            exact += v.weight - sum(view.cell(d, v.index) for d in sel_s)
            ol_v += v.max_cell
            sel_v.append(v.index)
            v_idx += 1
    coverage = exact / total_weight if total_weight > 0 else 0.0
    return SparsePlan(
        selected_slashes=frozenset(sel_s),
        selected_verticals=frozenset(sel_v),
        achieved_coverage=min(coverage, 1.0),
        approx_sum=approx,
        total_weight=total_weight,
        n_total=view.n_total,
    )


def greedy_select_lines(
    slashes: list[Line],
    verticals: list[Line],
    alpha: float,
    total_weight: float,
    block: AttentionBlock,
) -> SparsePlan:
    """Greedy line selection.

    Each iteration compares the heaviest remaining slash and vertical by
    marginal mass per marginal cell and keeps the better one. Two running
    totals are maintained: the pessimistic counter (overlap over-subtracted
    via per-line max cells) and the exact union mass (overlap subtracted
    cell-exactly, using that a slash and a vertical cross at most once).
    Selection stops as soon as either total reaches alpha * total_weight, or
    when both lists are exhausted, which is full coverage. The exact total is
    what makes termination safe when the pessimistic counter saturates below
    the target.
    """
    return _greedy(slashes, verticals, alpha, total_weight, _BlockView.of(block))


def coverage_ratio(block: AttentionBlock, plan: SparsePlan) -> float:
    """Exact fraction of total attention mass covered by the plan's lines,
    via inclusion-exclusion over the single-cell slash/vertical crossings."""
    return _coverage(_BlockView.of(block), plan)


def _coverage(view: _BlockView, plan: SparsePlan) -> float:
    w = view.weights
    total = float(w.sum())
    if total <= 0:
        return 0.0
    mass = 0.0
    for c in sorted(plan.selected_verticals):
        mass += float(w[:, c].sum())
    for d in sorted(plan.selected_slashes):
        mass += _slash_cells(view, d)
    for d in sorted(plan.selected_slashes):
        for c in sorted(plan.selected_verticals):
            mass -= view.cell(d, c)
    return mass / total


def _slash_cells(view: _BlockView, d: int) -> float:
    rows = view.positions - d
    valid = rows >= 0
    if not valid.any():
        return 0.0
    return float(view.weights[np.arange(len(rows))[valid], rows[valid]].sum())


def brute_force_min_lines(
    block: AttentionBlock, alpha: float
) -> tuple[int, SparsePlan]:
    """Minimum-cost feasible plan by exhaustive enumeration.

    Every slash subset is paired with every vertical subset; the union mass
    of a pair decomposes as W(S) + W(V) - sum of crossing cells, so the whole
    search vectorizes into chunked matrix products. Only instances with
    n_total <= 14 are accepted.
    """
    if not (0.0 <= alpha <= 1.0):
        raise InvalidAlpha(f"alpha={alpha} outside [0, 1]")
    view = _BlockView.of(block)
    n_new, n = block.n_new, block.n_total
    if n > 14:
        raise InstanceTooLarge(f"n_total={n} exceeds the enumeration limit 14")
    total = block.total_weight
    target = alpha * total - 1e-9

    slash_ids = [d for d in range(n) if _slash_cells(view, d) > 0.0]
    vert_ids = [c for c in range(n) if view.weights[:, c].sum() > 0.0]
    ns, nv = len(slash_ids), len(vert_ids)
    s_w = np.array([_slash_cells(view, d) for d in slash_ids])
    v_w = np.array([float(view.weights[:, c].sum()) for c in vert_ids])
    s_len = np.array([slash_length(n_new, n, d) for d in slash_ids])
    v_len = np.array([vertical_length(n_new, n, c) for c in vert_ids])
    cross = np.array([[view.cell(d, c) for c in vert_ids] for d in slash_ids])
    cross = cross.reshape(ns, nv)

    def masks(k: int) -> np.ndarray:
        m = np.arange(1 << k, dtype=np.uint32)
        return ((m[:, None] >> np.arange(k)) & 1).astype(np.float64)

    sm = masks(ns)  # (2^ns, ns)
    vm = masks(nv)  # (2^nv, nv)
    s_subset_w = sm @ s_w
    v_subset_w = vm @ v_w
    s_subset_cost = (sm @ s_len).astype(np.int64)
    v_subset_cost = (vm @ v_len).astype(np.int64)
    overlap_per_vert = sm @ cross  # (2^ns, nv)

    best_cost = None
    best_pair = None
    chunk = max(1, (1 << 22) // max(1, vm.shape[0]))
    for start in range(0, sm.shape[0], chunk):
        stop = min(start + chunk, sm.shape[0])
        union = (
            s_subset_w[start:stop, None]
            + v_subset_w[None, :]
            - overlap_per_vert[start:stop] @ vm.T
        )
        cost = s_subset_cost[start:stop, None] + v_subset_cost[None, :]
        feasible = union >= target
        if not feasible.any():
            continue
        cost = np.where(feasible, cost, np.iinfo(np.int64).max)
        flat = int(np.argmin(cost))
        c = int(cost.reshape(-1)[flat])
        if best_cost is None or c < best_cost:
            best_cost = c
            best_pair = (start + flat // vm.shape[0], flat % vm.shape[0])
    if best_cost is None:
        raise InvalidAlpha("no feasible plan exists (unreachable for alpha <= 1)")

    si, vi = best_pair
    sel_s = frozenset(slash_ids[j] for j in range(ns) if sm[si, j] > 0)
    sel_v = frozenset(vert_ids[j] for j in range(nv) if vm[vi, j] > 0)
    plan = SparsePlan(
        selected_slashes=sel_s,
        selected_verticals=sel_v,
        achieved_coverage=0.0,
        approx_sum=0.0,
        total_weight=total,
        n_total=n,
    )
    plan = dataclasses_replace(plan, achieved_coverage=_coverage(view, plan))
    return best_cost, plan


def sparsify_head(
    Q_sampled: np.ndarray,
    K_all: np.ndarray,
    alpha: float,
    row_positions: np.ndarray,
    counter: OpCounter | None = None,
) -> SparsePlan:
    """Estimate a head's plan from a sampled subset of its query rows.

    Builds the sampled rows' causal attention against all keys (scores are
    only computed up to each row's own position), then runs line summation
    and greedy selection. Offsets are global, so the plan applies unchanged
    to the full block.
    """
    Q_sampled = np.asarray(Q_sampled, dtype=np.float64)
    K_all = np.asarray(K_all, dtype=np.float64)
    positions = np.asarray(row_positions, dtype=np.intp)
    if Q_sampled.shape[0] != positions.shape[0]:
        raise EmptyBlock("one global position is required per sampled row")
    n_total = K_all.shape[0]
    scale = 1.0 / math.sqrt(K_all.shape[1])
    logits = np.full((Q_sampled.shape[0], n_total), -np.inf)
    for r, g in enumerate(positions):
        hi = min(int(g), n_total - 1) + 1
        logits[r, :hi] = (K_all[:hi] @ Q_sampled[r]) * scale
        if counter is not None:
            counter.add(hi)
    weights = softmax_rows(logits)
    view = _BlockView(weights, positions)
    slashes, verticals = _line_sums(view)
    return _greedy(slashes, verticals, alpha, float(weights.sum()), view)


def plan_for_block(
    block: AttentionBlock,
    alpha: float,
    sample_rate: float | None = None,
    sample_floor: int = 32,
    seed: int = 0,
) -> SparsePlan:
    """Plan a block directly, optionally estimating from a row sample as the
    online path does. Used by diagnostics and tests."""
    view = _BlockView.of(block)
    if sample_rate is not None:
        rows = sample_rows(block.n_new, sample_rate, sample_floor, seed)
        view = _BlockView(block.weights[rows], block.row_positions()[rows])
    slashes, verticals = _line_sums(view)
    return _greedy(slashes, verticals, alpha, float(view.weights.sum()), view)


def top_lines(block: AttentionBlock, count: int) -> frozenset:
    """The `count` heaviest lines of either kind, as (kind, index) pairs."""
    slashes, verticals = line_sums(block)
    ranked = sorted(slashes + verticals, key=lambda ln: (-ln.weight, ln.kind, ln.index))
    return frozenset((ln.kind, ln.index) for ln in ranked[:count])


def plans_to_jsonl(plans: dict, path: str) -> None:
    with open(path, "w") as fh:
        for head in sorted(plans):
            fh.write(json.dumps(plans[head].to_json(head=head), sort_keys=True) + "\n")
