"""Task metrics and attention-pattern diagnostics, with CSV/JSON emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyWindow, SizeMismatch
from .kvcompress import overlap_rate
from .prefill import SparsePlan, coverage_ratio, line_sums
from .tensor_ops import AttentionBlock


def f1(prediction, reference) -> float:
    """Harmonic mean of token-bag precision and recall. Multiset semantics:
    repeated tokens count up to their multiplicity in both sides."""
    ref = list(reference)
    if not ref:
        raise EmptyWindow("reference must be nonempty")
    pred = list(prediction)
    if not pred:
        return 0.0
    counts: dict = {}
    for t in ref:
        counts[t] = counts.get(t, 0) + 1
    common = 0
    for t in pred:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            common += 1
    if common == 0:
        return 0.0
    precision = common / len(pred)
    recall = common / len(ref)
    return 2 * precision * recall / (precision + recall)


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """Longest-common-subsequence length divided by the reference length
    (recall form)."""
    ref = list(reference)
    if not ref:
        raise EmptyWindow("reference must be nonempty")
    return lcs_length(candidate, ref) / len(ref)


def accuracy(predictions, references) -> float:
    """Proportion of positions where prediction equals reference."""
    preds, refs = list(predictions), list(references)
    if not refs:
        raise EmptyWindow("references must be nonempty")
    if len(preds) != len(refs):
        raise SizeMismatch(f"{len(preds)} predictions for {len(refs)} references")
    return sum(p == r for p, r in zip(preds, refs)) / len(refs)


def recovery_curve(blocks_per_head: dict, etas) -> list[tuple[float, float]]:
    """For each eta, the head-averaged exact mass fraction recovered by the
    top eta*2n lines (both kinds ranked together by weight)."""
    points = []
    for eta in etas:
        ratios = []
        for block in blocks_per_head.values():
            slashes, verticals = line_sums(block)
            ranked = sorted(
                slashes + verticals, key=lambda ln: (-ln.weight, ln.kind, ln.index)
            )
            k = int(np.floor(eta * 2 * block.n_total + 1e-9))
            chosen = ranked[:k]
            plan = SparsePlan(
                selected_slashes=frozenset(l.index for l in chosen if l.kind == "slash"),
                selected_verticals=frozenset(
                    l.index for l in chosen if l.kind == "vertical"
                ),
                achieved_coverage=0.0,
                approx_sum=0.0,
                total_weight=block.total_weight,
                n_total=block.n_total,
            )
            ratios.append(coverage_ratio(block, plan))
        points.append((float(eta), float(np.mean(ratios))))
    return points


def line_overlap_ratio(plan_a: SparsePlan, plan_b: SparsePlan) -> float:
    """Jaccard-style overlap of two plans' line sets, kinds kept apart.
    Plans over different key spaces are not comparable."""
    if plan_a.n_total != plan_b.n_total:
        raise DimensionMismatch(
            f"plans over different widths: {plan_a.n_total} vs {plan_b.n_total}"
        )
    inter = len(plan_a.selected_slashes & plan_b.selected_slashes)
    inter += len(plan_a.selected_verticals & plan_b.selected_verticals)
    union = len(plan_a.selected_slashes | plan_b.selected_slashes)
    union += len(plan_a.selected_verticals | plan_b.selected_verticals)
    return inter / union if union else 1.0


def segment_overlap(plan_first: SparsePlan, plan_second: SparsePlan) -> float:
    """Fraction of the second segment's lines already important in the first:
    |L1 intersect L2| / |L2|. Both plans must use the same global coordinates,
    with the first segment starting at position zero."""
    if plan_first.n_total > plan_second.n_total:
        raise DimensionMismatch(
            "first segment's plan cannot span more keys than the second's"
        )
    l1, l2 = plan_first.lines(), plan_second.lines()
    if not l2:
        return 1.0 if not l1 else 0.0
    return len(l1 & l2) / len(l2)


def block_overlap_series(selections, budget: int) -> np.ndarray:
    """Pairwise overlap_rate matrix of per-output-block ground-truth token
    selections."""
    n = len(selections)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = overlap_rate(selections[i], selections[j], budget)
    return out


def adjacent_vs_distant(matrix: np.ndarray) -> tuple[float, float]:
    """Mean overlap of adjacent block pairs vs pairs at distance >= 2."""
    n = matrix.shape[0]
    adjacent = [matrix[i, i + 1] for i in range(n - 1)]
    distant = [matrix[i, j] for i in range(n) for j in range(i + 2, n)]
    return float(np.mean(adjacent)), float(np.mean(distant)) if distant else 0.0


TASK_METRIC = {"qa": "f1", "summarization": "rouge_l", "fewshot": "accuracy"}


def task_score(task: str, prediction_tokens, reference_tokens) -> float:
    metric = TASK_METRIC[task]
    if metric == "f1":
        return f1(prediction_tokens, reference_tokens)
    if metric == "rouge_l":
        return rouge_l(prediction_tokens, reference_tokens)
    # fewshot: exact sequence match counts as one correct prediction
    return accuracy([list(prediction_tokens) == list(reference_tokens)], [True])


@dataclass
class MetricsRecord:
    instance_id: str
    task_scores: list = field(default_factory=list)  # [{"turn", "metric", "value"}]
    series: dict = field(default_factory=dict)  # name -> [(x, y), ...]
    op_counts: dict = field(default_factory=dict)
    wall_ms: list | None = None

    def __post_init__(self):
        for name, points in self.series.items():
            xs = [x for x, _ in points]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise SizeMismatch(f"series {name!r} x values must strictly increase")

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "task_scores": self.task_scores,
            "series": {k: [[x, y] for x, y in v] for k, v in self.series.items()},
            "op_counts": self.op_counts,
            "wall_ms": self.wall_ms,
        }

    def csv_rows(self) -> list[tuple]:
        rows = [
            (self.instance_id, s["metric"], float(s["turn"]), float(s["value"]))
            for s in self.task_scores
        ]
        for name in sorted(self.series):
            rows.extend((self.instance_id, name, float(x), float(y)) for x, y in self.series[name])
        return rows


CSV_HEADER = ("instance_id", "metric", "x", "y")


def write_csv(records: list[MetricsRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerows(rec.csv_rows())


def write_json(records: list[MetricsRecord], path: str) -> None:
    with open(path, "w") as fh:
        json.dump([rec.to_json() for rec in records], fh, sort_keys=True, indent=1)
