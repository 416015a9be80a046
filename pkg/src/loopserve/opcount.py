"""Operation counting for attention-score work.

One counter unit = one query/key score cell actually computed. All claims
about prefill and decode cost in this package are phrased in these units,
so the counters must be incremented by every code path that evaluates
attention scores.
"""

from dataclasses import dataclass


@dataclass
class OpCounter:
    scores: int = 0

    def add(self, n: int) -> None:
        self.scores += int(n)
