"""Global average precision over the pooled top-k predictions of all videos."""

from __future__ import annotations

import math


class GapAccumulator:
    """Pools (confidence, relevant) pairs across videos and computes GAP@k.

    Each video contributes at most `top_k` predictions; `total_positives`
    counts every ground-truth label, including ones never predicted.
    Accumulators built on disjoint shards can be merged before scoring.
    """

    def __init__(self, top_k: int = 20):
        if top_k < 1:
            raise ValueError("top_k must be positive")
        self.top_k = top_k
        self.pool: list[tuple[float, bool]] = []
        self.total_positives = 0

    def accumulate(self, predictions, truth) -> "GapAccumulator":
        """Add one video's (label, confidence) predictions against its label set."""
        truth = set(truth)
        labels = [label for label, _ in predictions]
        if len(labels) != len(set(labels)):
            raise ValueError("duplicate label in one video's predictions")
        for _, conf in predictions:
            if not math.isfinite(conf):
                raise ValueError(f"non-finite confidence {conf!r}")
        kept = sorted(predictions, key=lambda lc: -lc[1])[: self.top_k]
        for label, conf in kept:
            self.pool.append((float(conf), label in truth))
        self.total_positives += len(truth)
        return self

    def merge(self, other: "GapAccumulator") -> "GapAccumulator":
        if other.top_k != self.top_k:
            raise ValueError("cannot merge accumulators with different top_k")
        merged = GapAccumulator(self.top_k)
        merged.pool = self.pool + other.pool
        merged.total_positives = self.total_positives + other.total_positives
        return merged

    def gap(self) -> float:
        """Average precision of the pooled list, sorted by descending confidence."""
        if self.total_positives < 1:
            raise ValueError("empty accumulator: no ground-truth positives")
        ordered = sorted(self.pool, key=lambda cr: -cr[0])  # stable on ties
        hits = 0
        total = 0.0
        for i, (_, relevant) in enumerate(ordered, start=1):
            if relevant:
                hits += 1
                total += hits / i
        return total / self.total_positives
