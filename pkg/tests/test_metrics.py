import numpy as np
import pytest

from circnet.metrics import GapAccumulator


def gap_oracle(pool, total_positives):
    """Definitional sum of precision times recall increments."""
    ordered = sorted(pool, key=lambda cr: -cr[0])
    total = 0.0
    hits = 0
    prev_recall = 0.0
    for i, (_, relevant) in enumerate(ordered, start=1):
        if relevant:
            hits += 1
        precision = hits / i
        recall = hits / total_positives
        total += precision * (recall - prev_recall)
        prev_recall = recall
    return total


def test_single_correct_prediction():
    acc = GapAccumulator()
    acc.accumulate([(7, 0.9)], {7})
    assert acc.pool == [(0.9, True)]
    assert acc.total_positives == 1
    assert acc.gap() == 1.0


def test_top_k_cap():
    acc = GapAccumulator(top_k=20)
    preds = [(i, 1.0 - i * 0.01) for i in range(25)]
    acc.accumulate(preds, {0})
    assert len(acc.pool) == 20


def test_pool_sizes_add_across_videos():
    acc = GapAccumulator(top_k=20)
    acc.accumulate([(i, 0.5 + i * 0.001) for i in range(25)], {1})
    acc.accumulate([(i, 0.5 - i * 0.001) for i in range(5)], {2, 3})
    assert len(acc.pool) == 25
    assert acc.total_positives == 3


def test_duplicate_labels_rejected():
    acc = GapAccumulator()
    with pytest.raises(ValueError):
        acc.accumulate([(1, 0.5), (1, 0.4)], {1})


def test_non_finite_confidence_rejected():
    acc = GapAccumulator()
    with pytest.raises(ValueError):
        acc.accumulate([(1, float("nan"))], {1})


def test_worked_example():
    acc = GapAccumulator()
    acc.pool = [(0.9, True), (0.8, False), (0.7, True)]
    acc.total_positives = 2
    assert abs(acc.gap() - (1.0 / 1 + 2.0 / 3) / 2) < 1e-12


def test_all_correct_and_complete_is_one():
    acc = GapAccumulator()
    acc.accumulate([(0, 0.9), (1, 0.8)], {0, 1})
    acc.accumulate([(2, 0.95)], {2})
    assert acc.gap() == 1.0


def test_zero_relevant_is_zero():
    acc = GapAccumulator()
    acc.accumulate([(5, 0.9)], {1})
    assert acc.gap() == 0.0


def test_empty_accumulator_rejected():
    with pytest.raises(ValueError):
        GapAccumulator().gap()


def test_merge_matches_single_shard():
    rng = np.random.default_rng(0)
    a, b, whole = GapAccumulator(), GapAccumulator(), GapAccumulator()
    for v in range(20):
        preds = [(l, float(rng.random())) for l in range(8)]
        truth = set(rng.choice(8, size=2, replace=False).tolist())
        (a if v % 2 else b).accumulate(preds, truth)
        whole.accumulate(preds, truth)
    merged = a.merge(b)
    assert abs(merged.gap() - whole.gap()) < 1e-12
    assert merged.total_positives == whole.total_positives


def test_gap_matches_definitional_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        acc = GapAccumulator(top_k=20)
        n_videos = int(rng.integers(1, 51))
        n_labels = int(rng.integers(1, 11))
        for v in range(n_videos):
            confs = rng.random(n_labels)
            preds = [(l, float(confs[l])) for l in range(n_labels)]
            truth = set(rng.choice(n_labels, size=int(rng.integers(1, n_labels + 1)),
                                   replace=False).tolist())
            acc.accumulate(preds, truth)
        assert abs(acc.gap() - gap_oracle(acc.pool, acc.total_positives)) < 1e-12


def test_gap_invariant_to_insertion_order():
    rng = np.random.default_rng(2)
    videos = []
    for v in range(10):
        confs = np.unique(rng.random(6))[::-1]  # distinct confidences
        preds = [(l, float(confs[l % len(confs)] + l * 1e-6)) for l in range(6)]
        truth = {0, 3}
        videos.append((preds, truth))
    a, b = GapAccumulator(), GapAccumulator()
    for preds, truth in videos:
        a.accumulate(preds, truth)
    for preds, truth in reversed(videos):
        b.accumulate(preds, truth)
    assert abs(a.gap() - b.gap()) < 1e-12


def test_raising_relevant_confidence_never_decreases_gap():
    rng = np.random.default_rng(3)
    for _ in range(25):
        pool = [(float(c), bool(r)) for c, r in
                zip(rng.random(12), rng.random(12) > 0.5)]
        if not any(r for _, r in pool):
            pool[0] = (pool[0][0], True)
        positives = sum(r for _, r in pool) + 2
        base = GapAccumulator()
        base.pool = list(pool)
        base.total_positives = positives
        g0 = base.gap()
        idx = next(i for i, (_, r) in enumerate(pool) if r)
        bumped = GapAccumulator()
        bumped.pool = list(pool)
        bumped.pool[idx] = (bumped.pool[idx][0] + 0.5, True)
        bumped.total_positives = positives
        assert bumped.gap() >= g0 - 1e-12
