import numpy as np
import pytest

from circnet import data as D
from circnet.metrics import GapAccumulator


def small_spec(**overrides):
    base = dict(num_labels=8, video_dim=6, audio_dim=3, frames_min=2, frames_max=9,
                train_videos=30, validation_videos=10, noise_sigma=0.1, seed=77)
    base.update(overrides)
    return D.DatasetSpec(**base)


def test_round_trip_bit_exact(tmp_path):
    spec = small_spec()
    centers = D.label_centers(spec)
    rng = np.random.default_rng(0)
    examples = D._draw_examples(spec, rng, *centers, ids=range(1, 6))
    path = tmp_path / "x.c1rc"
    D.write_records(path, examples)
    back = D.read_records(path)
    assert len(back) == 5
    for a, b in zip(examples, back):
        assert a.id == b.id and a.labels == b.labels
        np.testing.assert_array_equal(a.video_frames, b.video_frames)
        np.testing.assert_array_equal(a.audio_frames, b.audio_frames)


def test_generation_is_deterministic(tmp_path):
    spec = small_spec()
    D.generate(spec, tmp_path / "a")
    D.generate(spec, tmp_path / "b")
    for split in ("train", "validation"):
        a = (tmp_path / "a" / f"{split}.c1rc").read_bytes()
        b = (tmp_path / "b" / f"{split}.c1rc").read_bytes()
        assert a == b


def test_zero_noise_single_label_frames_equal_center(tmp_path):
    spec = small_spec(noise_sigma=0.0, outlier_rate=0.0, label_cardinality=(1.0,))
    D.generate(spec, tmp_path)
    centers_v, centers_a = D.label_centers(spec)
    for ex in D.read_records(tmp_path / "train.c1rc"):
        assert len(ex.labels) == 1
        label = ex.labels[0]
        np.testing.assert_array_equal(
            ex.video_frames, np.broadcast_to(centers_v[label].astype(np.float32),
                                             ex.video_frames.shape))
        np.testing.assert_array_equal(
            ex.audio_frames, np.broadcast_to(centers_a[label].astype(np.float32),
                                             ex.audio_frames.shape))


def test_splits_disjoint_by_id(tmp_path):
    spec = small_spec()
    D.generate(spec, tmp_path)
    train_ids = {e.id for e in D.read_records(tmp_path / "train.c1rc")}
    val_ids = {e.id for e in D.read_records(tmp_path / "validation.c1rc")}
    assert not (train_ids & val_ids)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        small_spec(num_labels=0).validate()
    with pytest.raises(ValueError):
        small_spec(label_cardinality=(0.5, 0.6)).validate()
    with pytest.raises(ValueError):
        small_spec(frames_min=0).validate()


def test_malformed_record_reports_offset(tmp_path):
    spec = small_spec()
    centers = D.label_centers(spec)
    examples = D._draw_examples(spec, np.random.default_rng(1), *centers, ids=[1, 2])
    path = tmp_path / "x.c1rc"
    D.write_records(path, examples)
    blob = bytearray(path.read_bytes())
    blob = blob[: len(blob) // 2]  # drop the tail mid-record
    path.write_bytes(bytes(blob))
    with pytest.raises(D.RecordFormatError, match="offset"):
        D.read_records(path)
    path.write_bytes(b"JUNK" + bytes(blob[4:]))
    with pytest.raises(D.RecordFormatError, match="magic"):
        D.read_records(path)


def make_example(ex_id, m, k_v=4, k_a=2, labels=(1, 3)):
    rng = np.random.default_rng(ex_id)
    return D.VideoExample(ex_id, rng.standard_normal((m, k_v)),
                          rng.standard_normal((m, k_a)), labels)


def test_augment_even_split():
    halves = D.augment_split_halves(make_example(5, 10))
    assert [h.num_frames for h in halves] == [5, 5]
    assert [h.id for h in halves] == [10, 11]


def test_augment_odd_split_ceil_rule():
    halves = D.augment_split_halves(make_example(7, 3))
    assert [h.num_frames for h in halves] == [2, 1]


def test_augment_preserves_labels_and_frames():
    ex = make_example(9, 6)
    first, second = D.augment_split_halves(ex)
    assert first.labels == ex.labels == second.labels
    np.testing.assert_array_equal(np.vstack([first.video_frames, second.video_frames]),
                                  ex.video_frames)


def test_augment_single_frame_passthrough():
    ex = make_example(3, 1)
    assert D.augment_split_halves(ex) == [ex]


def test_frame_sampling_cyclic_and_strided():
    np.testing.assert_array_equal(D.sample_frame_indices(3, 8), [0, 1, 2, 0, 1, 2, 0, 1])
    idx = D.sample_frame_indices(10, 5)
    assert len(idx) == 5 and np.all(np.diff(idx) > 0) and idx[0] == 0


def test_batch_iterator_covers_epoch_once(tmp_path):
    spec = small_spec()
    D.generate(spec, tmp_path)
    seen = []
    for batch in D.batch_iterator([tmp_path / "train.c1rc"], batch_size=1,
                                  num_labels=spec.num_labels, frames_sampled=4, seed=5):
        assert len(batch) == 1
        seen.extend(batch.ids.tolist())
    assert sorted(seen) == list(range(1, spec.train_videos + 1))


def test_batch_iterator_deterministic(tmp_path):
    spec = small_spec()
    D.generate(spec, tmp_path)

    def run():
        out = []
        for batch in D.batch_iterator([tmp_path / "train.c1rc"], batch_size=7,
                                      num_labels=spec.num_labels, frames_sampled=4,
                                      seed=11, epochs=2):
            out.append((batch.epoch, batch.ids.copy(), batch.video.copy()))
        return out

    a, b = run(), run()
    assert len(a) == len(b)
    for (ea, ia, va), (eb, ib, vb) in zip(a, b):
        assert ea == eb
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(va, vb)


def test_batch_targets_multi_hot(tmp_path):
    spec = small_spec()
    D.generate(spec, tmp_path)
    batch = next(D.batch_iterator([tmp_path / "train.c1rc"], batch_size=4,
                                  num_labels=spec.num_labels, frames_sampled=4, seed=0))
    for row, labels in enumerate(batch.label_sets):
        np.testing.assert_array_equal(np.flatnonzero(batch.targets[row]), sorted(labels))


def test_augmentation_doubles_examples(tmp_path):
    spec = small_spec(frames_min=1, frames_max=6, train_videos=100)
    D.generate(spec, tmp_path)
    plain = D.load_examples([tmp_path / "train.c1rc"])
    single = sum(1 for e in plain if e.num_frames == 1)
    augmented = D.load_examples([tmp_path / "train.c1rc"], augment=True)
    assert len(augmented) == 2 * len(plain) - single


def test_label_marginals_match_cardinality():
    spec = small_spec(num_labels=16, train_videos=10_000,
                      label_cardinality=(0.5, 0.3, 0.2))
    centers = D.label_centers(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA]))
    examples = D._draw_examples(spec, rng, *centers, ids=range(spec.train_videos))
    counts = np.bincount([len(e.labels) for e in examples], minlength=4)[1:4]
    fractions = counts / len(examples)
    np.testing.assert_allclose(fractions, [0.5, 0.3, 0.2], atol=0.05)


def test_linear_baseline_reaches_high_gap(tmp_path):
    """Frame-average ridge regression must find the planted centers easily."""
    spec = D.DatasetSpec(video_dim=32, audio_dim=8, noise_sigma=0.1)
    D.generate(spec, tmp_path)
    train = D.read_records(tmp_path / "train.c1rc")
    val = D.read_records(tmp_path / "validation.c1rc")

    def features(examples):
        return np.stack([
            np.concatenate([e.video_frames.mean(axis=0), e.audio_frames.mean(axis=0)])
            for e in examples]).astype(np.float64)

    def multihot(examples):
        y = np.zeros((len(examples), spec.num_labels))
        for i, e in enumerate(examples):
            y[i, list(e.labels)] = 1.0
        return y

    x, y = features(train), multihot(train)
    lam = 1e-3
    w = np.linalg.solve(x.T @ x + lam * np.eye(x.shape[1]), x.T @ y)
    scores = features(val) @ w
    acc = GapAccumulator(top_k=20)
    for i, e in enumerate(val):
        acc.accumulate([(l, float(scores[i, l])) for l in range(spec.num_labels)],
                       set(e.labels))
    assert acc.gap() > 0.9
