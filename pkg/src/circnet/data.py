"""Synthetic multi-label frame-feature datasets: generation, record IO, batching.

Each label owns a planted unit-norm center in video and audio feature space;
examples draw one to three labels, and every frame is the mean of its label
centers plus Gaussian noise. An optional outlier rate replaces whole frames
with pure noise to exercise pooling robustness. Records are stored in a
little-endian binary format (magic "C1RC") that round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"C1RC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI")
_RECORD_FIXED = struct.Struct("<QHHHH")
_FOOTER = struct.Struct("<Q")


class RecordFormatError(ValueError):
    """Malformed record file; message carries the byte offset."""


@dataclass
class VideoExample:
    """One video: frame-feature matrices for both modalities plus its label set."""

    id: int
    video_frames: np.ndarray  # (m, k_v) float32
    audio_frames: np.ndarray  # (m, k_a) float32
    labels: tuple

    def __post_init__(self):
        self.video_frames = np.asarray(self.video_frames, dtype=np.float32)
        self.audio_frames = np.asarray(self.audio_frames, dtype=np.float32)
        self.labels = tuple(sorted(int(l) for l in self.labels))
        if self.video_frames.shape[0] != self.audio_frames.shape[0]:
            raise ValueError("video and audio must share the frame count")
        if self.video_frames.shape[0] < 1:
            raise ValueError("need at least one frame")
        if not self.labels:
            raise ValueError("label set must be nonempty")

    @property
    def num_frames(self) -> int:
        return self.video_frames.shape[0]


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a dataset deterministically."""

    num_labels: int = 64
    video_dim: int = 16
    audio_dim: int = 4
    frames_min: int = 40
    frames_max: int = 150
    train_videos: int = 2000
    validation_videos: int = 500
    label_cardinality: tuple = (0.5, 0.3, 0.2)
    noise_sigma: float = 0.2
    outlier_rate: float = 0.0
    seed: int = 1234

    def validate(self) -> None:
        if self.num_labels < 1:
            raise ValueError("num_labels must be positive")
        if self.num_labels > 0xFFFF:
            raise ValueError("num_labels exceeds the u16 record field")
        if self.video_dim < 1 or self.audio_dim < 1:
            raise ValueError("feature dimensions must be positive")
        if not (1 <= self.frames_min <= self.frames_max <= 0xFFFF):
            raise ValueError("invalid frame-count range")
        if self.train_videos < 1 or self.validation_videos < 0:
            raise ValueError("need at least one training video")
        card = np.asarray(self.label_cardinality, dtype=np.float64)
        if card.ndim != 1 or card.size < 1 or np.any(card < 0) or abs(card.sum() - 1.0) > 1e-9:
            raise ValueError("label_cardinality must be a probability vector")
        if card.size > self.num_labels:
            raise ValueError("cardinality distribution longer than the label vocabulary")
        if self.noise_sigma < 0 or not (0.0 <= self.outlier_rate <= 1.0):
            raise ValueError("invalid noise settings")


def label_centers(spec: DatasetSpec):
    """Per-label unit-norm centers for both modalities, derived from the spec seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC1]))
    video = rng.standard_normal((spec.num_labels, spec.video_dim))
    audio = rng.standard_normal((spec.num_labels, spec.audio_dim))
    video /= np.linalg.norm(video, axis=1, keepdims=True)
    audio /= np.linalg.norm(audio, axis=1, keepdims=True)
    return video, audio


def _draw_examples(spec, rng, centers_v, centers_a, ids):
    card = np.asarray(spec.label_cardinality, dtype=np.float64)
    examples = []
    for ex_id in ids:
        m = int(rng.integers(spec.frames_min, spec.frames_max + 1))
        count = int(rng.choice(card.size, p=card)) + 1
        labels = np.sort(rng.choice(spec.num_labels, size=count, replace=False))
        base_v = centers_v[labels].mean(axis=0)
        base_a = centers_a[labels].mean(axis=0)
        video = base_v + spec.noise_sigma * rng.standard_normal((m, spec.video_dim))
        audio = base_a + spec.noise_sigma * rng.standard_normal((m, spec.audio_dim))
        if spec.outlier_rate > 0:
            outliers = rng.random(m) < spec.outlier_rate
            noise_v = rng.standard_normal((m, spec.video_dim))
            noise_a = rng.standard_normal((m, spec.audio_dim))
            video[outliers] = noise_v[outliers]
            audio[outliers] = noise_a[outliers]
        examples.append(VideoExample(ex_id, video, audio, labels.tolist()))
    return examples


def generate(spec: DatasetSpec, out_dir) -> dict:
    """Write train/validation record files; returns a summary of what was written.

    Split ids are disjoint: training ids start at 1, validation continues
    after them.
    """
    from pathlib import Path

    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    centers_v, centers_a = label_centers(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA]))
    train_ids = range(1, spec.train_videos + 1)
    val_ids = range(spec.train_videos + 1, spec.train_videos + spec.validation_videos + 1)
    summary = {}
    for split, ids in (("train", train_ids), ("validation", val_ids)):
        examples = _draw_examples(spec, rng, centers_v, centers_a, ids)
        path = out_dir / f"{split}.c1rc"
        write_records(path, examples)
        summary[split] = {
            "path": str(path),
            "videos": len(examples),
            "frames": int(sum(e.num_frames for e in examples)),
        }
    summary["num_labels"] = spec.num_labels
    return summary


def write_records(path, examples) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION))
        for ex in examples:
            m, k_v = ex.video_frames.shape
            k_a = ex.audio_frames.shape[1]
            fh.write(_RECORD_FIXED.pack(ex.id, m, k_v, k_a, len(ex.labels)))
            fh.write(np.asarray(ex.labels, dtype="<u2").tobytes())
            fh.write(ex.video_frames.astype("<f4", copy=False).tobytes())
            fh.write(ex.audio_frames.astype("<f4", copy=False).tobytes())
        fh.write(_FOOTER.pack(len(examples)))


def read_records(path) -> list:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + _FOOTER.size:
        raise RecordFormatError(f"{path}: truncated file at offset 0")
    magic, version = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise RecordFormatError(f"{path}: bad magic at offset 0")
    if version != FORMAT_VERSION:
        raise RecordFormatError(f"{path}: unsupported version {version} at offset 4")
    offset = _HEADER.size
    end = len(blob) - _FOOTER.size
    examples = []
    while offset < end:
        try:
            ex_id, m, k_v, k_a, n_labels = _RECORD_FIXED.unpack_from(blob, offset)
            cursor = offset + _RECORD_FIXED.size
            labels = np.frombuffer(blob, dtype="<u2", count=n_labels, offset=cursor)
            cursor += 2 * n_labels
            video = np.frombuffer(blob, dtype="<f4", count=m * k_v, offset=cursor)
            cursor += 4 * m * k_v
            audio = np.frombuffer(blob, dtype="<f4", count=m * k_a, offset=cursor)
            cursor += 4 * m * k_a
            if cursor > end:
                raise ValueError("record overruns footer")
            examples.append(VideoExample(ex_id, video.reshape(m, k_v).copy(),
                                         audio.reshape(m, k_a).copy(), labels.tolist()))
        except (struct.error, ValueError) as exc:
            raise RecordFormatError(f"{path}: malformed record at offset {offset}: {exc}") from exc
        offset = cursor
    (count,) = _FOOTER.unpack_from(blob, end)
    if count != len(examples):
        raise RecordFormatError(
            f"{path}: footer count {count} != parsed {len(examples)} at offset {end}")
    return examples


def augment_split_halves(example: VideoExample) -> list:
    """Split one video into its first and second half; single-frame videos pass through."""
    m = example.num_frames
    if m < 2:
        return [example]
    cut = (m + 1) // 2
    first = VideoExample(example.id * 2, example.video_frames[:cut],
                         example.audio_frames[:cut], example.labels)
    second = VideoExample(example.id * 2 + 1, example.video_frames[cut:],
                          example.audio_frames[cut:], example.labels)
    return [first, second]


def sample_frame_indices(m: int, frames_sampled: int) -> np.ndarray:
    """Deterministic frame selection: short videos loop cyclically, long ones stride."""
    if m >= frames_sampled:
        return (np.arange(frames_sampled) * m) // frames_sampled
    return np.arange(frames_sampled) % m


@dataclass
class Batch:
    epoch: int
    ids: np.ndarray           # (B,) int64
    video: np.ndarray         # (B, F, k_v) float64
    audio: np.ndarray         # (B, F, k_a) float64
    label_sets: list          # B label tuples
    targets: np.ndarray       # (B, L) multi-hot float64

    def __len__(self):
        return self.ids.size


def load_examples(files, augment: bool = False) -> list:
    examples = []
    for path in files:
        examples.extend(read_records(path))
    if augment:
        examples = [half for ex in examples for half in augment_split_halves(ex)]
    return examples


def batch_iterator(files, batch_size: int, num_labels: int, frames_sampled: int,
                   seed: int, epochs: int = 1, first_epoch: int = 0,
                   augment: bool = False, shuffle: bool = True):
    """Seeded epoch shuffles over record files, yielding fixed-width frame batches.

    The same (files, seed) always produce the same batch sequence; frame
    sampling follows the cyclic-loop / uniform-stride rule. Shuffles are keyed
    by (seed, epoch index), so resuming at `first_epoch` replays exactly what
    an uninterrupted run would have seen.
    """
    examples = load_examples(files, augment=augment)
    if not examples:
        raise ValueError("no examples found")
    for epoch in range(first_epoch, epochs):
        if shuffle:
            order = np.random.default_rng(
                np.random.SeedSequence([seed, epoch])).permutation(len(examples))
        else:
            order = np.arange(len(examples))
        for start in range(0, len(order), batch_size):
            chunk = [examples[i] for i in order[start:start + batch_size]]
            video = np.stack([
                ex.video_frames[sample_frame_indices(ex.num_frames, frames_sampled)]
                for ex in chunk]).astype(np.float64)
            audio = np.stack([
                ex.audio_frames[sample_frame_indices(ex.num_frames, frames_sampled)]
                for ex in chunk]).astype(np.float64)
            targets = np.zeros((len(chunk), num_labels))
            for row, ex in enumerate(chunk):
                targets[row, list(ex.labels)] = 1.0
            yield Batch(epoch=epoch,
                        ids=np.array([ex.id for ex in chunk], dtype=np.int64),
                        video=video, audio=audio,
                        label_sets=[ex.labels for ex in chunk],
                        targets=targets)
