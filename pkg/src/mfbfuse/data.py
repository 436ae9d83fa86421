"""Frame-level multimodal dataset: binary file format, synthetic generator,
and minibatch assembly.

On-disk layout (all little-endian)::

    b"MMFV1"  u32 version  u32 video_count  u32 C  u32 M  u32 num_classes
    per video:
        u32 id_len, id bytes
        u32 N
        u32 label_count, label_count x u32
        N*C float32 visual, N*M float32 audio
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from mfbfuse.aggregation import sample_frames
from mfbfuse.numerics import Rng, sigmoid

MAGIC = b"MMFV1"
VERSION = 1
_HEADER = struct.Struct("<5sIIIII")
_U32 = struct.Struct("<I")


class DatasetFormatError(ValueError):
    """Raised for malformed or truncated dataset files."""


@dataclass
class VideoRecord:
    id: bytes
    visual: np.ndarray  # N x C
    audio: np.ndarray  # N x M
    labels: tuple[int, ...]

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        if self.visual.ndim != 2 or self.audio.ndim != 2:
            raise ValueError("visual and audio features must be N x D matrices")
        if self.visual.shape[0] < 1:
            raise ValueError(f"video {self.id!r} has no frames")
        if self.visual.shape[0] != self.audio.shape[0]:
            raise ValueError(f"video {self.id!r}: {self.visual.shape[0]} visual frames "
                             f"but {self.audio.shape[0]} audio frames")
        self.labels = tuple(int(c) for c in self.labels)
        if any(b <= a for a, b in zip(self.labels, self.labels[1:])):
            raise ValueError(f"video {self.id!r}: labels must be strictly increasing")

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]


@dataclass
class Dataset:
    records: list[VideoRecord]
    visual_dim: int
    audio_dim: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.visual_dim,
                       self.audio_dim, self.num_classes)

    def label_matrix(self) -> np.ndarray:
        return labels_to_matrix(self.records, self.num_classes)


def labels_to_matrix(records: Sequence[VideoRecord], num_classes: int) -> np.ndarray:
    y = np.zeros((len(records), num_classes))
    for i, rec in enumerate(records):
        y[i, list(rec.labels)] = 1.0
    return y


def _check_records(records, visual_dim, audio_dim, num_classes):
    for rec in records:
        if rec.visual.shape[1] != visual_dim or rec.audio.shape[1] != audio_dim:
            raise ValueError(f"video {rec.id!r} has dims ({rec.visual.shape[1]}, {rec.audio.shape[1]}), "
                             f"dataset expects ({visual_dim}, {audio_dim})")
        if rec.labels and (rec.labels[0] < 0 or rec.labels[-1] >= num_classes):
            raise ValueError(f"video {rec.id!r} has labels outside [0, {num_classes})")


def write_dataset(path, dataset: Dataset) -> None:
    _check_records(dataset.records, dataset.visual_dim, dataset.audio_dim, dataset.num_classes)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset.records), dataset.visual_dim,
                              dataset.audio_dim, dataset.num_classes))
        for rec in dataset.records:
            fh.write(_U32.pack(len(rec.id)))
            fh.write(rec.id)
            fh.write(_U32.pack(rec.num_frames))
            fh.write(_U32.pack(len(rec.labels)))
            fh.write(np.asarray(rec.labels, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(rec.visual, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.audio, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def floats(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(4 * rows * cols)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols)


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for header ({len(buf)} bytes)")
    magic, version, count, C, M, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}")
    reader = _Reader(buf, path)
    reader.pos = _HEADER.size
    records = []
    for _ in range(count):
        vid = reader.take(reader.u32())
        n = reader.u32()
        labels = np.frombuffer(reader.take(4 * reader.u32()), dtype="<u4")
        visual = reader.floats(n, C)
        audio = reader.floats(n, M)
        try:
            records.append(VideoRecord(vid, visual, audio, tuple(labels.tolist())))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}") from None
    if reader.pos != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - reader.pos} trailing bytes after {count} videos")
    dataset = Dataset(records, C, M, c)
    try:
        _check_records(records, C, M, c)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
    return dataset


# -- synthetic data ----------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Videos whose labels depend on a bilinear interaction of the two modalities.

    Each class owns a random rank-``rank`` map ``B`` (unit Frobenius norm); the
    class is active when ``sigmoid(z_v^T B z_a) > threshold`` for the video's
    latent visual and audio vectors. Frames are the latents plus Gaussian noise.
    """

    video_count: int = 2500
    num_classes: int = 10
    visual_dim: int = 32
    audio_dim: int = 8
    rank: int = 2
    noise: float = 0.5
    min_frames: int = 5
    max_frames: int = 20
    threshold: float = 0.585
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError(f"need 1 <= min_frames <= max_frames, got {self.min_frames}, {self.max_frames}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        for name in ("video_count", "num_classes", "visual_dim", "audio_dim"):
            if getattr(self, name) < (0 if name == "video_count" else 1):
                raise ValueError(f"{name} is out of range: {getattr(self, name)}")


def class_maps(spec: SyntheticSpec) -> np.ndarray:
    """The planted per-class bilinear maps, shape (num_classes, C, M)."""
    rng = Rng(spec.seed).derive(0)
    maps = np.empty((spec.num_classes, spec.visual_dim, spec.audio_dim))
    for cls in range(spec.num_classes):
        P = rng.normal(size=(spec.visual_dim, spec.rank))
        Q = rng.normal(size=(spec.audio_dim, spec.rank))
        B = P @ Q.T
        maps[cls] = B / np.linalg.norm(B)
    return maps


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    maps = class_maps(spec)
    base = Rng(spec.seed)
    records = []
    for v in range(spec.video_count):
        rng = base.derive(1, v)
        z_v = rng.normal(size=spec.visual_dim)
        z_a = rng.normal(size=spec.audio_dim)
        scores = sigmoid(np.einsum("c,kcm,m->k", z_v, maps, z_a))
        labels = tuple(np.flatnonzero(scores > spec.threshold).tolist())
        n = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        visual = z_v + spec.noise * rng.normal(size=(n, spec.visual_dim))
        audio = z_a + spec.noise * rng.normal(size=(n, spec.audio_dim))
        records.append(VideoRecord(f"vid{v:06d}".encode(), visual, audio, labels))
    return Dataset(records, spec.visual_dim, spec.audio_dim, spec.num_classes)


# -- minibatches -------------------------------------------------------------

def stack_videos(records: Sequence[VideoRecord], frames: int, rng: Rng):
    """Sample every video to ``frames`` frames and stack into B x frames x D arrays."""
    visual = np.empty((len(records), frames, records[0].visual.shape[1]))
    audio = np.empty((len(records), frames, records[0].audio.shape[1]))
    for i, rec in enumerate(records):
        vrng = rng.derive(i)
        idx = sample_frames(np.arange(rec.num_frames, dtype=np.float64)[:, None], frames, vrng)
        idx = idx[:, 0].astype(np.intp)
        visual[i] = rec.visual[idx]
        audio[i] = rec.audio[idx]
    return visual, audio


def batches(records: Sequence[VideoRecord], batch_size: int, rng: Rng, frames: int,
            num_classes: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One shuffled epoch of ``(visual, audio, labels)`` minibatches; the last may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = rng.permutation(len(records))
    for b, start in enumerate(range(0, len(records), batch_size)):
        chunk = [records[i] for i in order[start:start + batch_size]]
        visual, audio = stack_videos(chunk, frames, rng.derive(b))
        yield visual, audio, labels_to_matrix(chunk, num_classes)
