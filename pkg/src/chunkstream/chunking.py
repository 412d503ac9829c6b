"""Chunk layout of a feature stream and alignment label spaces.

A stream of T frames is cut into K = ceil(T / stride) chunks.  Chunk k
(0-based here; file formats that count from 1 say so explicitly) covers the
center frames [k*stride, k*stride + center) plus ``lookahead`` extra frames
of right context.  Center size and stride are kept equal, so the centers
tile the stream exactly; only the lookahead overlaps the next chunk.  The
final chunk may run past the stream and is zero-padded, with a validity mask
marking real frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ChunkSpec:
    """Chunk geometry in raw feature frames."""

    center: int
    stride: int
    lookahead: int
    frame_ms: int = 10

    def __post_init__(self):
        if self.center <= 0 or self.stride <= 0 or self.lookahead < 0:
            raise ConfigError(f"bad chunk geometry: {self}")
        if self.center != self.stride:
            raise ConfigError(
                f"chunk stride ({self.stride}) must equal center size ({self.center})"
            )
        if self.frame_ms <= 0:
            raise ConfigError(f"frame_ms must be positive, got {self.frame_ms}")

    @property
    def window(self) -> int:
        return self.center + self.lookahead

    @classmethod
    def from_seconds(cls, center_s: float, lookahead_s: float, frame_ms: int) -> "ChunkSpec":
        def to_frames(seconds: float, what: str) -> int:
            ms = seconds * 1000.0
            frames = ms / frame_ms
            if abs(frames - round(frames)) > 1e-9:
                raise ConfigError(
                    f"{what} of {seconds}s is not a whole number of {frame_ms}ms frames"
                )
            return int(round(frames))

        center = to_frames(center_s, "chunk size")
        return cls(center=center, stride=center, lookahead=to_frames(lookahead_s, "lookahead"), frame_ms=frame_ms)


def chunk_count(num_frames: int, spec: ChunkSpec) -> int:
    if num_frames <= 0:
        raise DataError(f"stream must have at least one frame, got {num_frames}")
    return -(-num_frames // spec.stride)


@dataclass
class ChunkGrid:
    """Zero-padded chunk windows of one stream plus their validity mask.

    ``frames``: (K, window, D) float array, ``valid``: (K, window) boolean,
    True where the slot holds a real stream frame.
    """

    frames: np.ndarray
    valid: np.ndarray
    spec: ChunkSpec
    num_frames: int

    @property
    def num_chunks(self) -> int:
        return self.frames.shape[0]


def extract_chunks(features: np.ndarray, spec: ChunkSpec) -> ChunkGrid:
    features = np.asarray(features)
    if features.ndim != 2:
        raise DataError(f"features must be (T, D), got shape {features.shape}")
    t, d = features.shape
    k = chunk_count(t, spec)
    w = spec.window
    frames = np.zeros((k, w, d), dtype=features.dtype)
    valid = np.zeros((k, w), dtype=bool)
    for i in range(k):
        lo = i * spec.stride
        hi = min(lo + w, t)
        frames[i, : hi - lo] = features[lo:hi]
        valid[i, : hi - lo] = True
    return ChunkGrid(frames=frames, valid=valid, spec=spec, num_frames=t)


BLANK = -1  # framewise "no label here" marker; serialised as null


@dataclass
class FramewiseAlignment:
    """One label id or BLANK per encoder output frame."""

    utt_id: str
    labels: np.ndarray  # (T',) int64, BLANK where no label ends

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DataError(f"framewise alignment must be 1-d, got shape {self.labels.shape}")

    @property
    def label_sequence(self) -> list[int]:
        return [int(x) for x in self.labels if x != BLANK]


@dataclass
class ChunkwiseAlignment:
    """Label sequence with an end-of-chunk symbol closing every chunk.

    ``symbols`` has length N + K for N labels over K chunks and contains the
    end-of-chunk id exactly K times, once of them last.
    """

    utt_id: str
    symbols: list[int]
    eoc_id: int

    def validate(self, num_chunks: int | None = None) -> None:
        if not self.symbols or self.symbols[-1] != self.eoc_id:
            raise DataError(f"{self.utt_id}: chunkwise alignment must end with end-of-chunk")
        k = sum(1 for s in self.symbols if s == self.eoc_id)
        if num_chunks is not None and k != num_chunks:
            raise DataError(
                f"{self.utt_id}: alignment closes {k} chunks, stream has {num_chunks}"
            )

    @property
    def labels(self) -> list[int]:
        return [s for s in self.symbols if s != self.eoc_id]


def framewise_to_chunkwise(
    framewise: FramewiseAlignment, stride_frames: int, num_chunks: int, eoc_id: int
) -> ChunkwiseAlignment:
    """Regroup per-frame labels into per-chunk runs closed by end-of-chunk.

    ``stride_frames`` is the chunk stride measured in encoder output frames;
    the alignment frame i belongs to chunk i // stride_frames.
    """
    if stride_frames <= 0:
        raise ConfigError(f"stride_frames must be positive, got {stride_frames}")
    t = len(framewise.labels)
    implied = -(-t // stride_frames)
    if implied != num_chunks:
        raise DataError(
            f"{framewise.utt_id}: alignment length {t} implies {implied} chunks, expected {num_chunks}"
        )
    symbols: list[int] = []
    for k in range(num_chunks):
        lo, hi = k * stride_frames, min((k + 1) * stride_frames, t)
        for lab in framewise.labels[lo:hi]:
            if lab != BLANK:
                if lab == eoc_id:
                    raise DataError(
                        f"{framewise.utt_id}: end-of-chunk id {eoc_id} appears as a frame label"
                    )
                symbols.append(int(lab))
        symbols.append(eoc_id)
    return ChunkwiseAlignment(utt_id=framewise.utt_id, symbols=symbols, eoc_id=eoc_id)


def count_paths(num_labels: int, num_chunks: int) -> int:
    """Number of ways to distribute N ordered labels over K chunks.

    Each distribution is a weak composition of N into K parts, so the count
    is C(N + K - 1, N).
    """
    if num_labels < 0 or num_chunks < 1:
        raise ConfigError(f"need N >= 0 and K >= 1, got N={num_labels} K={num_chunks}")
    return math.comb(num_labels + num_chunks - 1, num_labels)
