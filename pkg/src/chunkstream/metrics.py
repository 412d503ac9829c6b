"""Scoring: word error rate, emission latency, long-form evaluation sets.

Latency of a word is the gap between its true end time and the end time of
the chunk that emitted it; the chunk end includes the lookahead by default,
since the chunk cannot be computed before its lookahead frames arrive.
Percentiles use the nearest-rank rule (no interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .chunking import ChunkSpec
from .errors import ConfigError, DataError


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    matches: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_alignment(ref, hyp):
    """Minimum-edit alignment as (op, ref_index, hyp_index) triples.

    Ops are "match", "sub", "del" (ref word missing from hyp, hyp_index
    None) and "ins" (extra hyp word, ref_index None).  Unit costs; on ties
    the traceback prefers diagonal, then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("match" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def wer_counts(ref, hyp) -> EditCounts:
    counts = EditCounts()
    for op, _, _ in edit_alignment(ref, hyp):
        if op == "match":
            counts.matches += 1
        elif op == "sub":
            counts.substitutions += 1
        elif op == "del":
            counts.deletions += 1
        else:
            counts.insertions += 1
    return counts


def wer(ref, hyp):
    """Word error rate plus its substitution/deletion/insertion counts."""
    ref = list(ref)
    if not ref:
        raise DataError("word error rate needs a non-empty reference")
    counts = wer_counts(ref, hyp)
    return counts.errors / len(ref), counts


def corpus_wer(pairs):
    """Pooled WER over (reference, hypothesis) pairs."""
    total = EditCounts()
    ref_len = 0
    for ref, hyp in pairs:
        ref = list(ref)
        if not ref:
            raise DataError("word error rate needs a non-empty reference")
        c = wer_counts(ref, hyp)
        total.substitutions += c.substitutions
        total.deletions += c.deletions
        total.insertions += c.insertions
        total.matches += c.matches
        ref_len += len(ref)
    if ref_len == 0:
        raise DataError("empty corpus")
    return total.errors / ref_len, total


# ---------------------------------------------------------------------------
# emission latency


@dataclass
class LatencySample:
    word: str
    true_end_s: float
    emit_end_s: float

    @property
    def latency(self) -> float:
        return self.emit_end_s - self.true_end_s


def emit_chunk_end_time(k: int, spec: ChunkSpec, include_lookahead: bool = True) -> float:
    """End time (seconds) of 1-based chunk k, the earliest moment its
    output can exist.  The lookahead wait is included unless disabled."""
    if k < 1:
        raise ConfigError(f"chunk index is 1-based, got {k}")
    frames = k * spec.stride + (spec.lookahead if include_lookahead else 0)
    return frames * spec.frame_ms / 1000.0


def latency_samples(
    ref_words,
    ref_end_s,
    hyp_words,
    hyp_emit_chunks,
    spec: ChunkSpec,
    include_lookahead: bool = True,
):
    """One sample per correctly recognised word.

    ``hyp_emit_chunks`` holds the 1-based emitting chunk of each hypothesis
    word; alignment against the reference decides which words count.
    """
    ref_words = list(ref_words)
    if len(ref_words) != len(ref_end_s):
        raise DataError(f"{len(ref_words)} reference words but {len(ref_end_s)} end times")
    hyp_words = list(hyp_words)
    if len(hyp_words) != len(hyp_emit_chunks):
        raise DataError(f"{len(hyp_words)} hypothesis words but {len(hyp_emit_chunks)} emit chunks")
    samples = []
    for op, i, j in edit_alignment(ref_words, hyp_words):
        if op == "match":
            samples.append(
                LatencySample(
                    word=ref_words[i],
                    true_end_s=float(ref_end_s[i]),
                    emit_end_s=emit_chunk_end_time(hyp_emit_chunks[j], spec, include_lookahead),
                )
            )
    return samples


def latency_percentiles(values):
    """Nearest-rank p50/p95/p99 of latency values."""
    values = sorted(float(v) for v in values)
    if not values:
        raise DataError("cannot take percentiles of an empty sample set")
    n = len(values)

    def rank(p: float) -> float:
        idx = int(np.ceil(p / 100.0 * n))
        return values[max(idx, 1) - 1]

    return rank(50), rank(95), rank(99)


# ---------------------------------------------------------------------------
# long-form concatenation


def concat_longform(utterances, c: int):
    """Merge runs of C consecutive utterances of the same recording.

    Features and transcripts concatenate; word end times shift by the
    preceding audio length.  A short tail group is kept as-is.
    """
    if c < 1:
        raise ConfigError(f"concatenation count must be >= 1, got {c}")
    out = []
    group: list = []

    def flush():
        if not group:
            return
        first = group[0]
        if len(group) == 1:
            out.append(first)
            group.clear()
            return
        feats = np.concatenate([u.features for u in group], axis=0)
        words: list[str] = []
        ends: list[float] = []
        offset = 0.0
        for u in group:
            words.extend(u.transcript)
            if u.word_end_s is not None:
                ends.extend(e + offset for e in u.word_end_s)
            offset += u.features.shape[0] * u.frame_ms / 1000.0
        merged = replace(
            first,
            utt_id=f"{first.utt_id}+{len(group) - 1}",
            features=feats,
            transcript=words,
            word_end_s=ends if len(ends) == len(words) else None,
        )
        out.append(merged)
        group.clear()

    prev_rec = None
    for u in utterances:
        if group and (u.recording != prev_rec or len(group) == c):
            flush()
        group.append(u)
        prev_rec = u.recording
    flush()
    return out
