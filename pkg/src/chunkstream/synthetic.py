"""Synthetic utterance generator with known word timings.

Each label owns a fixed random feature template; an utterance is a sequence
of labels, each held for a few frames, separated by short silences, plus
white noise.  Because the generator knows where every word ends, the
latency harness gets exact reference end times, and alignments are
learnable by construction.  Per-utterance RNG streams keyed by (seed,
index) make datasets byte-identical across runs regardless of order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Utterance, write_features, write_manifest
from .decoder import Vocab
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticTask:
    vocab_size: int = 10  # labels, excluding the end-of-chunk symbol
    feat_dim: int = 16
    frame_ms: int = 10
    min_dur: int = 3  # frames per label
    max_dur: int = 9
    min_words: int = 3
    max_words: int = 12
    max_silence: int = 3  # frames between words
    noise: float = 0.3
    utts_per_recording: int = 8

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("need at least two labels")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ConfigError(f"bad duration range [{self.min_dur}, {self.max_dur}]")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError(f"bad word-count range [{self.min_words}, {self.max_words}]")
        if self.max_silence < 0 or self.noise < 0:
            raise ConfigError("silence and noise must be nonnegative")

    @property
    def label_tokens(self) -> list[str]:
        return [f"w{i:02d}" for i in range(self.vocab_size)]

    def vocab(self) -> Vocab:
        return Vocab.from_labels(self.label_tokens)


def label_templates(task: SyntheticTask, seed: int) -> np.ndarray:
    """One deterministic feature signature per label, (V, D)."""
    rng = np.random.default_rng([seed, 0x7E4])
    return rng.uniform(-1.0, 1.0, size=(task.vocab_size, task.feat_dim)).astype(np.float32)


def gen_utterance(task: SyntheticTask, templates: np.ndarray, seed: int, index: int) -> Utterance:
    rng = np.random.default_rng([seed, index])
    n_words = int(rng.integers(task.min_words, task.max_words + 1))
    labels = []
    for _ in range(n_words):
        if not labels:
            lab = int(rng.integers(0, task.vocab_size))
        else:
            # uniform over the other labels: no immediate repeats
            r = int(rng.integers(0, task.vocab_size - 1))
            lab = r if r < labels[-1] else r + 1
        labels.append(lab)

    frames: list[np.ndarray] = []
    ends: list[float] = []
    total = 0

    def silence():
        nonlocal total
        n = int(rng.integers(0, task.max_silence + 1))
        if n:
            frames.append(np.zeros((n, task.feat_dim), dtype=np.float32))
            total += n

    silence()
    for lab in labels:
        dur = int(rng.integers(task.min_dur, task.max_dur + 1))
        frames.append(np.repeat(templates[lab][None, :], dur, axis=0))
        total += dur
        ends.append(total * task.frame_ms / 1000.0)
        silence()

    feats = np.concatenate(frames, axis=0)
    feats = feats + rng.normal(0.0, task.noise, size=feats.shape).astype(np.float32)
    recording = f"rec{index // task.utts_per_recording:04d}"
    tokens = task.label_tokens
    return Utterance(
        utt_id=f"{recording}_u{index:05d}",
        features=feats.astype(np.float32),
        frame_ms=task.frame_ms,
        transcript=[tokens[lab] for lab in labels],
        recording=recording,
        word_end_s=ends,
    )


def gen_dataset(task: SyntheticTask, num_utts: int, seed: int, start_index: int = 0) -> list[Utterance]:
    templates = label_templates(task, seed)
    return [gen_utterance(task, templates, seed, start_index + i) for i in range(num_utts)]


def write_dataset(utterances, vocab: Vocab, out_dir) -> Path:
    """Feature files + manifest + vocabulary under one directory."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for u in utterances:
        rel = f"features/{u.utt_id}.feat"
        write_features(out_dir / rel, u.features, u.frame_ms)
        entry = {
            "id": u.utt_id,
            "feature_file": rel,
            "transcript": u.transcript,
            "recording": u.recording,
        }
        if u.word_end_s is not None:
            entry["word_end_s"] = [round(e, 6) for e in u.word_end_s]
        entries.append(entry)
    write_manifest(out_dir / "manifest.jsonl", entries)
    vocab.save(out_dir / "vocab.txt")
    return out_dir / "manifest.jsonl"
