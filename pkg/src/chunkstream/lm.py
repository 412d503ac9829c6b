"""Count-based n-gram language models over label ids, with ARPA file I/O.

Smoothing is additive with mass ``add_k * V`` interpolated against the next
lower order, which makes every per-history distribution sum to one exactly
and maps onto the ARPA backoff representation without loss: the backoff
weight of a history h is d / (count(h) + d).

Ids follow the decoder vocabulary: labels 0..V-2 and the final id doubling
as end-of-sequence.  The same class serves as the external LM and as the
internal-LM estimate (same interface, different training text).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

BOS_CTX = -1  # context padding for sequence starts
LOG10 = np.log(10.0)


class NGramLM:
    """Backoff n-gram model; scores label sequences ended by EOS."""

    def __init__(self, vocab_size: int, order: int = 3, add_k: float = 0.5):
        if order < 1:
            raise ConfigError(f"order must be >= 1, got {order}")
        if add_k <= 0:
            raise ConfigError(f"add_k must be positive, got {add_k}")
        if vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
        self.vocab_size = vocab_size
        self.order = order
        self.add_k = add_k
        self.eos_id = vocab_size - 1
        # counts[m] maps context tuple (length m) -> vector of next-token counts
        self.counts: list[dict] = [dict() for _ in range(order)]

    @property
    def _d(self) -> float:
        return self.add_k * self.vocab_size

    def train(self, sequences) -> "NGramLM":
        """Count label-id sequences; EOS is appended to each automatically."""
        for seq in sequences:
            seq = [int(t) for t in seq]
            if any(not 0 <= t < self.eos_id for t in seq):
                raise DataError("training sequence contains ids outside the label range")
            padded = [BOS_CTX] + seq + [self.eos_id]
            for i in range(1, len(padded)):
                token = padded[i]
                for m in range(min(self.order, i + 1)):
                    ctx = tuple(padded[i - m : i])
                    vec = self.counts[m].get(ctx)
                    if vec is None:
                        vec = np.zeros(self.vocab_size, dtype=np.float64)
                        self.counts[m][ctx] = vec
                    vec[token] += 1
        return self

    def _context(self, history) -> tuple:
        # A single start sentinel, so early contexts are simply shorter.
        hist = [BOS_CTX] + [int(t) for t in history]
        return tuple(hist[-(self.order - 1) :]) if self.order > 1 else ()

    def dist(self, history) -> np.ndarray:
        """Probabilities of every next token (EOS included) given history."""
        return self._ctx_dist(self._context(history))

    def _ctx_dist(self, ctx: tuple) -> np.ndarray:
        d = self._d
        p = np.full(self.vocab_size, 1.0 / self.vocab_size)
        for m in range(len(ctx) + 1):
            sub = ctx[len(ctx) - m :] if m else ()
            vec = self.counts[m].get(sub)
            if vec is None:
                continue  # unseen context: keep the lower-order estimate
            total = vec.sum()
            p = (vec + d * p) / (total + d)
        return p

    def log_dist(self, history) -> np.ndarray:
        return np.log(self.dist(history))

    def score_step(self, history, next_token: int) -> float:
        if not 0 <= next_token < self.vocab_size:
            raise DataError(f"token id {next_token} outside vocabulary")
        return float(np.log(self.dist(history)[next_token]))

    def sequence_log_prob(self, seq) -> float:
        total = 0.0
        hist: list[int] = []
        for t in list(seq) + [self.eos_id]:
            total += self.score_step(hist, t)
            hist.append(t)
        return total


# ---------------------------------------------------------------------------
# ARPA-compatible serialization

BOS_WORD = "<s>"
EOS_WORD = "</s>"


def _id_to_word(i: int, tokens) -> str:
    if i == BOS_CTX:
        return BOS_WORD
    if i == len(tokens) - 1:
        return EOS_WORD
    return tokens[i]


def _word_to_id(w: str, index, eos_id: int) -> int:
    if w == BOS_WORD:
        return BOS_CTX
    if w == EOS_WORD:
        return eos_id
    try:
        return index[w]
    except KeyError:
        raise DataError(f"unknown token {w!r} in LM file") from None


def write_arpa(lm: NGramLM, path, tokens) -> None:
    """Write the model in ARPA backoff format.

    ``tokens`` is the decoder vocabulary; its last entry maps to </s>.
    Explicit entries cover observed n-grams; everything else follows from
    the backoff weights, reproducing the count model exactly.
    """
    if len(tokens) != lm.vocab_size:
        raise DataError(f"token list length {len(tokens)} != LM vocabulary {lm.vocab_size}")
    grams: list[list[tuple]] = [[] for _ in range(lm.order)]

    # Unigrams: every word gets an entry; <s> is context-only.
    uni = _unigram(lm)
    for i in range(lm.vocab_size):
        grams[0].append(((i,), np.log10(uni[i]), _bow(lm, (i,)) if lm.order > 1 else None))
    if lm.order > 1:
        grams[0].append(((BOS_CTX,), -99.0, _bow(lm, (BOS_CTX,))))

    for m in range(1, lm.order):
        for ctx, vec in sorted(lm.counts[m].items()):
            p_ctx = lm._ctx_dist(ctx)
            for w in np.nonzero(vec)[0]:
                entry = ctx + (int(w),)
                bow = _bow(lm, entry) if m + 1 < lm.order else None
                grams[m].append((entry, np.log10(p_ctx[w]), bow))

    lines = ["\\data\\"]
    for m in range(lm.order):
        lines.append(f"ngram {m + 1}={len(grams[m])}")
    for m in range(lm.order):
        lines.append("")
        lines.append(f"\\{m + 1}-grams:")
        for entry, logp, bow in grams[m]:
            words = " ".join(_id_to_word(i, tokens) for i in entry)
            if bow is None:
                lines.append(f"{logp:.12g}\t{words}")
            else:
                lines.append(f"{logp:.12g}\t{words}\t{bow:.12g}")
    lines.append("")
    lines.append("\\end\\")
    lines.append("")
    Path(path).write_text("\n".join(lines))


def _unigram(lm: NGramLM) -> np.ndarray:
    """Context-free distribution: counts interpolated with uniform."""
    p = np.full(lm.vocab_size, 1.0 / lm.vocab_size)
    vec = lm.counts[0].get(())
    if vec is not None:
        p = (vec + lm._d * p) / (vec.sum() + lm._d)
    return p


def _bow(lm: NGramLM, ctx: tuple) -> float:
    """log10 backoff weight of a context: d / (count(ctx) + d)."""
    m = len(ctx)
    vec = lm.counts[m].get(ctx) if m < lm.order else None
    total = float(vec.sum()) if vec is not None else 0.0
    return float(np.log10(lm._d / (total + lm._d)))


class ArpaLM:
    """Scores from an ARPA file; same interface as the count model."""

    def __init__(self, order: int, vocab_size: int, probs: dict, bows: dict):
        self.order = order
        self.vocab_size = vocab_size
        self.eos_id = vocab_size - 1
        self.probs = probs  # tuple of ids -> natural-log prob
        self.bows = bows  # tuple of ids -> natural-log backoff weight

    def _context(self, history) -> tuple:
        history = [int(t) for t in history]
        pad = [BOS_CTX] * max(0, self.order - 1 - len(history))
        return tuple(pad + history[-(self.order - 1) :]) if self.order > 1 else ()

    def score_step(self, history, next_token: int) -> float:
        if not 0 <= next_token < self.vocab_size:
            raise DataError(f"token id {next_token} outside vocabulary")
        ctx = self._context(history)
        logp = 0.0
        while True:
            entry = ctx + (next_token,)
            if entry in self.probs:
                return logp + self.probs[entry]
            if not ctx:
                raise DataError(f"LM file lacks a unigram for id {next_token}")
            logp += self.bows.get(ctx, 0.0)
            ctx = ctx[1:]

    def log_dist(self, history) -> np.ndarray:
        return np.array([self.score_step(history, t) for t in range(self.vocab_size)])

    def dist(self, history) -> np.ndarray:
        return np.exp(self.log_dist(history))

    def sequence_log_prob(self, seq) -> float:
        total = 0.0
        hist: list[int] = []
        for t in list(seq) + [self.eos_id]:
            total += self.score_step(hist, t)
            hist.append(t)
        return total


def read_arpa(path, tokens) -> ArpaLM:
    index = {t: i for i, t in enumerate(tokens)}
    eos_id = len(tokens) - 1
    text = Path(path).read_text().splitlines()
    probs: dict = {}
    bows: dict = {}
    order = 0
    section = None
    for line in text:
        line = line.strip()
        if not line:
            continue
        if line == "\\data\\" or line == "\\end\\":
            section = None
            continue
        if line.startswith("ngram "):
            order = max(order, int(line.split("=")[0].split()[1]))
            continue
        if line.endswith("-grams:") and line.startswith("\\"):
            section = int(line[1:].split("-")[0])
            continue
        if section is None:
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            parts = line.split()
            parts = [parts[0], " ".join(parts[1 : 1 + section])] + parts[1 + section :]
        logp = float(parts[0])
        ids = tuple(_word_to_id(w, index, eos_id) for w in parts[1].split())
        if len(ids) != section:
            raise DataError(f"malformed LM entry: {line!r}")
        probs[ids] = logp * LOG10
        if len(parts) > 2:
            bows[ids] = float(parts[2]) * LOG10
    if order == 0:
        raise DataError(f"no ngram declarations found in {path}")
    return ArpaLM(order=order, vocab_size=len(tokens), probs=probs, bows=bows)
