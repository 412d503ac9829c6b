"""Label-synchronous attention decoder over chunked encoder output.

Each step embeds the previous symbol, updates a zoneout LSTM (optionally fed
the previous attention context), attends over the current chunk's encoder
frames with additive MLP attention, and produces a distribution over the
vocabulary through a maxout readout.  Emitting the end-of-chunk symbol moves
the chunk pointer forward; emitting it in the last chunk completes the
sequence.  With a single chunk the end-of-chunk symbol is exactly an
end-of-sequence symbol, which is the global (non-streaming) mode.

Two ablation flags mimic a transducer's prediction network: one skips the
LSTM update when the previous symbol was end-of-chunk, the other removes the
attention-context input from the LSTM.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import ParamSet
from .encoder import EncoderOutput
from .errors import ConfigError, DataError, ProtocolError
from .chunking import ChunkwiseAlignment
from .tensor import (
    LSTMParams,
    Tensor,
    add,
    concat,
    gather_rows,
    linear,
    log_softmax,
    matmul,
    maxout,
    mul,
    reshape,
    softmax,
    sum_,
    take_per_row,
    tanh,
    zoneout_lstm_step,
)

EOC_TOKEN = "<eoc>"
BOS = -1  # begin-of-sequence sentinel in label arrays; embeds as its own row


class Vocab:
    """Dense token ids; the end-of-chunk symbol holds the last id."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens or tokens[-1] != EOC_TOKEN:
            raise DataError(f"vocabulary must end with {EOC_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eoc_id(self) -> int:
        return len(self.tokens) - 1

    @property
    def blank_id(self) -> int:
        """Blank id in the CTC output space (one past the vocabulary)."""
        return len(self.tokens)

    @classmethod
    def from_labels(cls, labels) -> "Vocab":
        return cls(list(labels) + [EOC_TOKEN])

    def encode(self, tokens) -> list[int]:
        try:
            return [self._ids[t] for t in tokens]
        except KeyError as e:
            raise DataError(f"unknown token {e.args[0]!r}") from e

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DataError(f"token id {i} out of range 0..{len(self.tokens) - 1}")
            out.append(self.tokens[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        return cls(lines)


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    enc_dim: int
    embed_dim: int = 64
    lstm_dim: int = 64
    attn_dim: int = 64
    maxout_dim: int = 64
    zoneout: tuple = (0.05, 0.15)  # (r_c, r_h)
    mode: str = "chunked"
    mask_eoc_in_lstm: bool = False
    no_context_in_lstm: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocabulary needs at least one label plus end-of-chunk, got {self.vocab_size}")
        if self.mode not in ("global", "chunked"):
            raise ConfigError(f"mode must be 'global' or 'chunked', got {self.mode!r}")
        if self.mode == "global" and (self.mask_eoc_in_lstm or self.no_context_in_lstm):
            raise ConfigError("transducer-ablation flags are only valid in chunked mode")
        r_c, r_h = self.zoneout
        if not (0.0 <= r_c <= 1.0 and 0.0 <= r_h <= 1.0):
            raise ConfigError(f"zoneout rates must lie in [0, 1], got {self.zoneout}")

    @property
    def eoc_id(self) -> int:
        return self.vocab_size - 1

    @property
    def lstm_input_dim(self) -> int:
        return self.embed_dim + (0 if self.no_context_in_lstm else self.enc_dim)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "enc_dim": self.enc_dim,
            "embed_dim": self.embed_dim,
            "lstm_dim": self.lstm_dim,
            "attn_dim": self.attn_dim,
            "maxout_dim": self.maxout_dim,
            "zoneout": list(self.zoneout),
            "mode": self.mode,
            "mask_eoc_in_lstm": self.mask_eoc_in_lstm,
            "no_context_in_lstm": self.no_context_in_lstm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        d = dict(d)
        d["zoneout"] = tuple(d.get("zoneout", (0.05, 0.15)))
        return cls(**d)


@dataclass
class DecoderState:
    """Batched decoding state; one row per live hypothesis."""

    h: Tensor  # (B, H)
    c: Tensor  # (B, H)
    context: Tensor  # (B, D_enc)
    chunk: np.ndarray  # (B,) int64, 0-based chunk pointer
    done: np.ndarray  # (B,) bool, sequence completed
    emitted: int = 0

    @property
    def batch(self) -> int:
        return self.h.shape[0]

    def select(self, rows) -> "DecoderState":
        rows = np.asarray(rows, dtype=np.int64)
        return DecoderState(
            h=Tensor(self.h.data[rows].copy()),
            c=Tensor(self.c.data[rows].copy()),
            context=Tensor(self.context.data[rows].copy()),
            chunk=self.chunk[rows].copy(),
            done=self.done[rows].copy(),
            emitted=self.emitted,
        )


class Decoder:
    def __init__(self, config: DecoderConfig, params: ParamSet, prefix: str = "dec"):
        self.config = config
        self.params = params
        self.prefix = prefix
        if f"{prefix}.embed" not in params:
            self._build()
        got = params[f"{prefix}.lstm.w_ih"].shape[0]
        if got != config.lstm_input_dim:
            raise ConfigError(
                f"LSTM input weight expects {got} inputs but config implies {config.lstm_input_dim}; "
                "the no_context_in_lstm flag changes the parameter shape and is fixed at build time"
            )

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def _build(self) -> None:
        cfg = self.config
        ps = self.params
        pre = self.prefix
        v, e, h, a, m = cfg.vocab_size, cfg.embed_dim, cfg.lstm_dim, cfg.attn_dim, cfg.maxout_dim
        ps.weight(f"{pre}.embed", (v + 1, e))  # final row embeds begin-of-sequence
        ps.weight(f"{pre}.lstm.w_ih", (cfg.lstm_input_dim, 4 * h))
        ps.weight(f"{pre}.lstm.w_hh", (h, 4 * h))
        b = np.zeros(4 * h, dtype=ps.dtype)
        b[h : 2 * h] = 1.0  # forget-gate bias
        ps.add(f"{pre}.lstm.b", b)
        ps.weight(f"{pre}.attn.wg", (h, a))
        ps.weight(f"{pre}.attn.wh", (cfg.enc_dim, a))
        ps.bias(f"{pre}.attn.b", a)
        ps.weight(f"{pre}.attn.v", (a, 1))
        ps.bias(f"{pre}.attn.bv", 1)
        ps.weight(f"{pre}.read.w1", (h + cfg.enc_dim, 2 * m))
        ps.bias(f"{pre}.read.b1", 2 * m)
        ps.weight(f"{pre}.read.w2", (m, v))
        ps.bias(f"{pre}.read.b2", v)

    def initial_state(self, batch: int = 1) -> DecoderState:
        cfg = self.config
        dt = self.params.dtype
        return DecoderState(
            h=Tensor(np.zeros((batch, cfg.lstm_dim), dtype=dt)),
            c=Tensor(np.zeros((batch, cfg.lstm_dim), dtype=dt)),
            context=Tensor(np.zeros((batch, cfg.enc_dim), dtype=dt)),
            chunk=np.zeros(batch, dtype=np.int64),
            done=np.zeros(batch, dtype=bool),
            emitted=0,
        )

    def step(
        self,
        state: DecoderState,
        prev_labels,
        chunk_keys,
        chunk_valid,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, DecoderState]:
        """One decoding step for every batch row.

        ``prev_labels`` is a (B,) int array (BOS sentinel allowed);
        ``chunk_keys`` is a (B, T, D_enc) Tensor holding each row's current
        chunk, ``chunk_valid`` a (B, T) boolean mask of real frames.  Returns
        unnormalised logits (B, |A|) and the recurrent part of the new state;
        the chunk pointer is advanced separately once a label is chosen.
        """
        cfg = self.config
        if state.done.any():
            raise ProtocolError("decoder_step on a completed sequence")
        prev = np.asarray(prev_labels, dtype=np.int64)
        if prev.shape != (state.batch,):
            raise DataError(f"prev_labels must be ({state.batch},), got {prev.shape}")
        if (prev >= cfg.vocab_size).any() or (prev < BOS).any():
            raise DataError("prev_labels outside vocabulary")
        emb = gather_rows(self._p("embed"), np.where(prev == BOS, cfg.vocab_size, prev))
        if cfg.no_context_in_lstm:
            x = emb
        else:
            x = concat([emb, state.context], axis=1)
        lstm = LSTMParams(self._p("lstm.w_ih"), self._p("lstm.w_hh"), self._p("lstm.b"))
        h_new, c_new = zoneout_lstm_step(
            (state.h, state.c), x, lstm, cfg.zoneout, train_mode=train_mode, rng=rng
        )
        if cfg.mask_eoc_in_lstm:
            # Exact 0/1 blend so a skipped update preserves the state bit-for-bit.
            keep = (prev != cfg.eoc_id).astype(self.params.dtype)[:, None]
            keep_t = Tensor(keep)
            drop_t = Tensor(1.0 - keep)
            h_new = add(mul(h_new, keep_t), mul(state.h, drop_t))
            c_new = add(mul(c_new, keep_t), mul(state.c, drop_t))
        g = h_new

        inner = add(
            reshape(linear(g, self._p("attn.wg"), self._p("attn.b")), (state.batch, 1, -1)),
            matmul(chunk_keys, self._p("attn.wh")),
        )
        e = add(matmul(tanh(inner), self._p("attn.v")), self._p("attn.bv"))
        scores = reshape(e, (state.batch, chunk_keys.shape[1]))
        alpha = softmax(scores, mask=chunk_valid)
        ctx = reshape(
            matmul(reshape(alpha, (state.batch, 1, -1)), chunk_keys),
            (state.batch, cfg.enc_dim),
        )
        read_in = concat([g, ctx], axis=1)
        hidden = maxout(linear(read_in, self._p("read.w1"), self._p("read.b1")))
        logits = linear(hidden, self._p("read.w2"), self._p("read.b2"))
        new_state = DecoderState(
            h=h_new,
            c=c_new,
            context=ctx,
            chunk=state.chunk.copy(),
            done=state.done.copy(),
            emitted=state.emitted,
        )
        return logits, new_state

    def step_probs(self, state, prev_labels, chunk_keys, chunk_valid):
        """Normalised next-symbol distribution; inference convenience."""
        logits, new_state = self.step(state, prev_labels, chunk_keys, chunk_valid)
        return softmax(logits), new_state


def advance_pointer(state: DecoderState, labels, eoc_id: int, num_chunks: int) -> DecoderState:
    """Account for emitted labels: move the pointer on end-of-chunk.

    Completion happens exactly when end-of-chunk is emitted in the final
    chunk.  Emitting anything from an already completed row is a protocol
    violation.
    """
    if state.done.any():
        raise ProtocolError("emission after sequence completion")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (state.batch,):
        raise DataError(f"labels must be ({state.batch},), got {labels.shape}")
    is_eoc = labels == eoc_id
    done = is_eoc & (state.chunk == num_chunks - 1)
    chunk = np.where(is_eoc & ~done, state.chunk + 1, state.chunk)
    return replace(state, chunk=chunk, done=done | state.done, emitted=state.emitted + 1)


def chunk_keys_for(enc_out: EncoderOutput, chunk_idx: np.ndarray):
    """Stack each row's current chunk into (B, T, D) keys plus a valid mask.

    Inference helper over plain arrays; teacher-forced scoring builds its
    keys from graph tensors instead.
    """
    width = max(c.shape[0] for c in enc_out.chunks)
    d = enc_out.chunks[0].shape[1]
    b = len(chunk_idx)
    keys = np.zeros((b, width, d), dtype=enc_out.chunks[0].dtype)
    valid = np.zeros((b, width), dtype=bool)
    for row, k in enumerate(chunk_idx):
        data = enc_out.chunks[k].data
        keys[row, : data.shape[0]] = data
        valid[row, : enc_out.valid[k]] = True
    return Tensor(keys), valid


def sequence_log_prob(
    decoder: Decoder,
    enc_out: EncoderOutput,
    alignment: ChunkwiseAlignment,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Teacher-forced log probability of a chunkwise symbol sequence.

    Differentiable when a graph is active; a scalar tensor comes back.
    """
    alignment.validate(num_chunks=enc_out.num_chunks)
    eoc = alignment.eoc_id
    if eoc != decoder.config.eoc_id:
        raise DataError(
            f"alignment end-of-chunk id {eoc} does not match decoder vocabulary ({decoder.config.eoc_id})"
        )
    state = decoder.initial_state(batch=1)
    prev = BOS
    picked = []
    for sym in alignment.symbols:
        k = int(state.chunk[0])
        chunk = enc_out.chunks[k]
        keys = reshape(chunk, (1, chunk.shape[0], chunk.shape[1]))
        valid = (np.arange(chunk.shape[0]) < enc_out.valid[k])[None, :]
        logits, state = decoder.step(
            state, np.array([prev]), keys, valid, train_mode=train_mode, rng=rng
        )
        picked.append(take_per_row(log_softmax(logits), np.array([sym])))
        state = advance_pointer(state, np.array([sym]), eoc, enc_out.num_chunks)
        prev = sym
    return sum_(concat(picked, axis=0))
