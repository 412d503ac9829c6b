"""Two-stage training: global model first, then chunked fine-tuning.

Stage one trains the global encoder-decoder with labelwise cross entropy
plus an auxiliary CTC loss on the encoder output.  Stage two extracts
time-synchronous alignments from the trained CTC head (Viterbi with the
label loop disallowed), regroups them into chunkwise symbol sequences, and
fine-tunes a chunked model initialised from the stage-one checkpoint.

Gradients accumulate over a batch of utterances in a fixed order, so a
fixed seed reproduces the loss trajectory exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import ParamSet
from .chunking import ChunkwiseAlignment, chunk_count, framewise_to_chunkwise
from .ctc import ctc_forced_align, ctc_loss
from .decoder import Decoder, sequence_log_prob
from .encoder import EncoderOutput
from .errors import ConfigError, DataError, NumericalError
from .model import Model
from .tensor import Graph, Tensor, add, mul
from .dataio import Utterance


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ctc_aux_weight: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.ctc_aux_weight < 0:
            raise ConfigError(f"ctc_aux_weight must be >= 0, got {self.ctc_aux_weight}")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")


class Adam:
    """Adam with linear warmup then inverse-square-root decay."""

    def __init__(self, params: ParamSet, config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def lr_at(self, step: int) -> float:
        c = self.config
        return c.peak_lr * min(step / c.warmup_steps, (c.warmup_steps / step) ** 0.5)

    def step(self) -> float:
        c = self.config
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2 = c.adam_beta1, c.adam_beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)).astype(p.data.dtype)
        return lr


def ce_loss(decoder: Decoder, enc_out: EncoderOutput, alignment: ChunkwiseAlignment, train_mode=False, rng=None) -> Tensor:
    """Per-symbol mean negative log likelihood of the alignment."""
    total = sequence_log_prob(decoder, enc_out, alignment, train_mode=train_mode, rng=rng)
    return mul(total, -1.0 / len(alignment.symbols))


def global_alignment(utt_labels, eoc_id: int, utt_id: str = "") -> ChunkwiseAlignment:
    """Global-mode target: the labels closed by one end-of-sequence symbol."""
    return ChunkwiseAlignment(utt_id=utt_id, symbols=list(utt_labels) + [eoc_id], eoc_id=eoc_id)


def _utterance_loss(model: Model, utt: Utterance, labels, alignment, stage: str, cfg: TrainConfig, rng) -> Tensor:
    if stage == "global":
        enc_out = model.encoder.encode_global(utt.features)
        target = global_alignment(labels, model.config.decoder.eoc_id, utt.utt_id)
        loss = ce_loss(model.decoder, enc_out, target, train_mode=True, rng=rng)
        if cfg.ctc_aux_weight > 0:
            aux = ctc_loss(model.ctc_log_probs(enc_out), labels, model.ctc_blank)
            loss = add(loss, mul(aux, cfg.ctc_aux_weight / max(len(labels), 1)))
        return loss
    enc_out = model.encoder.encode_chunked(utt.features)
    return ce_loss(model.decoder, enc_out, alignment, train_mode=True, rng=rng)


def train_stage(
    model: Model,
    utterances: list[Utterance],
    vocab,
    config: TrainConfig,
    stage: str,
    alignments: dict | None = None,
    prev_rows: list | None = None,
) -> list[tuple]:
    """Run one training stage in place; returns loss-log rows.

    ``stage`` is "global" or "chunked"; the chunked stage needs a mapping
    from utterance id to its chunkwise alignment.  ``prev_rows`` continues
    an earlier loss log (resumption).
    """
    if stage not in ("global", "chunked"):
        raise ConfigError(f"unknown training stage {stage!r}")
    if stage == "chunked" and not alignments:
        raise ConfigError("chunked training requires chunkwise alignments")
    if not utterances:
        raise DataError("training needs at least one utterance")

    label_ids = {u.utt_id: vocab.encode(u.transcript) for u in utterances}
    optim = Adam(model.params, config)
    rows = list(prev_rows) if prev_rows else []
    step = rows[-1][1] if rows else 0
    start_epoch = rows[-1][0] if rows else 0

    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        order_rng = np.random.default_rng([config.seed, 11, epoch])
        order = order_rng.permutation(len(utterances))
        for lo in range(0, len(order), config.batch_size):
            batch = [utterances[i] for i in order[lo : lo + config.batch_size]]
            step += 1
            zo_rng = np.random.default_rng([config.seed, 13, epoch, step])
            model.params.zero_grad()
            batch_loss = 0.0
            for utt in batch:
                align = alignments.get(utt.utt_id) if alignments else None
                if stage == "chunked" and align is None:
                    raise DataError(f"no chunkwise alignment for utterance {utt.utt_id}")
                with Graph(model.params) as g:
                    loss = _utterance_loss(
                        model, utt, label_ids[utt.utt_id], align, stage, config, zo_rng
                    )
                    loss.grad = np.full_like(loss.data, 1.0 / len(batch))
                    g.backward(loss)
                batch_loss += loss.item() / len(batch)
            if not np.isfinite(batch_loss):
                raise NumericalError(
                    f"training diverged: loss {batch_loss} at epoch {epoch} step {step}"
                )
            lr = optim.step()
            rows.append((epoch, step, batch_loss, lr))
    return rows


def extract_chunkwise_alignments(model: Model, utterances, vocab, chunk_spec) -> list[ChunkwiseAlignment]:
    """CTC forced alignments from the global model, regrouped per chunk.

    The chunk stride must be a whole number of encoder output frames.
    """
    factor = model.config.encoder.downsample_factor
    if chunk_spec.stride % factor != 0:
        raise ConfigError(
            f"chunk stride {chunk_spec.stride} is not a multiple of the downsampling factor {factor}"
        )
    stride_ds = chunk_spec.stride // factor
    out = []
    for utt in utterances:
        labels = vocab.encode(utt.transcript)
        enc_out = model.encoder.encode_global(utt.features)
        log_probs = model.ctc_log_probs(enc_out)
        framewise = ctc_forced_align(
            log_probs, labels, model.ctc_blank, utt_id=utt.utt_id, disallow_label_loop=True
        )
        k = chunk_count(utt.features.shape[0], chunk_spec)
        out.append(framewise_to_chunkwise(framewise, stride_ds, k, model.config.decoder.eoc_id))
    return out


def greedy_accuracy(model: Model, utterances, vocab, chunked: bool, max_symbols: int = 400) -> float:
    """1 - corpus WER of greedy decoding; the pipeline's progress metric."""
    from .metrics import corpus_wer
    from .search import greedy_decode

    pairs = []
    for utt in utterances:
        enc_out = (
            model.encoder.encode_chunked(utt.features)
            if chunked
            else model.encoder.encode_global(utt.features)
        )
        hyp, _ = greedy_decode(model.decoder, enc_out, max_symbols=max_symbols)
        hyp_tokens = vocab.decode(hyp.label_ids(model.config.decoder.eoc_id))
        pairs.append((utt.transcript, hyp_tokens))
    rate, _ = corpus_wer(pairs)
    return 1.0 - rate
