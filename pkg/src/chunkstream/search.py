"""Alignment-synchronous decoding over the end-of-chunk lattice.

Every hypothesis in a frontier has emitted the same number of symbols,
end-of-chunk included, so scores stay comparable without length tricks.  A
hypothesis completes when it emits end-of-chunk in the final chunk; it then
leaves the frontier for a done-list but still competes in the final ranking.
Length normalization, when enabled, divides by (label count + 1) at ranking
time only.

Shallow fusion with an external LM follows a three-case rule: regular labels
mix AED, LM, and internal-LM scores (with EOS mass renormalized away while
chunks remain); a non-final end-of-chunk is scored by the AED alone and
unscaled; the final end-of-chunk is fused against the LM's EOS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decoder import BOS, Decoder, DecoderState, advance_pointer, chunk_keys_for
from .encoder import EncoderOutput
from .errors import ConfigError, DataError, SearchError
from .tensor import log_softmax

PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class FusionConfig:
    beta: float  # external LM scale
    lam: float  # internal LM subtraction scale

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"LM scale beta must lie in [0, 1], got {self.beta}")
        if self.lam < 0.0:
            raise ConfigError(f"ILM scale lambda must be >= 0, got {self.lam}")

    @property
    def alpha(self) -> float:
        return 1.0 - self.beta


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 12
    length_norm: bool = False
    max_symbols: int = 200
    fusion: Optional[FusionConfig] = None

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_symbols < 1:
            raise ConfigError(f"max_symbols must be >= 1, got {self.max_symbols}")


@dataclass
class Hypothesis:
    symbols: list[int] = field(default_factory=list)
    emit_chunks: list[int] = field(default_factory=list)  # 1-based, per symbol
    score: float = 0.0

    def label_ids(self, eoc_id: int) -> list[int]:
        return [s for s in self.symbols if s != eoc_id]

    def label_emit_chunks(self, eoc_id: int) -> list[int]:
        return [c for s, c in zip(self.symbols, self.emit_chunks) if s != eoc_id]

    def ranking_score(self, eoc_id: int, length_norm: bool) -> float:
        if not length_norm:
            return self.score
        return self.score / (len(self.label_ids(eoc_id)) + 1)


def _floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, PROB_FLOOR))


def fused_score(p_aed, p_lm, p_ilm, symbol: int, k: int, num_chunks: int, fusion: FusionConfig) -> float:
    """Log-score contribution of one symbol under shallow fusion.

    ``k`` is the 1-based current chunk; distributions are over the decoder
    vocabulary with end-of-chunk/EOS last.  Scalar twin of the vectorised
    scoring used inside the beam, kept for direct formula-level checks.
    """
    p_aed = np.asarray(p_aed, dtype=np.float64)
    eoc = len(p_aed) - 1
    log_lm = None if p_lm is None else _floored_log(np.asarray(p_lm, dtype=np.float64))
    log_ilm = None if p_ilm is None else _floored_log(np.asarray(p_ilm, dtype=np.float64))
    contrib = _fused_row(_floored_log(p_aed), log_lm, log_ilm, k - 1, num_chunks, fusion)
    if not 0 <= symbol <= eoc:
        raise DataError(f"symbol {symbol} outside vocabulary")
    return float(contrib[symbol])


def _renorm_no_eos(log_dist: np.ndarray) -> np.ndarray:
    """Drop EOS mass and renormalize, in log space."""
    eos = len(log_dist) - 1
    rest = np.logaddexp.reduce(log_dist[:eos])
    out = log_dist - max(rest, np.log(PROB_FLOOR))
    out[eos] = np.log(PROB_FLOOR)
    return out


def _fused_row(
    log_aed: np.ndarray,
    log_lm: Optional[np.ndarray],
    log_ilm: Optional[np.ndarray],
    k0: int,
    num_chunks: int,
    fusion: Optional[FusionConfig],
) -> np.ndarray:
    """Per-symbol score contributions for one hypothesis; k0 is 0-based."""
    eoc = len(log_aed) - 1
    floor = np.log(PROB_FLOOR)
    log_aed = np.maximum(log_aed.astype(np.float64), floor)
    if fusion is None:
        return log_aed
    if log_lm is None:
        raise ConfigError("fusion requires an external LM")
    if fusion.lam > 0 and log_ilm is None:
        raise ConfigError("ILM subtraction requires an internal LM estimate")
    if log_ilm is None:
        log_ilm = np.zeros_like(log_lm)
    log_lm = np.maximum(log_lm, floor)
    log_ilm = np.maximum(log_ilm, floor)
    last = k0 == num_chunks - 1
    lm_eff = log_lm if last else _renorm_no_eos(log_lm)
    ilm_eff = log_ilm if last else _renorm_no_eos(log_ilm)
    out = fusion.alpha * log_aed + fusion.beta * lm_eff - fusion.lam * ilm_eff
    if last:
        out[eoc] = (
            fusion.alpha * log_aed[eoc] + fusion.beta * log_lm[eoc] - fusion.lam * log_ilm[eoc]
        )
    else:
        out[eoc] = log_aed[eoc]  # non-final end-of-chunk: AED only, unscaled
    return out


def _step_log_dists(decoder: Decoder, state: DecoderState, prev_labels, enc_out: EncoderOutput):
    keys, valid = chunk_keys_for(enc_out, state.chunk)
    logits, new_state = decoder.step(state, prev_labels, keys, valid)
    return log_softmax(logits).data, new_state


def greedy_decode(decoder: Decoder, enc_out: EncoderOutput, max_symbols: int = 200):
    """Argmax decoding; returns (hypothesis, truncated flag)."""
    eoc = decoder.config.eoc_id
    state = decoder.initial_state(batch=1)
    prev = BOS
    hyp = Hypothesis()
    for _ in range(max_symbols):
        log_dist, state = _step_log_dists(decoder, state, np.array([prev]), enc_out)
        sym = int(log_dist[0].argmax())
        hyp.symbols.append(sym)
        hyp.emit_chunks.append(int(state.chunk[0]) + 1)
        hyp.score += float(log_dist[0, sym])
        state = advance_pointer(state, np.array([sym]), eoc, enc_out.num_chunks)
        prev = sym
        if state.done[0]:
            return hyp, False
    return hyp, True


def beam_search(
    decoder: Decoder,
    enc_out: EncoderOutput,
    config: BeamConfig,
    lm=None,
    ilm=None,
) -> list[Hypothesis]:
    """Ranked complete hypotheses, best first.

    Raises a search error carrying the best partial hypothesis when nothing
    completes within the symbol budget.
    """
    k_total = enc_out.num_chunks
    if config.max_symbols < k_total:
        raise ConfigError(
            f"max_symbols={config.max_symbols} cannot cover {k_total} chunks"
        )
    if config.fusion is not None and lm is None:
        raise ConfigError("fusion requires an external LM")
    eoc = decoder.config.eoc_id
    n_vocab = decoder.config.vocab_size

    state = decoder.initial_state(batch=1)
    frontier = [Hypothesis()]
    done: list[Hypothesis] = []
    # Without fusion (or with lambda=0) every symbol contributes <= 0, so once
    # no live score can reach the best completed score the search is settled.
    can_stop_early = not config.length_norm and (
        config.fusion is None or config.fusion.lam == 0
    )

    for _ in range(config.max_symbols):
        if not frontier:
            break
        prev = np.array([h.symbols[-1] if h.symbols else BOS for h in frontier])
        log_aed, state_new = _step_log_dists(decoder, state, prev, enc_out)
        if config.fusion is None:
            base = np.array([h.score for h in frontier], dtype=np.float64)
            scores = base[:, None] + np.maximum(
                log_aed.astype(np.float64), np.log(PROB_FLOOR)
            )
        else:
            scores = np.empty((len(frontier), n_vocab))
            for row, h in enumerate(frontier):
                hist = h.label_ids(eoc)
                log_lm = lm.log_dist(hist)
                log_ilm = ilm.log_dist(hist) if ilm is not None else None
                scores[row] = h.score + _fused_row(
                    log_aed[row].astype(np.float64),
                    log_lm,
                    log_ilm,
                    int(state.chunk[row]),
                    k_total,
                    config.fusion,
                )

        flat = scores.ravel()
        order = np.argsort(-flat, kind="stable")
        new_frontier: list[Hypothesis] = []
        rows: list[int] = []
        labels: list[int] = []
        for idx in order:
            row, sym = divmod(int(idx), n_vocab)
            completes = sym == eoc and int(state.chunk[row]) == k_total - 1
            if not completes and len(new_frontier) >= config.beam_size:
                continue
            parent = frontier[row]
            child = Hypothesis(
                symbols=parent.symbols + [sym],
                emit_chunks=parent.emit_chunks + [int(state.chunk[row]) + 1],
                score=float(flat[idx]),
            )
            if completes:
                done.append(child)
            else:
                new_frontier.append(child)
                rows.append(row)
                labels.append(sym)
        if not new_frontier:
            frontier = []
            break
        if can_stop_early and done:
            best_done = max(h.score for h in done)
            if max(h.score for h in new_frontier) <= best_done:
                frontier = new_frontier
                break
        picked = state_new.select(rows)
        state = advance_pointer(picked, np.array(labels), eoc, k_total)
        frontier = new_frontier

    if not done:
        best_partial = max(frontier, default=None, key=lambda h: h.score)
        raise SearchError(
            f"no complete hypothesis within {config.max_symbols} symbols",
            best_partial=best_partial,
        )
    return sorted(done, key=lambda h: -h.ranking_score(eoc, config.length_norm))


def tune_scales(dev_set, decoder: Decoder, lm, ilm, grid, beam_config: BeamConfig):
    """Pick (beta, lambda) minimising dev WER; ties favour smaller beta, then lambda.

    ``dev_set`` is a list of (EncoderOutput, reference label-id list).
    """
    from .metrics import wer_counts

    if not dev_set:
        raise DataError("cannot tune fusion scales on an empty dev set")
    grid = list(grid)
    if not grid:
        raise ConfigError("empty (beta, lambda) grid")
    eoc = decoder.config.eoc_id
    best = None
    for beta, lam in sorted(grid):
        cfg = BeamConfig(
            beam_size=beam_config.beam_size,
            length_norm=beam_config.length_norm,
            max_symbols=beam_config.max_symbols,
            fusion=FusionConfig(beta=beta, lam=lam),
        )
        errs = 0
        ref_words = 0
        for enc_out, ref in dev_set:
            hyps = beam_search(decoder, enc_out, cfg, lm=lm, ilm=ilm)
            counts = wer_counts(ref, hyps[0].label_ids(eoc))
            errs += counts.substitutions + counts.deletions + counts.insertions
            ref_words += len(ref)
        wer = errs / max(ref_words, 1)
        if best is None or wer < best[0]:
            best = (wer, beta, lam)
    return best[1], best[2]
