"""Connectionist temporal classification: loss, gradients, forced alignment.

The label lattice is the standard one: blanks interleaved around the label
sequence, with a skip transition between distinct neighbouring labels.  The
loss runs the forward recursion in log space (float64 internally) and its
gradient comes from the forward-backward posteriors, exposed as a taped
operation over the input log-probabilities.

Forced alignment is Viterbi over the same lattice.  With the label loop
disallowed, a label-state may not transition to itself, so every label
occupies exactly one frame and the rest are blank.
"""

from __future__ import annotations

import numpy as np

from .chunking import BLANK, FramewiseAlignment
from .errors import DataError, NumericalError
from .tensor import Tensor, _record

NEG_INF = -np.inf


def _extended(labels, blank: int) -> np.ndarray:
    z = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    z[1::2] = labels
    return z


def _check_labels(labels, num_classes: int, blank: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DataError(f"labels must be a 1-d sequence, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label ids must lie in 0..{num_classes - 1}")
    if (labels == blank).any():
        raise DataError(f"blank id {blank} may not appear among the labels")
    return labels


def ctc_loss(log_probs, labels, blank: int) -> Tensor:
    """Negative log probability of ``labels`` summed over all frame paths.

    ``log_probs`` is a (T, C) tensor of per-frame log distributions with
    ``blank`` as one of the classes.  Differentiable w.r.t. ``log_probs``.
    """
    lp_t = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    lp = lp_t.data.astype(np.float64)
    if lp.ndim != 2:
        raise DataError(f"log_probs must be (T, C), got shape {lp.shape}")
    t_len, n_classes = lp.shape
    if not 0 <= blank < n_classes:
        raise DataError(f"blank id {blank} outside 0..{n_classes - 1}")
    labels = _check_labels(labels, n_classes, blank)
    n = len(labels)
    if t_len < n:
        raise NumericalError(f"{n} labels cannot fit in {t_len} frames")
    z = _extended(labels, blank)
    s_len = len(z)
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = z[2:] != z[:-2]
    can_skip[::2] = False  # skips land only on label states

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, z[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(can_skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, z]

    log_p = alpha[-1, -1]
    if s_len > 1:
        log_p = np.logaddexp(log_p, alpha[-1, -2])
    if not np.isfinite(log_p):
        raise NumericalError(f"no feasible frame path for {n} labels over {t_len} frames")

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = lp[-1, z[-1]]
    if s_len > 1:
        beta[-1, -2] = lp[-1, z[-2]]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(can_skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, z]

    # Posterior over lattice states; one emission log-prob is double-counted.
    post = alpha + beta - lp[:, z] - log_p
    occ = np.exp(post)
    grad = np.zeros_like(lp)
    for s, c in enumerate(z):
        grad[:, c] -= occ[:, s]

    out = Tensor(np.asarray(-log_p, dtype=lp_t.dtype), requires_grad=lp_t.requires_grad)

    def bwd():
        if out.grad is None or not lp_t.requires_grad:
            return
        lp_t.accumulate_grad((grad * out.grad).astype(lp_t.dtype))

    _record(out, bwd)
    return out


def ctc_path_score(log_probs: np.ndarray, frame_labels: np.ndarray, blank: int) -> float:
    """Log probability of one explicit framewise path."""
    lp = np.asarray(log_probs, dtype=np.float64)
    path = np.asarray(frame_labels)
    cls = np.where(path == BLANK, blank, path)
    return float(lp[np.arange(len(cls)), cls].sum())


def ctc_forced_align(
    log_probs,
    labels,
    blank: int,
    utt_id: str = "",
    disallow_label_loop: bool = True,
) -> FramewiseAlignment:
    """Best frame path for ``labels``, one class per frame.

    With ``disallow_label_loop`` every label occupies exactly one frame;
    otherwise labels may stretch over repeated frames as in standard CTC.
    """
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise DataError(f"log_probs must be (T, C), got shape {lp.shape}")
    t_len, n_classes = lp.shape
    labels = _check_labels(labels, n_classes, blank)
    n = len(labels)
    if t_len < n:
        raise NumericalError(f"{n} labels cannot fit in {t_len} frames")
    z = _extended(labels, blank)
    s_len = len(z)
    can_skip = np.zeros(s_len, dtype=bool)
    can_skip[2:] = z[2:] != z[:-2]
    can_skip[::2] = False
    can_loop = np.ones(s_len, dtype=bool)
    if disallow_label_loop:
        can_loop[1::2] = False

    delta = np.full((t_len, s_len), NEG_INF)
    back = np.zeros((t_len, s_len), dtype=np.int64)
    delta[0, 0] = lp[0, z[0]]
    if s_len > 1:
        delta[0, 1] = lp[0, z[1]]
    for t in range(1, t_len):
        prev = delta[t - 1]
        stay = np.where(can_loop, prev, NEG_INF)
        step = np.full(s_len, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(s_len, NEG_INF)
        skip[2:] = np.where(can_skip[2:], prev[:-2], NEG_INF)
        choices = np.stack([stay, step, skip])
        best = choices.argmax(axis=0)
        delta[t] = choices[best, np.arange(s_len)] + lp[t, z]
        back[t] = np.arange(s_len) - best

    ends = [s_len - 1] + ([s_len - 2] if s_len > 1 else [])
    end = max(ends, key=lambda s: delta[-1, s])
    if not np.isfinite(delta[-1, end]):
        raise NumericalError(
            f"no feasible forced alignment for {n} labels over {t_len} frames"
            + (" with the label loop disallowed" if disallow_label_loop else "")
        )
    states = np.zeros(t_len, dtype=np.int64)
    states[-1] = end
    for t in range(t_len - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    frame_labels = np.where(states % 2 == 1, z[states], BLANK)
    # A label state entered and left counts once; with loops allowed, keep
    # only the first frame of each run so the label sequence length is |labels|.
    if not disallow_label_loop:
        dedup = frame_labels.copy()
        for t in range(t_len - 1, 0, -1):
            if states[t] == states[t - 1]:
                dedup[t] = BLANK
        frame_labels = dedup
    return FramewiseAlignment(utt_id=utt_id, labels=frame_labels)


def forced_path_states(alignment: FramewiseAlignment, blank: int) -> np.ndarray:
    """Framewise class ids (blank substituted) for scoring an alignment."""
    return np.where(alignment.labels == BLANK, blank, alignment.labels)
