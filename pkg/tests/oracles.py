"""Independent reference implementations the tests compare against.

Everything here favours obviousness over speed: finite differences, explicit
visibility masks, exhaustive path enumeration, recursive edit distance.  If a
production module and its oracle here agree, the agreement is meaningful
because the two routes share as little code as the contract allows.
"""

import functools

import numpy as np

from chunkstream.chunking import chunk_count
from chunkstream.decoder import BOS, advance_pointer
from chunkstream.tensor import Graph, Tensor, log_softmax


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(fn, tensors, eps=1e-5, rtol=1e-4, atol=1e-8):
    """Compare taped gradients of scalar ``fn(*tensors)`` to central differences.

    All tensors must be float64 leaves.  Returns the worst relative error.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradcheck requires float64 inputs"
        t.requires_grad = True
        t.zero_grad()
    with Graph() as graph:
        out = fn(*tensors)
        assert out.size == 1, f"gradcheck target must be scalar, got {out.shape}"
        graph.backward(out)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*tensors).item()
            flat[i] = orig - eps
            lo = fn(*tensors).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(numeric), abs(a), atol / rtol)
            worst = max(worst, err)
            assert err < rtol or abs(a - numeric) < atol, (
                f"grad mismatch at element {i}: analytic {a}, numeric {numeric}"
            )
    return worst


# ---------------------------------------------------------------------------
# dense-masked reference for the chunked encoder


def dense_chunked_reference(encoder, features):
    """Chunked encoding via one dense pass under an explicit visibility mask.

    Lays out every chunk window (center + lookahead, zero padded) as its own
    segment, assigns absolute downsampled positions, and marks exactly the
    keys the streaming rules allow: the window's own valid frames plus the
    valid center frames of the previous carry-over windows.  Returns a list
    of (valid_k, D) arrays, one per chunk.
    """
    cfg = encoder.config
    spec = cfg.chunk
    feats = np.asarray(features)
    t = feats.shape[0]
    k_total = chunk_count(t, spec)
    f = cfg.downsample_factor
    w_ds = -(-spec.window // f)
    t_w_ds = cfg.center_frames_ds

    segments, positions, valid = [], [], []
    for k in range(k_total):
        n = min(spec.window, t - k * spec.stride)
        seg = np.zeros((spec.window, feats.shape[1]), dtype=feats.dtype)
        seg[:n] = feats[k * spec.stride : k * spec.stride + n]
        segments.append(seg)
        positions.append(k * t_w_ds + np.arange(w_ds))
        valid.append(-(-n // f))

    s = k_total * w_ds
    vis = np.zeros((s, s), dtype=bool)
    for k in range(k_total):
        rows = slice(k * w_ds, (k + 1) * w_ds)
        vis[rows, k * w_ds : k * w_ds + valid[k]] = True
        for j in range(max(0, k - cfg.carry_over_chunks), k):
            vis[rows, j * w_ds : j * w_ds + min(valid[j], t_w_ds)] = True

    h = encoder.encode_dense(segments, np.concatenate(positions), vis)
    out = []
    for k in range(k_total):
        v = min(valid[k], t_w_ds)
        out.append(h.data[k * w_ds : k * w_ds + v].copy())
    return out


# ---------------------------------------------------------------------------
# CTC by exhaustive path enumeration


def _collapse(path, blank):
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def _all_paths(t, num_classes):
    if t == 0:
        yield ()
        return
    for rest in _all_paths(t - 1, num_classes):
        for s in range(num_classes):
            yield rest + (s,)


def ctc_loss_brute(log_probs, labels, blank):
    """-log sum over every frame path collapsing to ``labels``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    labels = list(labels)
    total = -np.inf
    for path in _all_paths(t, c):
        if _collapse(path, blank) == labels:
            total = np.logaddexp(total, sum(lp[i, s] for i, s in enumerate(path)))
    return -total


def ctc_best_path_brute(log_probs, labels, blank, disallow_label_loop=False):
    """(best path log prob, frame labels with -1 at blanks) by enumeration."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t, c = lp.shape
    labels = list(labels)
    best, best_path = -np.inf, None
    for path in _all_paths(t, c):
        if disallow_label_loop:
            if any(a == b != blank for a, b in zip(path, path[1:])):
                continue
            if [s for s in path if s != blank] != labels:
                continue
        elif _collapse(path, blank) != labels:
            continue
        score = sum(lp[i, s] for i, s in enumerate(path))
        if score > best:
            best, best_path = score, path
    frames = None
    if best_path is not None:
        frames = np.array([-1 if s == blank else s for s in best_path], dtype=np.int64)
    return best, frames


# ---------------------------------------------------------------------------
# exhaustive decoding


def enumerate_complete(decoder, enc_out, max_symbols, score_fn=None):
    """Every complete symbol sequence with at most ``max_symbols`` steps.

    Returns [(symbols, score)].  ``score_fn(log_dist, hist_labels, k0)``
    may replace the plain decoder log probability per step, for fusion.
    """
    from chunkstream.decoder import chunk_keys_for

    eoc = decoder.config.eoc_id
    k_total = enc_out.num_chunks
    results = []

    def step(state, prev):
        keys, valid_mask = chunk_keys_for(enc_out, state.chunk)
        logits, new_state = decoder.step(state, np.array([prev]), keys, valid_mask)
        return log_softmax(logits).data[0], new_state

    def rec(state, prev, symbols, score):
        if len(symbols) >= max_symbols:
            return
        log_dist, new_state = step(state, prev)
        if score_fn is not None:
            contrib = score_fn(log_dist, [s for s in symbols if s != eoc], int(state.chunk[0]))
        else:
            contrib = log_dist
        for sym in range(decoder.config.vocab_size):
            s2 = score + float(contrib[sym])
            adv = advance_pointer(new_state.select([0]), np.array([sym]), eoc, k_total)
            if adv.done[0]:
                results.append((symbols + [sym], s2))
            else:
                rec(adv, sym, symbols + [sym], s2)

    rec(decoder.initial_state(1), BOS, [], 0.0)
    return results


# ---------------------------------------------------------------------------
# misc brute-force twins


def edit_distance_brute(ref, hyp):
    ref, hyp = tuple(ref), tuple(hyp)

    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1])
        return min(sub, d(i - 1, j) + 1, d(i, j - 1) + 1)

    return d(len(ref), len(hyp))


def count_paths_brute(num_labels, num_chunks):
    """Ways to split ``num_labels`` ordered labels over ``num_chunks`` chunks."""
    if num_chunks == 0:
        return 1 if num_labels == 0 else 0
    return sum(
        count_paths_brute(num_labels - i, num_chunks - 1) for i in range(num_labels + 1)
    )
