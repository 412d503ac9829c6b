import itertools

import numpy as np
import pytest

from chunkstream.chunking import BLANK
from chunkstream.ctc import ctc_forced_align, ctc_loss, ctc_path_score, forced_path_states
from chunkstream.errors import DataError, NumericalError
from chunkstream.tensor import Graph, Tensor
from oracles import ctc_best_path_brute, ctc_loss_brute


def rand_log_probs(seed, t, c, dtype=np.float64):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t, c))
    x = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    return x.astype(dtype)


def test_single_frame_single_label_uniform():
    v = 3  # labels 0..2, blank 3
    lp = np.full((1, v + 1), -np.log(v + 1))
    loss = ctc_loss(lp, [0], blank=v)
    np.testing.assert_allclose(loss.item(), np.log(v + 1), rtol=1e-12)


def test_two_frames_single_label_three_paths():
    lp = rand_log_probs(0, 2, 3)
    blank = 2
    paths = [(0, blank), (blank, 0), (0, 0)]
    total = np.logaddexp.reduce([lp[0, a] + lp[1, b] for a, b in paths])
    loss = ctc_loss(lp, [0], blank=blank)
    np.testing.assert_allclose(loss.item(), -total, rtol=1e-12)


def test_loss_matches_exhaustive_enumeration():
    blank_of = {3: 2, 4: 3}
    for c in (3, 4):
        blank = blank_of[c]
        for t in (1, 2, 3, 4, 5):
            for n in (0, 1, 2):
                labels = [i % (c - 1) for i in range(n)]
                lp = rand_log_probs(hash((c, t, n)) % 2**32, t, c)
                brute = ctc_loss_brute(lp, labels, blank)
                if not np.isfinite(brute):
                    with pytest.raises(NumericalError):
                        ctc_loss(lp, labels, blank)
                    continue
                loss = ctc_loss(Tensor(lp, dtype=np.float64), labels, blank)
                assert abs(loss.item() - brute) < 1e-9, (c, t, n)


def test_repeated_labels_need_separating_blank():
    # [A, A] needs at least 3 frames (A, blank, A)
    lp = rand_log_probs(1, 2, 3)
    with pytest.raises(NumericalError):
        ctc_loss(lp, [0, 0], blank=2)
    lp3 = rand_log_probs(2, 3, 3)
    brute = ctc_loss_brute(lp3, [0, 0], 2)
    np.testing.assert_allclose(ctc_loss(lp3, [0, 0], 2).item(), brute, rtol=1e-12)


def test_loss_rejects_bad_inputs():
    lp = rand_log_probs(3, 4, 3)
    with pytest.raises(NumericalError):
        ctc_loss(lp, [0, 1, 0, 1, 0], blank=2)  # more labels than frames
    with pytest.raises(DataError):
        ctc_loss(lp, [2], blank=2)  # blank as a label
    with pytest.raises(DataError):
        ctc_loss(lp, [5], blank=2)  # out of range


def test_loss_gradient_matches_finite_differences():
    lp = Tensor(rand_log_probs(4, 5, 4), dtype=np.float64)
    lp.requires_grad = True
    with Graph() as g:
        loss = ctc_loss(lp, [0, 2], blank=3)
        g.backward(loss)
    eps = 1e-6
    flat = lp.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = ctc_loss(lp, [0, 2], blank=3).item()
        flat[i] = orig - eps
        lo = ctc_loss(lp, [0, 2], blank=3).item()
        flat[i] = orig
        numeric = (hi - lo) / (2 * eps)
        analytic = lp.grad.reshape(-1)[i]
        assert abs(analytic - numeric) < 1e-6 * max(1.0, abs(numeric)), i


# ---------------------------------------------------------------------------
# forced alignment


def test_forced_align_exact_length_has_no_blanks():
    lp = rand_log_probs(5, 3, 4)
    a = ctc_forced_align(lp, [0, 1, 2], blank=3)
    np.testing.assert_array_equal(a.labels, [0, 1, 2])


def test_forced_align_peaked_middle_frame():
    lp = np.log(
        np.array(
            [
                [0.1, 0.9],
                [0.9, 0.1],
                [0.1, 0.9],
            ]
        )
    )  # class 0 = label A, class 1 = blank
    a = ctc_forced_align(lp, [0], blank=1)
    np.testing.assert_array_equal(a.labels, [BLANK, 0, BLANK])


def test_forced_align_label_count_is_exact():
    for seed in range(10):
        lp = rand_log_probs(seed, 7, 4)
        labels = [0, 2, 1]
        for loop in (True, False):
            a = ctc_forced_align(lp, labels, blank=3, disallow_label_loop=not loop)
            assert a.label_sequence == labels, (seed, loop)


def test_forced_align_matches_bruteforce_disallowed_loop():
    for seed in range(8):
        for t, labels in ((3, [0]), (4, [0, 1]), (5, [1, 0]), (4, [0, 0]), (2, [1])):
            lp = rand_log_probs(seed * 100 + t, t, 3)
            best, frames = ctc_best_path_brute(lp, labels, 2, disallow_label_loop=True)
            a = ctc_forced_align(lp, labels, blank=2, disallow_label_loop=True)
            np.testing.assert_array_equal(a.labels, frames, err_msg=f"seed={seed} t={t}")
            score = ctc_path_score(lp, a.labels, blank=2)
            assert abs(score - best) < 1e-9


def test_forced_align_matches_bruteforce_with_loop():
    def dedup(frames):
        # keep the first frame of each label run, as the production code does
        out = list(frames)
        for t in range(len(out) - 1, 0, -1):
            if out[t] != BLANK and out[t] == out[t - 1]:
                out[t] = BLANK
        return out

    for seed in range(8):
        for t, labels in ((3, [0]), (4, [0, 1]), (5, [1, 0])):
            lp = rand_log_probs(seed * 37 + t, t, 3)
            best = -np.inf
            best_frames = None
            for path in itertools.product(range(3), repeat=t):
                coll = []
                prev = None
                for s in path:
                    if s != prev and s != 2:
                        coll.append(s)
                    prev = s
                if coll != labels:
                    continue
                score = sum(lp[i, s] for i, s in enumerate(path))
                if score > best:
                    best = score
                    best_frames = [BLANK if s == 2 else s for s in path]
            a = ctc_forced_align(lp, labels, blank=2, disallow_label_loop=False)
            np.testing.assert_array_equal(a.labels, dedup(best_frames))


def test_forced_align_infeasible_raises():
    lp = rand_log_probs(6, 1, 3)
    with pytest.raises(NumericalError):
        ctc_forced_align(lp, [0, 1], blank=2)


def test_forced_path_states_substitutes_blank():
    from chunkstream.chunking import FramewiseAlignment

    a = FramewiseAlignment("u", [0, BLANK, 1])
    np.testing.assert_array_equal(forced_path_states(a, blank=7), [0, 7, 1])
