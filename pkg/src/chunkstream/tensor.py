"""Dense tensors with taped reverse-mode gradients.

A ``Tensor`` wraps a contiguous numpy array (float32 by default) plus an
optional gradient buffer.  Operations executed while a ``Graph`` is active
append backward closures to the graph's tape; ``Graph.backward`` replays the
tape in reverse execution order exactly once.  Outside a graph the same
operations run as plain numpy compute, which is what inference uses.

Gradient verification runs the identical code in float64 so that central
finite differences are meaningful at tight tolerances; production graphs
stay float32.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, MaskError, ProtocolError, ShapeError

DEFAULT_DTYPE = np.float32

# Additive representation of "masked out" for attention logits.
MASK_NEG = -1e30


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

    # Arithmetic sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Tape of recorded operations plus the parameter registry they touch.

    Single-threaded by design: one graph records one forward pass.  Multiple
    graphs may run concurrently on disjoint or read-only parameters.
    """

    def __init__(self, params=None):
        self.nodes = []
        self.params = params
        self._finished = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)=1 and replay the tape once, in reverse order."""
        if self._finished:
            raise ProtocolError("backward() already ran on this graph")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for fn in reversed(self.nodes):
            fn()
        self._finished = True


_GRAPH_STACK: list[Graph] = []


def _tape() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _record(out: Tensor, fn) -> None:
    tape = _tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(fn)


def _as_tensor(x, ref: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.dtype if ref is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    _record(out, bwd)
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    _record(out, bwd)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd():
        if out.grad is None:
            return
        if a.requires_grad:
            ga = out.grad @ b.data.swapaxes(-1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ out.grad
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    _record(out, bwd)
    return out


def linear(x, w, b=None) -> Tensor:
    """y = x @ w + b over the last axis of ``x``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"linear: input shape {tuple(x.shape)} does not match weight shape {tuple(w.shape)}"
        )
    if b is None:
        return matmul(x, w)
    b = _as_tensor(b, x)
    if b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: bias shape {tuple(b.shape)} does not match weight shape {tuple(w.shape)}"
        )
    return add(matmul(x, w), b)


def _unary(x, fval, dval) -> Tensor:
    x = _as_tensor(x)
    y = fval(x.data)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(out.grad * dval(x.data, y))

    _record(out, bwd)
    return out


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda xd, y: 1.0 - y * y)


def sigmoid(x) -> Tensor:
    def f(xd):
        # Stable in both tails.
        pos = xd >= 0
        z = np.empty_like(xd)
        z[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        z[~pos] = ex / (1.0 + ex)
        return z

    return _unary(x, f, lambda xd, y: y * (1.0 - y))


def relu(x) -> Tensor:
    return _unary(x, lambda xd: np.maximum(xd, 0.0), lambda xd, y: (xd > 0).astype(xd.dtype))


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda xd, y: y)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda xd, y: 1.0 / xd)


def swish(x) -> Tensor:
    return mul(x, sigmoid(x))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=False))

    _record(out, bwd)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(out.grad.reshape(x.shape))

    _record(out, bwd)
    return out


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.transpose(axes), requires_grad=x.requires_grad)
    inv = np.argsort(axes)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        x.accumulate_grad(out.grad.transpose(inv))

    _record(out, bwd)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        requires_grad=any(p.requires_grad for p in parts),
    )
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        if out.grad is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(out.grad[tuple(idx)])

    _record(out, bwd)
    return out


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy(), requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = np.zeros_like(x.data)
        g[idx] = out.grad
        x.accumulate_grad(g)

    _record(out, bwd)
    return out


def gather_rows(table, indices) -> Tensor:
    """Pick rows of a 2-d table; used for embeddings and bias lookups."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def bwd():
        if out.grad is None or not table.requires_grad:
            return
        g = np.zeros_like(table.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.shape[-1]))
        table.accumulate_grad(g)

    _record(out, bwd)
    return out


def take_per_row(x, col_indices) -> Tensor:
    """out[b] = x[b, col_indices[b]] for a 2-d input."""
    x = _as_tensor(x)
    idx = np.asarray(col_indices, dtype=np.int64)
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, idx], requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, idx), out.grad)
        x.accumulate_grad(g)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# softmax family


def _masked_logits(xd: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return xd
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    if not mask.any(axis=-1).all():
        raise MaskError("softmax: at least one row is fully masked")
    return np.where(mask, xd, np.asarray(MASK_NEG, dtype=xd.dtype))


def softmax(x, mask=None) -> Tensor:
    """Row softmax over the last axis, numerically stabilised.

    ``mask`` is a boolean array (True = keep); masked positions come out as
    exactly zero.  A fully masked row raises, since it would mean attending
    to an empty window.
    """
    x = _as_tensor(x)
    z = _masked_logits(x.data, mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = out.grad
        dx = (g - (g * y).sum(axis=-1, keepdims=True)) * y
        x.accumulate_grad(dx)

    _record(out, bwd)
    return out


def log_softmax(x, mask=None) -> Tensor:
    x = _as_tensor(x)
    z = _masked_logits(x.data, mask)
    m = z.max(axis=-1, keepdims=True)
    s = np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m
    y = z - s
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = out.grad
        dx = g - np.exp(y) * g.sum(axis=-1, keepdims=True)
        x.accumulate_grad(dx)

    _record(out, bwd)
    return out


def maxout(x) -> Tensor:
    """Max over consecutive pairs of the last axis (pool size 2)."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"maxout needs an even last extent, got shape {tuple(x.shape)}")
    pairs = x.data.reshape(x.shape[:-1] + (d // 2, 2))
    arg = pairs.argmax(axis=-1)
    y = np.take_along_axis(pairs, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd():
        if out.grad is None or not x.requires_grad:
            return
        g = np.zeros_like(pairs)
        np.put_along_axis(g, arg[..., None], out.grad[..., None], axis=-1)
        x.accumulate_grad(g.reshape(x.shape))

    _record(out, bwd)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xh = (x.data - mu) * inv
    y = xh * gain.data + bias.data
    out = Tensor(y, requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if gain.requires_grad:
            gain.accumulate_grad((g * xh).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxh = g * gain.data
            m1 = dxh.mean(axis=-1, keepdims=True)
            m2 = (dxh * xh).mean(axis=-1, keepdims=True)
            x.accumulate_grad((dxh - m1 - xh * m2) * inv)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x, w, b, stride: int) -> Tensor:
    """Strided 1-d convolution over time, channels last.

    ``x`` is (T, C_in), ``w`` is (k, C_in, C_out).  Zero padding is chosen so
    the output length is ceil(T / stride); the window for output position i
    is centred at i*stride.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b, x)
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input shape {tuple(x.shape)} vs kernel {tuple(w.shape)}")
    t = x.shape[0]
    t_out = -(-t // stride)
    pad_l = (k - 1) // 2
    pad_r = max(0, (t_out - 1) * stride + k - pad_l - t)
    padded = np.zeros((t + pad_l + pad_r, c_in), dtype=x.dtype)
    padded[pad_l : pad_l + t] = x.data
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)[::stride]
    y = np.einsum("icj,jco->io", win, w.data, optimize=True) + b.data
    out = Tensor(y, requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if w.requires_grad:
            w.accumulate_grad(np.einsum("icj,io->jco", win, g, optimize=True))
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[j : j + (t_out - 1) * stride + 1 : stride] += g @ w.data[j].T
            x.accumulate_grad(dpad[pad_l : pad_l + t])

    _record(out, bwd)
    return out


def depthwise_conv1d(x, w, b) -> Tensor:
    """Per-channel 1-d convolution with same-length output; odd kernel."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b, x)
    k, c = w.shape
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d needs an odd kernel, got {k}")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: input {tuple(x.shape)} vs kernel {tuple(w.shape)}")
    t = x.shape[0]
    pad = (k - 1) // 2
    padded = np.zeros((t + 2 * pad, c), dtype=x.dtype)
    padded[pad : pad + t] = x.data
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)
    y = np.einsum("tcj,jc->tc", win, w.data, optimize=True) + b.data
    out = Tensor(y, requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)

    def bwd():
        if out.grad is None:
            return
        g = out.grad
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if w.requires_grad:
            w.accumulate_grad(np.einsum("tcj,tc->jc", win, g, optimize=True))
        if x.requires_grad:
            dpad = np.zeros_like(padded)
            for j in range(k):
                dpad[j : j + t] += g * w.data[j]
            x.accumulate_grad(dpad[pad : pad + t])

    _record(out, bwd)
    return out


def glu(x) -> Tensor:
    """Gated linear unit: split the last axis in half, a * sigmoid(b)."""
    x = _as_tensor(x)
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"glu needs an even last extent, got shape {tuple(x.shape)}")
    a = slice_axis(x, x.ndim - 1, 0, d // 2)
    g = slice_axis(x, x.ndim - 1, d // 2, d)
    return mul(a, sigmoid(g))


# ---------------------------------------------------------------------------
# attention and recurrence


def scaled_dot_attention(q, k, v, additive_mask=None, num_heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is (Tq, D), ``k`` and ``v`` are (Tk, D); D must be divisible by
    ``num_heads``.  ``additive_mask`` is broadcastable to (num_heads, Tq, Tk)
    and already contains any relative-position bias plus ``MASK_NEG`` at
    blocked positions.  Raises if any query row has every key blocked.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    if d % num_heads != 0:
        raise ShapeError(f"attention: {num_heads} heads do not divide model dim {d}")
    if k.shape != v.shape or k.shape[-1] != d:
        raise ShapeError(
            f"attention: incompatible shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    tq, tk = q.shape[0], k.shape[0]
    dh = d // num_heads

    def split_heads(x):
        return transpose(reshape(x, (x.shape[0], num_heads, dh)), (1, 0, 2))

    qh = split_heads(q)
    kh = split_heads(k)
    vh = split_heads(v)
    logits = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if additive_mask is not None:
        if not isinstance(additive_mask, Tensor):
            additive_mask = Tensor(np.asarray(additive_mask, dtype=q.dtype))
        bias = np.broadcast_to(additive_mask.data, (num_heads, tq, tk))
        if (bias <= MASK_NEG / 2).all(axis=-1).any():
            raise MaskError("attention: a query row has all keys masked")
        logits = add(logits, additive_mask)
    att = softmax(logits)
    ctx = matmul(att, vh)
    return reshape(transpose(ctx, (1, 0, 2)), (tq, d))


class LSTMParams:
    """Weights of one LSTM cell; gate order (input, forget, cell, output)."""

    def __init__(self, w_ih: Tensor, w_hh: Tensor, b: Tensor):
        self.w_ih = w_ih
        self.w_hh = w_hh
        self.b = b

    @property
    def hidden_dim(self) -> int:
        return self.w_hh.shape[0]


def zoneout_lstm_step(
    state,
    x,
    params: LSTMParams,
    zoneout_rates=(0.0, 0.0),
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """One LSTM step with zoneout on cell and hidden state.

    ``state`` is ``(h, c)`` with shape (B, H); ``x`` is (B, D_in).  In train
    mode each state unit keeps its previous value with probability r
    (Bernoulli per unit); in eval mode the update is the deterministic
    interpolation r * old + (1 - r) * new.
    """
    r_c, r_h = zoneout_rates
    if not (0.0 <= r_c <= 1.0 and 0.0 <= r_h <= 1.0):
        raise ConfigError(f"zoneout rates must lie in [0, 1], got {zoneout_rates}")
    h, c = state
    hdim = params.hidden_dim
    z = add(linear(x, params.w_ih, params.b), matmul(h, params.w_hh))
    i = sigmoid(slice_axis(z, 1, 0, hdim))
    f = sigmoid(slice_axis(z, 1, hdim, 2 * hdim))
    g = tanh(slice_axis(z, 1, 2 * hdim, 3 * hdim))
    o = sigmoid(slice_axis(z, 1, 3 * hdim, 4 * hdim))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))

    def blend(old, new, rate):
        if rate == 0.0:
            return new
        if train_mode:
            if rng is None:
                raise ConfigError("train-mode zoneout needs an rng")
            keep = (rng.random(old.shape) < rate).astype(old.dtype)
            return add(mul(old, Tensor(keep)), mul(new, Tensor(1.0 - keep)))
        return add(mul(old, rate), mul(new, 1.0 - rate))

    return blend(h, h_new, r_h), blend(c, c_new, r_c)


def boolean_to_additive(mask, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Convert a boolean keep-mask into the additive representation."""
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, np.asarray(0.0, dtype=dtype), np.asarray(MASK_NEG, dtype=dtype))
