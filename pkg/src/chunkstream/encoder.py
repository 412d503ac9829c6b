"""Conformer-style encoder with a global mode and a chunked streaming mode.

Both modes share one block implementation.  Global mode runs full-sequence
self-attention over the downsampled stream.  Chunked mode processes one
window (center + lookahead frames) at a time: queries are the window frames,
keys and values are the window frames plus the center-frame representations
of the previous ``carry_over_chunks`` windows at the same depth.  Lookahead
frames are recomputed per chunk and never enter the history, so context does
not grow with depth; history centers do carry forward.

The streaming session keeps, per layer, the last ``carry_over_chunks``
center slices, so its memory is constant in the number of chunks, and chunk
k's output depends only on input frames up to ``k*stride + window``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chunking import ChunkSpec, chunk_count
from .checkpoint import ParamSet
from .errors import ConfigError, DataError, ProtocolError
from .tensor import (
    Tensor,
    add,
    boolean_to_additive,
    concat,
    conv1d,
    depthwise_conv1d,
    gather_rows,
    glu,
    layer_norm,
    linear,
    mul,
    relu,
    reshape,
    scaled_dot_attention,
    slice_axis,
    swish,
    transpose,
)


def _factor_strides(factor: int) -> tuple[int, int]:
    """Split the downsample factor across the two frontend convolutions."""
    for s in range(int(np.sqrt(factor)), 0, -1):
        if factor % s == 0:
            return factor // s, s
    return factor, 1


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int
    model_dim: int = 64
    layers: int = 2
    heads: int = 4
    conv_kernel: int = 9
    ff_dim: int = 128
    downsample_factor: int = 6
    relpos_clip: int = 16
    chunk: Optional[ChunkSpec] = None
    carry_over_chunks: int = 0

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ConfigError(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        if self.conv_kernel % 2 != 1:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"{self.heads} heads do not divide model_dim {self.model_dim}")
        if self.carry_over_chunks < 0:
            raise ConfigError(f"carry_over_chunks must be >= 0, got {self.carry_over_chunks}")

    @property
    def center_frames_ds(self) -> int:
        """Chunk center size after downsampling."""
        if self.chunk is None:
            raise ConfigError("encoder has no chunk geometry configured")
        return -(-self.chunk.center // self.downsample_factor)

    def to_dict(self) -> dict:
        d = {
            "feat_dim": self.feat_dim,
            "model_dim": self.model_dim,
            "layers": self.layers,
            "heads": self.heads,
            "conv_kernel": self.conv_kernel,
            "ff_dim": self.ff_dim,
            "downsample_factor": self.downsample_factor,
            "relpos_clip": self.relpos_clip,
            "carry_over_chunks": self.carry_over_chunks,
        }
        if self.chunk is not None:
            d["chunk"] = {
                "center": self.chunk.center,
                "stride": self.chunk.stride,
                "lookahead": self.chunk.lookahead,
                "frame_ms": self.chunk.frame_ms,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        ck = d.pop("chunk", None)
        chunk = ChunkSpec(**ck) if ck else None
        return cls(chunk=chunk, **d)


@dataclass
class EncoderOutput:
    """Per-chunk center outputs; ``valid[k]`` counts the real frames in chunk k."""

    chunks: list[Tensor]
    valid: list[int]

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    @property
    def total_frames(self) -> int:
        return sum(self.valid)

    def flat(self) -> np.ndarray:
        """Valid frames of every chunk, concatenated. (T', D)."""
        return np.concatenate([c.data[:v] for c, v in zip(self.chunks, self.valid)], axis=0)

    @classmethod
    def single(cls, h: Tensor, valid: Optional[int] = None) -> "EncoderOutput":
        return cls(chunks=[h], valid=[h.shape[0] if valid is None else valid])

    def rechunk(self, frames_per_chunk: int) -> "EncoderOutput":
        """Re-cut a single-chunk output into fixed-size pieces (last may be short)."""
        if self.num_chunks != 1:
            raise ConfigError("rechunk expects a single-chunk output")
        h, v = self.chunks[0], self.valid[0]
        chunks, valid = [], []
        for lo in range(0, v, frames_per_chunk):
            hi = min(lo + frames_per_chunk, v)
            chunks.append(slice_axis(h, 0, lo, hi))
            valid.append(hi - lo)
        return EncoderOutput(chunks=chunks, valid=valid)


@dataclass
class _CacheEntry:
    ln_center: Tensor  # (T'_w, D), already layer-normed for attention keys
    valid: int
    pos_start: int


class Encoder:
    """Holds configuration plus named parameters inside a shared ParamSet."""

    def __init__(self, config: EncoderConfig, params: ParamSet, prefix: str = "enc"):
        self.config = config
        self.params = params
        self.prefix = prefix
        if f"{prefix}.front.conv1.w" not in params:
            self._build()

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def _build(self) -> None:
        cfg = self.config
        ps = self.params
        pre = self.prefix
        s1, s2 = _factor_strides(cfg.downsample_factor)
        k1, k2 = 2 * s1 - 1, 2 * s2 - 1
        d = cfg.model_dim
        ps.weight(f"{pre}.front.conv1.w", (k1, cfg.feat_dim, d), fan_in=k1 * cfg.feat_dim, fan_out=k1 * d)
        ps.bias(f"{pre}.front.conv1.b", d)
        ps.weight(f"{pre}.front.conv2.w", (k2, d, d), fan_in=k2 * d, fan_out=k2 * d)
        ps.bias(f"{pre}.front.conv2.b", d)
        for i in range(cfg.layers):
            b = f"{pre}.block{i}"
            for ff in ("ff1", "ff2"):
                ps.add(f"{b}.{ff}.ln.g", np.ones(d, dtype=ps.dtype))
                ps.bias(f"{b}.{ff}.ln.b", d)
                ps.weight(f"{b}.{ff}.w1", (d, cfg.ff_dim))
                ps.bias(f"{b}.{ff}.b1", cfg.ff_dim)
                ps.weight(f"{b}.{ff}.w2", (cfg.ff_dim, d))
                ps.bias(f"{b}.{ff}.b2", d)
            ps.add(f"{b}.attn.ln.g", np.ones(d, dtype=ps.dtype))
            ps.bias(f"{b}.attn.ln.b", d)
            for name in ("wq", "wk", "wv", "wo"):
                ps.weight(f"{b}.attn.{name}", (d, d))
            for name in ("bq", "bk", "bv", "bo"):
                ps.bias(f"{b}.attn.{name}", d)
            span = 2 * cfg.relpos_clip + 1
            ps.add(f"{b}.attn.rel", ps.rng.uniform(-0.05, 0.05, size=(span, cfg.heads)))
            ps.add(f"{b}.conv.ln.g", np.ones(d, dtype=ps.dtype))
            ps.bias(f"{b}.conv.ln.b", d)
            ps.weight(f"{b}.conv.pw1.w", (d, 2 * d))
            ps.bias(f"{b}.conv.pw1.b", 2 * d)
            ps.weight(f"{b}.conv.dw.w", (cfg.conv_kernel, d), fan_in=cfg.conv_kernel, fan_out=cfg.conv_kernel)
            ps.bias(f"{b}.conv.dw.b", d)
            ps.weight(f"{b}.conv.pw2.w", (d, d))
            ps.bias(f"{b}.conv.pw2.b", d)
            ps.add(f"{b}.out_ln.g", np.ones(d, dtype=ps.dtype))
            ps.bias(f"{b}.out_ln.b", d)

    # -- forward pieces ----------------------------------------------------

    def frontend(self, frames: np.ndarray) -> Tensor:
        """Two strided convolutions; output length ceil(T / downsample_factor)."""
        s1, s2 = _factor_strides(self.config.downsample_factor)
        x = Tensor(np.asarray(frames, dtype=self.params.dtype))
        x = relu(conv1d(x, self._p("front.conv1.w"), self._p("front.conv1.b"), s1))
        return relu(conv1d(x, self._p("front.conv2.w"), self._p("front.conv2.b"), s2))

    def _ff(self, i: int, name: str, x: Tensor) -> Tensor:
        g = lambda n: self._p(f"block{i}.{name}.{n}")
        h = layer_norm(x, g("ln.g"), g("ln.b"))
        h = swish(linear(h, g("w1"), g("b1")))
        return linear(h, g("w2"), g("b2"))

    def rel_bias(self, i: int, q_pos: np.ndarray, k_pos: np.ndarray) -> Tensor:
        """Clipped relative-offset bias, (heads, Tq, Tk)."""
        c = self.config.relpos_clip
        off = np.clip(k_pos[None, :] - q_pos[:, None], -c, c) + c
        rows = gather_rows(self._p(f"block{i}.attn.rel"), off.reshape(-1))
        return transpose(reshape(rows, (len(q_pos), len(k_pos), self.config.heads)), (2, 0, 1))

    def attend(self, i: int, q_ln: Tensor, kv_ln: Tensor, additive_mask) -> Tensor:
        g = lambda n: self._p(f"block{i}.attn.{n}")
        qp = linear(q_ln, g("wq"), g("bq"))
        kp = linear(kv_ln, g("wk"), g("bk"))
        vp = linear(kv_ln, g("wv"), g("bv"))
        ctx = scaled_dot_attention(qp, kp, vp, additive_mask=additive_mask, num_heads=self.config.heads)
        return linear(ctx, g("wo"), g("bo"))

    def block(self, i: int, x: Tensor, attend_fn, seg_bounds) -> Tensor:
        """One pre-norm block; ``attend_fn(ln_y)`` supplies the attention output.

        ``seg_bounds`` lists (lo, hi) row ranges the depthwise convolution may
        not mix across.
        """
        g = lambda n: self._p(f"block{i}.{n}")
        y = add(x, mul(self._ff(i, "ff1", x), 0.5))
        ln_y = layer_norm(y, g("attn.ln.g"), g("attn.ln.b"))
        y = add(y, attend_fn(ln_y))
        c = layer_norm(y, g("conv.ln.g"), g("conv.ln.b"))
        z = glu(linear(c, g("conv.pw1.w"), g("conv.pw1.b")))
        dw_w, dw_b = g("conv.dw.w"), g("conv.dw.b")
        if len(seg_bounds) == 1:
            z = depthwise_conv1d(z, dw_w, dw_b)
        else:
            z = concat(
                [depthwise_conv1d(slice_axis(z, 0, lo, hi), dw_w, dw_b) for lo, hi in seg_bounds],
                axis=0,
            )
        y = add(y, linear(swish(z), g("conv.pw2.w"), g("conv.pw2.b")))
        y = add(y, mul(self._ff(i, "ff2", y), 0.5))
        return layer_norm(y, g("out_ln.g"), g("out_ln.b"))

    # -- dense reference path ---------------------------------------------

    def encode_dense(self, segments, positions: np.ndarray, visibility: Optional[np.ndarray]) -> Tensor:
        """Run the blocks over concatenated segments under one attention mask.

        Each raw-frame segment passes the frontend separately; the depthwise
        convolution stays confined to its segment.  ``visibility`` is a
        boolean (S, S) matrix over the concatenated downsampled positions,
        True where a query may see a key; None means everything sees
        everything.  This single path serves the global encoder and the dense
        reference for chunked attention.
        """
        fronts = [self.frontend(seg) for seg in segments]
        sizes = [f.shape[0] for f in fronts]
        bounds = []
        lo = 0
        for n in sizes:
            bounds.append((lo, lo + n))
            lo += n
        total = lo
        if len(positions) != total:
            raise DataError(f"positions length {len(positions)} != stream length {total}")
        x = fronts[0] if len(fronts) == 1 else concat(fronts, axis=0)
        vis_add = None
        if visibility is not None:
            vis_add = boolean_to_additive(visibility, dtype=self.params.dtype)[None]
        for i in range(self.config.layers):
            def attend_fn(ln_y, i=i):
                mask = self.rel_bias(i, positions, positions)
                if vis_add is not None:
                    mask = add(mask, Tensor(vis_add))
                return self.attend(i, ln_y, ln_y, mask)

            x = self.block(i, x, attend_fn, bounds)
        return x

    def encode_global(self, features: np.ndarray) -> EncoderOutput:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[0] == 0:
            raise DataError(f"features must be a non-empty (T, D) array, got {features.shape}")
        t_ds = -(-features.shape[0] // self.config.downsample_factor)
        h = self.encode_dense([features], np.arange(t_ds), None)
        return EncoderOutput.single(h)

    # -- chunked streaming path -------------------------------------------

    def start_session(self) -> "StreamingSession":
        if self.config.chunk is None:
            raise ConfigError("chunked encoding requires chunk geometry in the config")
        return StreamingSession(self)

    def encode_chunked(self, features: np.ndarray) -> EncoderOutput:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[0] == 0:
            raise DataError(f"features must be a non-empty (T, D) array, got {features.shape}")
        spec = self.config.chunk
        if spec is None:
            raise ConfigError("chunked encoding requires chunk geometry in the config")
        t = features.shape[0]
        k_total = chunk_count(t, spec)
        session = self.start_session()
        chunks, valid = [], []
        for k in range(k_total):
            lo = k * spec.stride
            hi = min(lo + spec.window, t)
            h, v = session.feed(features[lo:hi], chunk_index=k)
            chunks.append(h)
            valid.append(v)
        return EncoderOutput(chunks=chunks, valid=valid)


class StreamingSession:
    """Sequential chunk-by-chunk encoding with bounded per-layer caches."""

    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        carry = encoder.config.carry_over_chunks
        self.caches: list[deque] = [deque(maxlen=carry) for _ in range(encoder.config.layers)]
        self.next_index = 0
        self.finished = False

    def feed(self, frames: np.ndarray, chunk_index: Optional[int] = None) -> tuple[Tensor, int]:
        """Encode one chunk window; returns (center outputs (T'_w, D), valid count).

        ``frames`` holds the chunk's center plus lookahead rows, fewer near
        the stream end.  A feed of at most ``stride`` rows, shorter than the
        window, is the final chunk; feeding past it is a protocol violation,
        as is an explicit ``chunk_index`` other than the next expected one.
        """
        enc = self.encoder
        cfg = enc.config
        spec = cfg.chunk
        if self.finished:
            raise ProtocolError("stream already ended; cannot feed more chunks")
        if chunk_index is not None and chunk_index != self.next_index:
            raise ProtocolError(
                f"chunks must be fed in order: expected {self.next_index}, got {chunk_index}"
            )
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != cfg.feat_dim:
            raise DataError(f"chunk frames must be (T, {cfg.feat_dim}), got {frames.shape}")
        n = frames.shape[0]
        if n == 0 or n > spec.window:
            raise DataError(f"chunk must hold 1..{spec.window} frames, got {n}")
        k = self.next_index
        self.next_index += 1
        if n < spec.window and n <= spec.stride:
            self.finished = True

        window = np.zeros((spec.window, cfg.feat_dim), dtype=enc.params.dtype)
        window[:n] = frames
        x = enc.frontend(window)
        w_ds = x.shape[0]
        t_w_ds = cfg.center_frames_ds
        v_ds = -(-n // cfg.downsample_factor)
        positions = k * t_w_ds + np.arange(w_ds)
        cur_valid = np.arange(w_ds) < v_ds

        for i in range(cfg.layers):
            hist = list(self.caches[i])

            def attend_fn(ln_y, i=i, hist=hist):
                center = slice_axis(ln_y, 0, 0, t_w_ds)
                self.caches[i].append(
                    _CacheEntry(ln_center=center, valid=min(v_ds, t_w_ds), pos_start=k * t_w_ds)
                )
                if hist:
                    kv = concat([e.ln_center for e in hist] + [ln_y], axis=0)
                    k_pos = np.concatenate(
                        [e.pos_start + np.arange(t_w_ds) for e in hist] + [positions]
                    )
                    k_valid = np.concatenate(
                        [np.arange(t_w_ds) < e.valid for e in hist] + [cur_valid]
                    )
                else:
                    kv, k_pos, k_valid = ln_y, positions, cur_valid
                mask = add(
                    enc.rel_bias(i, positions, k_pos),
                    Tensor(boolean_to_additive(k_valid, dtype=enc.params.dtype)[None, None, :]),
                )
                return enc.attend(i, ln_y, kv, mask)

            x = enc.block(i, x, attend_fn, [(0, w_ds)])

        centers = slice_axis(x, 0, 0, t_w_ds)
        return centers, min(v_ds, t_w_ds)
