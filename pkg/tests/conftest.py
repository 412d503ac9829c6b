import numpy as np
import pytest

from chunkstream.checkpoint import ParamSet
from chunkstream.chunking import ChunkSpec
from chunkstream.decoder import Decoder, DecoderConfig
from chunkstream.encoder import Encoder, EncoderConfig
from chunkstream.model import Model, ModelConfig


def make_params(seed=0, dtype=np.float32):
    return ParamSet(rng=np.random.default_rng(seed), dtype=dtype)


def tiny_encoder(
    seed=0,
    feat_dim=6,
    model_dim=8,
    layers=2,
    heads=2,
    ff_dim=16,
    conv_kernel=3,
    downsample_factor=2,
    relpos_clip=4,
    chunk=None,
    carry_over_chunks=0,
    dtype=np.float32,
):
    cfg = EncoderConfig(
        feat_dim=feat_dim,
        model_dim=model_dim,
        layers=layers,
        heads=heads,
        conv_kernel=conv_kernel,
        ff_dim=ff_dim,
        downsample_factor=downsample_factor,
        relpos_clip=relpos_clip,
        chunk=chunk,
        carry_over_chunks=carry_over_chunks,
    )
    return Encoder(cfg, make_params(seed, dtype))


def tiny_decoder(
    seed=0,
    vocab_size=4,
    enc_dim=8,
    embed_dim=6,
    lstm_dim=8,
    attn_dim=8,
    maxout_dim=6,
    zoneout=(0.0, 0.0),
    mode="chunked",
    dtype=np.float32,
    **flags,
):
    cfg = DecoderConfig(
        vocab_size=vocab_size,
        enc_dim=enc_dim,
        embed_dim=embed_dim,
        lstm_dim=lstm_dim,
        attn_dim=attn_dim,
        maxout_dim=maxout_dim,
        zoneout=zoneout,
        mode=mode,
        **flags,
    )
    return Decoder(cfg, make_params(seed, dtype))


def tiny_model(
    seed=0,
    feat_dim=6,
    vocab_size=4,
    model_dim=8,
    chunk=None,
    carry_over_chunks=0,
    downsample_factor=2,
    mode=None,
    dtype=np.float32,
    zoneout=(0.0, 0.0),
    **flags,
):
    enc = EncoderConfig(
        feat_dim=feat_dim,
        model_dim=model_dim,
        layers=2,
        heads=2,
        conv_kernel=3,
        ff_dim=16,
        downsample_factor=downsample_factor,
        relpos_clip=4,
        chunk=chunk,
        carry_over_chunks=carry_over_chunks,
    )
    dec = DecoderConfig(
        vocab_size=vocab_size,
        enc_dim=model_dim,
        embed_dim=6,
        lstm_dim=8,
        attn_dim=8,
        maxout_dim=6,
        zoneout=zoneout,
        mode=mode or ("chunked" if chunk is not None else "global"),
        **flags,
    )
    return Model(ModelConfig(encoder=enc, decoder=dec), seed=seed, dtype=dtype)


def rand_features(seed, t, d, scale=1.0):
    return (scale * np.random.default_rng(seed).standard_normal((t, d))).astype(np.float32)


@pytest.fixture
def spec_12_6():
    return ChunkSpec(center=12, stride=12, lookahead=6, frame_ms=10)
