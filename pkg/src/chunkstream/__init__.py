"""Streaming chunk-based attention encoder-decoder with an end-of-chunk symbol."""

from .chunking import ChunkSpec, ChunkwiseAlignment, FramewiseAlignment, chunk_count
from .decoder import Decoder, DecoderConfig, DecoderState, Vocab, advance_pointer
from .encoder import Encoder, EncoderConfig
from .errors import (
    ChunkstreamError,
    ConfigError,
    DataError,
    MaskError,
    NumericalError,
    ProtocolError,
    SearchError,
    ShapeError,
)
from .model import Model, ModelConfig
from .search import BeamConfig, FusionConfig, beam_search, fused_score, greedy_decode

__version__ = "0.1.0"

__all__ = [
    "BeamConfig",
    "ChunkSpec",
    "ChunkstreamError",
    "ChunkwiseAlignment",
    "ConfigError",
    "DataError",
    "Decoder",
    "DecoderConfig",
    "DecoderState",
    "Encoder",
    "EncoderConfig",
    "FramewiseAlignment",
    "FusionConfig",
    "MaskError",
    "Model",
    "ModelConfig",
    "NumericalError",
    "ProtocolError",
    "SearchError",
    "ShapeError",
    "Vocab",
    "advance_pointer",
    "beam_search",
    "chunk_count",
    "fused_score",
    "greedy_decode",
]
