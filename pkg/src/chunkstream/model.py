"""Encoder + decoder + CTC head over one parameter registry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import ParamSet, load_checkpoint, save_checkpoint
from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig, EncoderOutput
from .errors import ConfigError
from .tensor import Tensor, concat, linear, log_softmax, slice_axis


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    decoder: DecoderConfig

    def __post_init__(self):
        if self.decoder.enc_dim != self.encoder.model_dim:
            raise ConfigError(
                f"decoder expects encoder dim {self.decoder.enc_dim}, encoder has {self.encoder.model_dim}"
            )

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            decoder=DecoderConfig.from_dict(d["decoder"]),
        )


class Model:
    """Bundles the networks; the CTC head sits on the encoder output.

    CTC classes are the labels at their decoder ids plus blank in the final
    column (the end-of-chunk symbol has no frame-level identity, so its slot
    holds the blank).
    """

    def __init__(self, config: ModelConfig, params: ParamSet | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        if params is None:
            params = ParamSet(rng=np.random.default_rng(seed), dtype=dtype)
        self.params = params
        self.encoder = Encoder(config.encoder, params)
        self.decoder = Decoder(config.decoder, params)
        if "ctc.w" not in params:
            v = config.decoder.vocab_size
            params.weight("ctc.w", (config.encoder.model_dim, v))
            params.bias("ctc.b", v)

    @property
    def ctc_blank(self) -> int:
        """Blank column in the CTC head output."""
        return self.config.decoder.vocab_size - 1

    def ctc_log_probs(self, enc_out: EncoderOutput) -> Tensor:
        """(T', V) log distributions over labels + blank, valid frames only."""
        parts = []
        for chunk, valid in zip(enc_out.chunks, enc_out.valid):
            parts.append(chunk if valid == chunk.shape[0] else slice_axis(chunk, 0, 0, valid))
        h = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        return log_softmax(linear(h, self.params["ctc.w"], self.params["ctc.b"]))

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.config.to_dict())

    @classmethod
    def load(cls, path) -> "Model":
        config_dict, params = load_checkpoint(path)
        config = ModelConfig.from_dict(config_dict)
        return cls(config, params=params)

    def cast(self, dtype) -> "Model":
        """Detached copy in another float dtype (verification harness)."""
        return Model(self.config, params=self.params.cast(dtype))

    def init_from(self, other: "Model") -> "Model":
        """Copy matching parameter values in-place (stage-2 initialisation)."""
        self.params.copy_values_from(other.params)
        return self
