"""Full segmentation network: encoder + decoder + deep supervision loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockConfig
from .decoder import Decoder, DecoderConfig, SegmentationOutput, supervision_loss
from .encoder import Encoder, EncoderConfig
from .params import ParameterStore
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    seed: int = 0


class SegmentationModel:
    """Owns the parameter store; forward is a pure function of the inputs."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.store = ParameterStore(cfg.seed, dtype)
        self.encoder = Encoder(self.store, cfg.encoder, cfg.block)
        self.decoder = Decoder(self.store, cfg.encoder, cfg.decoder, cfg.block)

    def _wrap(self, arr) -> Tensor:
        if isinstance(arr, Tensor):
            return arr
        return Tensor(np.asarray(arr, dtype=self.store.dtype))

    def forward(self, images, train: bool = False) -> SegmentationOutput:
        feats = self.encoder(self._wrap(images), train)
        return self.decoder(feats, train)

    __call__ = forward

    def loss(self, output: SegmentationOutput, masks):
        """Returns (total loss tensor, per-head float dict)."""
        return supervision_loss(output, self._wrap(masks))
