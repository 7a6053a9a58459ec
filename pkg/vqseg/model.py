"""
Segmentation network: U-shaped encoder / decoder with a vector-quantised
bottleneck. Skip connections carry the continuous encoder features; only the
deepest representation is snapped to the codebook.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from . import ops
from .blocks import InvertedResidual, MobileViTBlock, UpsampleConcat
from .config import ModelConfig
from .errors import ConfigurationError
from .layers import Conv2d, ConvBNAct, Module
from .quantizer import QuantizationResult, VectorQuantizer
from .tensor import Tensor, count_macs, no_grad

logger = logging.getLogger(__name__)


def _local_global(channels: int, cfg: ModelConfig, rng, dtype) -> MobileViTBlock:
    return MobileViTBlock(
        channels, rng, heads=cfg.heads, depth=cfg.transformer_depth,
        mlp_ratio=cfg.mlp_ratio, patch_size=cfg.patch_size, dtype=dtype,
    )


class EncoderStage(Module):
    def __init__(self, index: int, cfg: ModelConfig, rng, dtype):
        super().__init__()
        in_ch = 3 if index == 0 else cfg.widths[index - 1]
        out_ch = cfg.widths[index]
        stride = cfg.strides[index]
        if index == 0:
            self.down = ConvBNAct(in_ch, out_ch, 3, rng, stride=stride, dtype=dtype)
        else:
            self.down = InvertedResidual(in_ch, out_ch, rng, stride=stride, expansion=cfg.expansion, dtype=dtype)
        self.mixer = _local_global(out_ch, cfg, rng, dtype) if index in cfg.attention_stages else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        return self.mixer(x) if self.mixer is not None else x


class DecoderStage(Module):
    """Mirror of encoder stage `index`: bring features up to its resolution and merge its skip."""

    def __init__(self, index: int, in_channels: int, cfg: ModelConfig, rng, dtype):
        super().__init__()
        width = cfg.widths[index]
        self.merge = UpsampleConcat(in_channels, width, width, rng, upsample=cfg.strides[index + 1] == 2, dtype=dtype)
        self.refine = InvertedResidual(width, width, rng, stride=1, expansion=cfg.expansion, dtype=dtype)
        self.mixer = _local_global(width, cfg, rng, dtype) if index in cfg.attention_stages else None

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.refine(self.merge(x, skip))
        return self.mixer(x) if self.mixer is not None else x


@dataclass
class SegOutput:
    logits: Tensor
    vq_loss: Tensor
    qr: Optional[QuantizationResult]
    codes: Tensor                    # what the decoder's deepest stage consumed


class SegModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.use_vq = cfg.use_vq
        rng = np.random.default_rng(seed)
        depth = len(cfg.widths)

        self.encoder_stages = [EncoderStage(i, cfg, rng, self.dtype) for i in range(depth)]
        for i, stage in enumerate(self.encoder_stages):
            setattr(self, f"encoder{i}", stage)
        self.to_code = Conv2d(cfg.widths[-1], cfg.bottleneck_dim, 1, rng, dtype=self.dtype)
        self.quantizer = VectorQuantizer(cfg.vq, dtype=self.dtype)

        # decoder stage j consumes the skip of encoder stage depth - 2 - j
        self.decoder_stages = []
        channels = cfg.bottleneck_dim
        for index in reversed(range(depth - 1)):
            stage = DecoderStage(index, channels, cfg, rng, self.dtype)
            self.decoder_stages.append(stage)
            setattr(self, f"decoder{depth - 2 - index}", stage)
            channels = cfg.widths[index]
        if depth == 1:
            self.bridge = ConvBNAct(channels, cfg.widths[0], 1, rng, dtype=self.dtype)
            channels = cfg.widths[0]
        else:
            self.bridge = None
        self.upsample_final = cfg.strides[0] == 2
        self.refine_final = ConvBNAct(channels, channels, 3, rng, dtype=self.dtype)
        self.head = Conv2d(channels, cfg.num_classes, 1, rng, dtype=self.dtype)

    @property
    def codebook(self) -> Tensor:
        return self.quantizer.codebook

    def required_multiple(self) -> int:
        """Smallest spatial multiple every input dimension must satisfy."""
        multiple = self.cfg.downsampling
        factor = 1
        pw, ph = self.cfg.patch_size
        for i, stride in enumerate(self.cfg.strides):
            factor *= stride
            if i in self.cfg.attention_stages:
                multiple = math.lcm(multiple, factor * ph, factor * pw)
        return multiple

    def forward(self, image: Tensor) -> SegOutput:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"expected (N, 3, H, W) images, got {image.shape}")
        multiple = self.required_multiple()
        H, W = image.shape[2:]
        if H % multiple or W % multiple:
            raise ConfigurationError(f"image size {H}x{W} must be a multiple of {multiple}")
        if image.dtype != self.dtype:
            image = Tensor(image.data.astype(self.dtype))

        skips: List[Tensor] = []
        x = image
        for stage in self.encoder_stages:
            x = stage(x)
            skips.append(x)
        z = self.to_code(x)

        if self.use_vq:
            codes, vq_loss, qr = self.quantizer(z)
        else:
            codes, vq_loss, qr = z, Tensor(np.zeros((), dtype=self.dtype)), None

        x = codes
        for stage, skip in zip(self.decoder_stages, reversed(skips[:-1])):
            x = stage(x, skip)
        if self.bridge is not None:
            x = self.bridge(x)
        if self.upsample_final:
            x = ops.upsample_nearest2x(x)
        logits = self.head(self.refine_final(x))
        return SegOutput(logits=logits, vq_loss=vq_loss, qr=qr, codes=codes)


def build_model(cfg: ModelConfig, seed: int = 0) -> SegModel:
    """Assemble and initialise a model; logs the per-part parameter counts."""
    model = SegModel(cfg, seed)
    counts = parameter_counts(model)
    logger.info(
        "Built model: encoder %d, codebook %d, decoder %d, total %d parameters",
        counts["encoder"], counts["codebook"], counts["decoder"], counts["total"],
    )
    return model


def forward(model: SegModel, image: Tensor) -> Tuple[Tensor, Optional[QuantizationResult]]:
    out = model(image)
    return out.logits, out.qr


def predict_from_logits(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)


def predict(model: SegModel, image: Tensor) -> np.ndarray:
    with no_grad():
        logits, _ = forward(model, image)
    return predict_from_logits(logits.data)


def parameter_counts(model: SegModel) -> Dict[str, int]:
    counts = {"encoder": 0, "codebook": 0, "decoder": 0, "total": 0}
    for name, p in model.named_parameters():
        if name.startswith("encoder") or name.startswith("to_code"):
            part = "encoder"
        elif name.startswith("quantizer"):
            part = "codebook"
        else:
            part = "decoder"
        counts[part] += p.size
        counts["total"] += p.size
    return counts


class ModelProfile(BaseModel):
    encoder_params: int
    codebook_params: int
    decoder_params: int
    total_params: int
    macs: int = Field(..., description="Multiply-accumulates of one forward pass")
    input_shape: Tuple[int, int, int, int]

    @property
    def gflops(self) -> float:
        return 2.0 * self.macs / 1e9


def profile_model(model: SegModel, input_shape: Tuple[int, int, int, int]) -> ModelProfile:
    """Parameter counts per part and the MAC count of one eval-mode forward."""
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_macs() as counter:
            model(Tensor(np.zeros(input_shape, dtype=model.dtype)))
    finally:
        if was_training:
            model.train()
    counts = parameter_counts(model)
    return ModelProfile(
        encoder_params=counts["encoder"],
        codebook_params=counts["codebook"],
        decoder_params=counts["decoder"],
        total_params=counts["total"],
        macs=counter["macs"],
        input_shape=tuple(input_shape),
    )
