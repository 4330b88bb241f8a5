"""Two-stream encoder: modality-specific stems, a shared trunk, GAP, BN and classifiers.

The network is a desk-scale stand-in for a ResNet-50: each stem is a strided
3x3 convolution with a rectifier, the trunk is a stack of 3x3 convolutions
shared by both modalities. With the default 3x16x8 inputs the trunk emits
32x8x4 feature maps.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Literal

import torch
from torch import nn

from diff_core import DTYPE, check_shape, ensure_finite, softmax
from errors import ConfigError, ShapeError

BNMode = Literal["train", "infer"]


class Modality(str, Enum):
    RGB = "rgb"
    IR = "ir"


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder geometry.

    ``identity_count`` is the number of training identities the classifier
    heads score; 0 means "fill in from the training index".
    """

    input_shape: tuple[int, int, int] = (3, 16, 8)
    stem_widths: tuple[int, ...] = (16,)
    trunk_widths: tuple[int, ...] = (32, 32)
    identity_count: int = 0
    bn_eps: float = 1e-5

    @property
    def output_shape(self) -> tuple[int, int, int]:
        _, height, width = self.input_shape
        shrink = 2 ** len(self.stem_widths)
        return (self.trunk_widths[-1], height // shrink, width // shrink)

    @property
    def embedding_dim(self) -> int:
        return self.trunk_widths[-1]

    def validate(self) -> None:
        widths = list(self.input_shape) + list(self.stem_widths) + list(self.trunk_widths)
        if not self.stem_widths or not self.trunk_widths:
            raise ConfigError("encoder needs at least one stem and one trunk layer")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"encoder widths must be positive, got {widths}")
        shrink = 2 ** len(self.stem_widths)
        _, height, width = self.input_shape
        if height % shrink or width % shrink:
            raise ConfigError(
                f"input {height}x{width} not divisible by stem stride {shrink}"
            )
        if self.identity_count <= 0:
            raise ConfigError("encoder identity_count must be positive")


def init_uniform(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform(-s, s) with s = sqrt(1/fan_in) for every conv/linear layer."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.Linear)):
            bound = math.sqrt(1.0 / layer.weight[0].numel())
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                if layer.bias is not None:
                    layer.bias.uniform_(-bound, bound, generator=generator)


def _stem(in_channels: int, widths: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for width in widths:
        layers += [nn.Conv2d(in_channels, width, 3, stride=2, padding=1, dtype=DTYPE), nn.ReLU()]
        in_channels = width
    return nn.Sequential(*layers)


def _trunk(in_channels: int, widths: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, width in enumerate(widths):
        if i:
            layers.append(nn.ReLU())
        layers.append(nn.Conv2d(in_channels, width, 3, stride=1, padding=1, dtype=DTYPE))
        in_channels = width
    return nn.Sequential(*layers)


class TwoStreamEncoder(nn.Module):
    """f = Feat(Conv_m(x)) with one stem per modality and a shared trunk."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        channels = config.input_shape[0]
        self.stems = nn.ModuleDict({
            Modality.RGB.value: _stem(channels, config.stem_widths),
            Modality.IR.value: _stem(channels, config.stem_widths),
        })
        self.trunk = _trunk(config.stem_widths[-1], config.trunk_widths)

    def forward(self, images: torch.Tensor, modality: Modality) -> torch.Tensor:
        return encode(images, modality, self)


def encode(images: torch.Tensor, modality: Modality, encoder: TwoStreamEncoder) -> torch.Tensor:
    """Encode a batch (B, C0, H0, W0) into feature maps (B, C, H, W)."""
    if images.dim() != 4:
        raise ShapeError("encoder expects a 4-d image batch", ("B",) + encoder.config.input_shape, images.shape)
    check_shape("encoder input", encoder.config.input_shape, images.shape[1:])
    stem = encoder.stems[Modality(modality).value]
    return ensure_finite("encode", encoder.trunk(stem(images)))


def gap(f: torch.Tensor) -> torch.Tensor:
    """Mean over the spatial positions of each channel; (..., C, H, W) -> (..., C)."""
    return f.mean(dim=(-2, -1))


def make_batchnorm(config: EncoderConfig) -> nn.BatchNorm1d:
    return nn.BatchNorm1d(config.embedding_dim, eps=config.bn_eps, momentum=0.1, dtype=DTYPE)


def batchnorm(embeddings: torch.Tensor, bn: nn.BatchNorm1d, mode: BNMode) -> torch.Tensor:
    """Batch statistics (and a running-stat update) in train mode, running stats in infer mode."""
    if embeddings.dim() != 2:
        raise ShapeError("batchnorm expects (batch, channels)", ("B", bn.num_features), embeddings.shape)
    check_shape("batchnorm channels", (bn.num_features,), embeddings.shape[1:])
    if mode == "train" and embeddings.shape[0] < 2:
        raise ShapeError(f"train-mode batchnorm needs at least 2 samples, got {embeddings.shape[0]}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown batchnorm mode '{mode}'")
    bn.train(mode == "train")
    return ensure_finite("batchnorm", bn(embeddings))


def make_classifier(embedding_dim: int, identity_count: int) -> nn.Linear:
    return nn.Linear(embedding_dim, identity_count, dtype=DTYPE)


def classify(embedding: torch.Tensor, classifier: nn.Linear) -> torch.Tensor:
    """softmax(W e + b) over the classifier's identities."""
    if embedding.shape[-1] != classifier.in_features:
        raise ShapeError("classifier input dim", (classifier.in_features,), embedding.shape[-1:])
    return softmax(classifier(embedding), dim=-1)
