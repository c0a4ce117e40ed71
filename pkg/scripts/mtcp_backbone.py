"""
Shared backbone: pixel embeddings, query masks and their instance fusion.

A small strided conv encoder stands in for the pretrained mask-transformer
backbone; learned queries stand in for its transformer decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mtcp_config import BackboneConfig
from mtcp_errors import ConfigurationError, ShapeError
from mtcp_nn import Conv2d, Module, Parameter
from mtcp_tensor import Tensor, matmul, relu, sigmoid, transpose


@dataclass
class BackboneOutput:
    pixel_embeddings: Tensor
    masks: Tensor
    fused: Tensor


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return relu(x + self.conv2(relu(self.conv1(x))))


def fuse_instances(pixel_embeddings: Tensor, masks: Tensor) -> Tensor:
    """Project masks onto pixel embeddings and aggregate instances back onto pixels.

    A = P·Mᵀ holds one C-vector per instance; R = A·M spreads each instance
    embedding over its mask, summed over instances.
    """
    channels, height, width = pixel_embeddings.shape
    if masks.ndim != 3 or masks.shape[1:] != (height, width):
        raise ShapeError(f"fuse_instances spatial mismatch: P {pixel_embeddings.shape}, M {masks.shape}")
    flat_p = pixel_embeddings.reshape(channels, height * width)
    flat_m = masks.reshape(masks.shape[0], height * width)
    per_instance = matmul(flat_p, transpose(flat_m, (1, 0)))
    return matmul(per_instance, flat_m).reshape(channels, height, width)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        channels = config.channels
        self.stem1 = Conv2d(3, 16, 2, rng, stride=2)
        self.stem2 = Conv2d(16, channels, 2, rng, stride=2)
        self.blocks = [ResidualBlock(channels, rng), ResidualBlock(channels, rng)]
        self.queries = Parameter(rng.standard_normal((config.num_queries, channels)) / np.sqrt(channels))

    def encode(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"encode expects a 3×H×W image, got {image.shape}")
        if image.shape[1] % 4 or image.shape[2] % 4:
            raise ConfigurationError(f"image size {image.shape[1]}x{image.shape[2]} is not divisible by 4")
        x = relu(self.stem1(image))
        x = relu(self.stem2(x))
        for block in self.blocks:
            x = block(x)
        return x

    def mask_queries(self, pixel_embeddings: Tensor) -> Tensor:
        channels, height, width = pixel_embeddings.shape
        logits = matmul(self.queries, pixel_embeddings.reshape(channels, height * width))
        return sigmoid(logits).reshape(self.queries.shape[0], height, width)

    def forward(self, image: Tensor) -> BackboneOutput:
        embeddings = self.encode(image)
        masks = self.mask_queries(embeddings)
        return BackboneOutput(embeddings, masks, fuse_instances(embeddings, masks))
