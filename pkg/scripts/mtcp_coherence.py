"""
Coherence fusion: cross-task gating, branch alignment and Gram-matrix merging.

For a main task the module gates and concatenates the other tasks' features,
runs both sides through attention blocks, penalises the cosine distance
between them and merges them with a channel Gram projection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from mtcp_errors import ConfigurationError, ShapeError
from mtcp_nn import BatchNorm2d, Conv2d, Linear, Module
from mtcp_tensor import Tensor, concat, cosine_similarity_map, matmul, mean, relu, sigmoid, tmax, transpose


class Cbam(Module):
    """Channel attention then spatial attention; the spatial conv is 1x1."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(channels // reduction, 1)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.spatial = Conv2d(2, 1, 1, rng)

    def attend(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Return (output, channel map C×1×1, spatial map 1×H×W)."""
        channels = x.shape[0]
        descriptors = concat(
            [mean(x, axis=(1, 2)).reshape(1, channels), tmax(x, axis=(1, 2)).reshape(1, channels)], axis=0
        )
        channel_map = sigmoid(self.fc2(relu(self.fc1(descriptors))).sum(axis=0)).reshape(channels, 1, 1)
        x = x * channel_map
        pooled = concat([mean(x, axis=0, keepdims=True), tmax(x, axis=0, keepdims=True)], axis=0)
        spatial_map = sigmoid(self.spatial(pooled))
        return x * spatial_map, channel_map, spatial_map

    def forward(self, x: Tensor) -> Tensor:
        return self.attend(x)[0]


class CbamBlock(Module):
    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
        batch_norm: bool = True,
        activation: bool = True,
    ):
        self.cbam = Cbam(channels, rng, reduction)
        self.norm = BatchNorm2d(channels) if batch_norm else None
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        x = self.cbam(x)
        if self.norm is not None:
            x = self.norm(x)
        return relu(x) if self.activation else x


class AuxiliaryGate(Module):
    """Sigmoid pixel-wise gates per auxiliary task, concatenated and projected back to C."""

    def __init__(self, channels: int, num_aux: int, rng: np.random.Generator):
        self.gates = [Conv2d(channels, channels, 1, rng) for _ in range(num_aux)]
        self.projection = Conv2d(num_aux * channels, channels, 1, rng)

    def gated(self, aux_features: Sequence[Tensor]) -> Tensor:
        if not aux_features:
            raise ConfigurationError("gate_aux needs at least one auxiliary task")
        if len(aux_features) != len(self.gates):
            raise ShapeError(f"gate_aux built for {len(self.gates)} auxiliary tasks, got {len(aux_features)}")
        parts = [x * sigmoid(gate(x)) for gate, x in zip(self.gates, aux_features)]
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def forward(self, aux_features: Sequence[Tensor]) -> Tensor:
        return self.projection(self.gated(aux_features))


def gate_aux(gate: AuxiliaryGate, aux_features: Sequence[Tensor]) -> Tensor:
    return gate(aux_features)


def coherence_loss(main: Tensor, aux: Tensor) -> Tensor:
    """Mean cosine distance between two C×H×W maps, in [0, 2]."""
    if main.shape != aux.shape:
        raise ShapeError(f"coherence_loss shape mismatch: {main.shape} vs {aux.shape}")
    return mean(1.0 - cosine_similarity_map(main, aux))


def gram_fuse(main: Tensor, aux: Tensor) -> Tensor:
    """Project ``aux`` through the C×C cross-branch Gram matrix (averaged over pixels)."""
    if main.shape != aux.shape or main.ndim != 3:
        raise ShapeError(f"gram_fuse expects equal C×H×W maps, got {main.shape} and {aux.shape}")
    channels, height, width = main.shape
    pixels = height * width
    flat_main = main.reshape(channels, pixels)
    flat_aux = aux.reshape(channels, pixels)
    gram = matmul(flat_main, transpose(flat_aux, (1, 0))) / pixels
    return matmul(gram, flat_aux).reshape(channels, height, width)


@dataclass
class CfmOutput:
    fused: Tensor
    coherence: Tensor
    main_branch: Tensor
    aux_branch: Tensor


class CoherenceFusion(Module):
    def __init__(
        self,
        channels: int,
        num_aux: int,
        rng: np.random.Generator,
        reduction: int = 4,
        residual: bool = True,
    ):
        self.gate = AuxiliaryGate(channels, num_aux, rng)
        self.main_block = CbamBlock(channels, rng, reduction)
        self.aux_block = CbamBlock(channels, rng, reduction)
        self.out_block = CbamBlock(channels, rng, reduction, activation=False)
        self.residual = residual

    def forward(self, main: Tensor, aux: List[Tensor]) -> CfmOutput:
        for other in aux:
            if other.shape != main.shape:
                raise ShapeError(f"auxiliary features {other.shape} differ from main features {main.shape}")
        main_branch = self.main_block(main)
        aux_branch = self.aux_block(self.gate(aux))
        coherence = coherence_loss(main_branch, aux_branch)
        fused = self.out_block(gram_fuse(main_branch, aux_branch))
        if self.residual:
            fused = fused + main
        return CfmOutput(fused, coherence, main_branch, aux_branch)
