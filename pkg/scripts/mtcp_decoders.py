"""
Per-task hierarchical decoders and dynamic feature pyramid fusion.

Each decoder runs K stages of windowed self-attention blocks; stage 1 keeps
the backbone resolution and every later stage opens with a 2x patch-merging
conv. All stage outputs are kept in StageFeatures for the trace-back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from mtcp_errors import ConfigurationError, StateError
from mtcp_nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from mtcp_tensor import Tensor, bilinear_resize, matmul, relu, softmax, transpose


@dataclass
class StageFeatures:
    """X_1..X_K of one task decoder, finest first."""

    features: List[Tensor]

    def __len__(self) -> int:
        return len(self.features)

    def stage(self, k: int) -> Tensor:
        if not 1 <= k <= len(self.features):
            raise StateError(f"no stored features for stage {k} (have {len(self.features)})")
        return self.features[k - 1]


@dataclass
class DecoderOutput:
    stages: StageFeatures
    fused: Tensor


def window_partition(x: Tensor, window: int) -> Tensor:
    """C×H×W → (windows, window², C) token groups."""
    channels, height, width = x.shape
    if height % window or width % window:
        raise ConfigurationError(f"window {window} does not divide spatial size {height}x{width}")
    tokens = transpose(x, (1, 2, 0)).reshape(height // window, window, width // window, window, channels)
    return transpose(tokens, (0, 2, 1, 3, 4)).reshape(-1, window * window, channels)


def window_merge(tokens: Tensor, height: int, width: int, window: int) -> Tensor:
    channels = tokens.shape[-1]
    grid = tokens.reshape(height // window, width // window, window, window, channels)
    return transpose(transpose(grid, (0, 2, 1, 3, 4)).reshape(height, width, channels), (2, 0, 1))


class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng, zero_init=True)

    def attend(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        """Return the projected attention output and the attention weights."""
        windows, count, dim = tokens.shape
        head_dim = dim // self.heads
        qkv = transpose(self.qkv(tokens).reshape(windows, count, 3, self.heads, head_dim), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (head_dim**-0.5)
        weights = softmax(scores, axis=-1)
        mixed = transpose(matmul(weights, v), (0, 2, 1, 3)).reshape(windows, count, dim)
        return self.proj(mixed), weights

    def forward(self, tokens: Tensor) -> Tensor:
        return self.attend(tokens)[0]


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int, rng: np.random.Generator):
        self.window = window
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        _, height, width = x.shape
        tokens = window_partition(x, self.window)
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.fc2(relu(self.fc1(self.norm2(tokens))))
        return window_merge(tokens, height, width, self.window)


class DecoderStage(Module):
    def __init__(
        self,
        index: int,
        in_width: int,
        width: int,
        blocks: int,
        window: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
    ):
        self.index = index
        if index > 1:
            self.entry = Conv2d(in_width, width, 2, rng, stride=2)
        elif in_width != width:
            self.entry = Conv2d(in_width, width, 1, rng)
        else:
            self.entry = None
        self.blocks = [TransformerBlock(width, heads, window, mlp_ratio, rng) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        if self.entry is not None:
            x = self.entry(x)
        for block in self.blocks:
            x = block(x)
        return x


class DynamicPyramidFusion(Module):
    """Softmax-gated sum of upsampled, width-aligned stage features."""

    def __init__(self, widths: Sequence[int], out_width: int, rng: np.random.Generator):
        self.laterals = [Conv2d(w, out_width, 1, rng) for w in widths]
        self.gate_logits = Parameter(np.zeros(len(widths)))

    def gates(self) -> Tensor:
        return softmax(self.gate_logits, axis=0)

    def forward(self, stages: StageFeatures) -> Tensor:
        gates = self.gates()
        _, height, width = stages.stage(1).shape
        fused = None
        for k, lateral in enumerate(self.laterals):
            upsampled = bilinear_resize(stages.features[k], height, width)
            term = gates[k] * lateral(upsampled)
            fused = term if fused is None else fused + term
        return fused


class TaskDecoder(Module):
    def __init__(
        self,
        in_width: int,
        widths: Sequence[int],
        blocks: Sequence[int],
        window: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
    ):
        if len(widths) < 1 or len(widths) != len(blocks):
            raise ConfigurationError(f"need one width and block count per stage, got {widths} and {blocks}")
        self.window = window
        self.input_norm = BatchNorm2d(in_width)
        self.stages = []
        previous = in_width
        for k, (width, count) in enumerate(zip(widths, blocks), start=1):
            self.stages.append(DecoderStage(k, previous, width, count, window, heads, mlp_ratio, rng))
            previous = width
        self.dfpn = DynamicPyramidFusion(widths, in_width, rng)

    def stage_forward(self, x: Tensor, stage_index: int) -> Tensor:
        if not 1 <= stage_index <= len(self.stages):
            raise ConfigurationError(f"stage index {stage_index} outside 1..{len(self.stages)}")
        return self.stages[stage_index - 1](x)

    def forward(self, shared: Tensor) -> DecoderOutput:
        x = self.input_norm(shared)
        features = []
        for k in range(1, len(self.stages) + 1):
            x = self.stage_forward(x, k)
            features.append(x)
        stages = StageFeatures(features)
        return DecoderOutput(stages, self.dfpn(stages))
