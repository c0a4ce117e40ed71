"""
Spatial refinement trace-back.

The fused task representation is walked back through the task's own stored
decoder stages from the coarsest (k = K) to the finest (k = 1). Every step
emits an intermediate prediction; the last step's prediction is the final one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mtcp_coherence import Cbam
from mtcp_decoders import StageFeatures
from mtcp_errors import StateError
from mtcp_nn import BatchNorm2d, Conv2d, Module
from mtcp_tensor import Tensor, bilinear_resize, concat, relu


@dataclass
class TracebackOutput:
    final: Tensor
    # Indexed by stage: intermediates[k - 1] is stage k's prediction.
    intermediates: List[Tensor]


class SrmStep(Module):
    def __init__(
        self,
        cross_width: int,
        stage_width: int,
        out_width: int,
        task_channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
    ):
        self.cross_attention = Cbam(cross_width, rng, reduction)
        self.stage_attention = Cbam(stage_width, rng, reduction)
        joined = cross_width + stage_width
        self.refine = Conv2d(joined, out_width, 1, rng)
        self.refine_norm = BatchNorm2d(out_width)
        self.predict = Conv2d(joined, task_channels, 1, rng)

    def forward(self, cross: Tensor, stage_feat: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        if stage_feat is None:
            raise StateError("srm_step needs the stored stage features of the forward pass")
        _, height, width = stage_feat.shape
        cross = bilinear_resize(self.cross_attention(cross), height, width)
        joined = concat([cross, self.stage_attention(stage_feat)], axis=0)
        refined = relu(self.refine_norm(self.refine(joined)))
        return refined, self.predict(joined)


class SpatialRefinement(Module):
    """One SrmStep per decoder stage, stored finest first."""

    def __init__(
        self,
        cross_width: int,
        stage_widths: Sequence[int],
        task_channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
    ):
        count = len(stage_widths)
        self.steps: List[SrmStep] = [None] * count  # type: ignore[list-item]
        incoming = cross_width
        for k in range(count, 0, -1):
            out_width = stage_widths[k - 2] if k > 1 else stage_widths[0]
            self.steps[k - 1] = SrmStep(incoming, stage_widths[k - 1], out_width, task_channels, rng, reduction)
            incoming = out_width

    def forward(self, fused: Tensor, stages: StageFeatures, out_size: Tuple[int, int]) -> TracebackOutput:
        if len(stages) != len(self.steps):
            raise StateError(f"trace-back built for {len(self.steps)} stages, got {len(stages)} stored")
        height, width = out_size
        cross = fused
        predictions: List[Tensor] = [None] * len(self.steps)  # type: ignore[list-item]
        for k in range(len(self.steps), 0, -1):
            cross, pred = self.steps[k - 1](cross, stages.stage(k))
            predictions[k - 1] = bilinear_resize(pred, height, width)
        return TracebackOutput(predictions[0], predictions)


def traceback_run(
    srm: SpatialRefinement, fused: Tensor, stages: StageFeatures, out_size: Tuple[int, int]
) -> TracebackOutput:
    return srm(fused, stages, out_size)
