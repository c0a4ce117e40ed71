"""
The assembled MT-CP network and the per-task loss wiring.

Forward order: backbone → per-task decoder (+ pyramid fusion) → coherence
fusion across tasks → spatial refinement trace-back. Both cross-task blocks
can be switched off independently for the architecture ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from mtcp_backbone import Backbone, BackboneOutput
from mtcp_coherence import CoherenceFusion
from mtcp_config import RunConfig
from mtcp_decoders import TaskDecoder
from mtcp_errors import ConfigurationError
from mtcp_nn import Conv2d, Module
from mtcp_tensor import Tensor, bilinear_resize, cross_entropy, l1, l1_normalized
from mtcp_traceback import SpatialRefinement


@dataclass(frozen=True)
class TaskSpec:
    name: str
    loss: str
    metric: str
    channels: int


TASK_SPECS: Dict[str, TaskSpec] = {
    "seg": TaskSpec("seg", "cross_entropy", "miou", 6),
    "depth": TaskSpec("depth", "l1", "rmse", 1),
    "normals": TaskSpec("normals", "l1_normalized", "merr", 3),
}


def task_specs(names: Sequence[str]) -> List[TaskSpec]:
    try:
        return [TASK_SPECS[name] for name in names]
    except KeyError as exc:
        raise ConfigurationError(f"unknown task {exc.args[0]!r}; known: {sorted(TASK_SPECS)}") from None


def task_target(task: TaskSpec, sample) -> np.ndarray:
    if task.name == "seg":
        return sample.seg_labels
    if task.name == "depth":
        return sample.depth[None]
    return sample.normals


def task_loss(task: TaskSpec, prediction: Tensor, target: np.ndarray) -> Tensor:
    if task.loss == "cross_entropy":
        return cross_entropy(prediction, target)
    if task.loss == "l1":
        return l1(prediction, target)
    return l1_normalized(prediction, target)


@dataclass
class ModelOutput:
    predictions: Dict[str, Tensor]
    intermediates: Dict[str, List[Tensor]] = field(default_factory=dict)
    coherence: Dict[str, Tensor] = field(default_factory=dict)
    backbone: BackboneOutput = None  # type: ignore[assignment]


class MtcpModel(Module):
    def __init__(self, config: RunConfig, rng: np.random.Generator):
        self.tasks = task_specs(config.tasks)
        self.cfm_enabled = config.cfm.enabled
        self.srm_enabled = config.srm.enabled
        channels = config.backbone.channels
        widths = config.stage_widths()
        reduction = config.cfm.reduction
        self.backbone = Backbone(config.backbone, rng)
        self.decoders = {
            t.name: TaskDecoder(
                channels,
                widths,
                config.blocks_per_stage(),
                config.decoder.window,
                config.decoder.heads,
                config.decoder.mlp_ratio,
                rng,
            )
            for t in self.tasks
        }
        if self.cfm_enabled:
            if len(self.tasks) < 2:
                raise ConfigurationError("coherence fusion needs at least two tasks")
            self.cfms = {
                t.name: CoherenceFusion(channels, len(self.tasks) - 1, rng, reduction, config.cfm.residual)
                for t in self.tasks
            }
        if self.srm_enabled:
            self.srms = {t.name: SpatialRefinement(channels, widths, t.channels, rng, reduction) for t in self.tasks}
        else:
            self.heads = {t.name: Conv2d(channels, t.channels, 1, rng) for t in self.tasks}

    def forward(self, image: Tensor) -> ModelOutput:
        out_size: Tuple[int, int] = (image.shape[1], image.shape[2])
        shared = self.backbone(image)
        decoded = {name: decoder(shared.fused) for name, decoder in self.decoders.items()}
        output = ModelOutput(predictions={}, backbone=shared)
        for task in self.tasks:
            name = task.name
            fused = decoded[name].fused
            if self.cfm_enabled:
                aux = [decoded[other.name].fused for other in self.tasks if other.name != name]
                cfm_out = self.cfms[name](fused, aux)
                fused = cfm_out.fused
                output.coherence[name] = cfm_out.coherence
            if self.srm_enabled:
                trace = self.srms[name](fused, decoded[name].stages, out_size)
                output.predictions[name] = trace.final
                output.intermediates[name] = trace.intermediates
            else:
                output.predictions[name] = bilinear_resize(self.heads[name](fused), *out_size)
                output.intermediates[name] = []
        return output
