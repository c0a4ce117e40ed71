"""
Block-level finite-difference suite.

Each check builds one differentiable block from a seeded generator, contracts
its output with a fixed random projection and compares tape gradients to
central differences. Used by ``mtcp gradcheck`` and the test-suite.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from mtcp_coherence import AuxiliaryGate, Cbam, CoherenceFusion, coherence_loss, gram_fuse
from mtcp_config import RunConfig, apply_overrides, validate
from mtcp_decoders import WindowAttention
from mtcp_errors import ConfigurationError
from mtcp_model import MtcpModel
from mtcp_nn import BatchNorm2d
from mtcp_tensor import Tensor, conv2d, grad_check, tsum
from mtcp_traceback import SrmStep

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-6
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

TINY_MODEL = {
    "backbone.channels": 4,
    "backbone.num_queries": 2,
    "decoder.num_stages": 2,
    "decoder.blocks_per_stage": [1, 1],
    "decoder.window": 2,
    "decoder.heads": 2,
    "cfm.reduction": 2,
    "data.image_size": 16,
}


@dataclass
class GradResult:
    block: str
    seed: int
    error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def projection(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return rng.standard_normal(tuple(shape))


def project(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(out * weights)


def randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Replace zero-initialised weights so no output is identically constant."""
    for _, param in module.named_parameters():
        if not np.any(param.data):
            param.data[...] = rng.standard_normal(param.shape) * scale


def tiny_config() -> RunConfig:
    config = apply_overrides(RunConfig(), TINY_MODEL)
    validate(config, allow_tiny=True)
    return config


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 7, 7)))
    kernel = Tensor(rng.standard_normal((4, 3, 3, 3)))
    weights = projection(rng, (4, 4, 4))
    err_x = grad_check(lambda t: project(conv2d(t, kernel, stride=2, padding=1), weights), x, STEP, FLOOR)
    err_k = grad_check(lambda t: project(conv2d(x, t, stride=2, padding=1), weights), kernel, STEP, FLOOR)
    return max(err_x, err_k)


def check_batchnorm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    norm = BatchNorm2d(3)
    randomize(norm, rng)
    norm.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
    x = Tensor(rng.standard_normal((3, 4, 4)) * 2.0 + 1.0)
    weights = projection(rng, (3, 4, 4))
    err_x = grad_check(lambda t: project(norm(t), weights), x, STEP, FLOOR)
    err_g = grad_check(lambda t: project(norm(x), weights), norm.gamma, STEP, FLOOR)
    return max(err_x, err_g)


def check_attention(seed: int) -> float:
    rng = np.random.default_rng(seed)
    attention = WindowAttention(4, 2, rng)
    randomize(attention, rng)
    tokens = Tensor(rng.standard_normal((2, 4, 4)))
    weights = projection(rng, (2, 4, 4))
    return grad_check(lambda t: project(attention(t), weights), tokens, STEP, FLOOR)


def check_cbam(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cbam = Cbam(4, rng, reduction=2)
    x = Tensor(rng.standard_normal((4, 3, 3)))
    weights = projection(rng, (4, 3, 3))
    return grad_check(lambda t: project(cbam(t), weights), x, STEP, FLOOR)


def check_gate(seed: int) -> float:
    rng = np.random.default_rng(seed)
    gate = AuxiliaryGate(3, 2, rng)
    first = Tensor(rng.standard_normal((3, 3, 3)))
    second = Tensor(rng.standard_normal((3, 3, 3)))
    weights = projection(rng, (3, 3, 3))
    return grad_check(lambda t: project(gate([t, second]), weights), first, STEP, FLOOR)


def check_gram_fuse(seed: int) -> float:
    rng = np.random.default_rng(seed)
    main = Tensor(rng.standard_normal((3, 3, 4)))
    aux = Tensor(rng.standard_normal((3, 3, 4)))
    weights = projection(rng, (3, 3, 4))
    err_main = grad_check(lambda t: project(gram_fuse(t, aux), weights), main, STEP, FLOOR)
    err_aux = grad_check(lambda t: project(gram_fuse(main, t), weights), aux, STEP, FLOOR)
    return max(err_main, err_aux)


def check_coherence_loss(seed: int) -> float:
    rng = np.random.default_rng(seed)
    main = Tensor(rng.standard_normal((3, 4, 4)))
    aux = Tensor(rng.standard_normal((3, 4, 4)))
    return grad_check(lambda t: coherence_loss(t, aux), main, STEP, FLOOR)


def check_cfm(seed: int) -> float:
    rng = np.random.default_rng(seed)
    cfm = CoherenceFusion(4, 2, rng, reduction=2)
    main = Tensor(rng.standard_normal((4, 4, 4)))
    aux = [Tensor(rng.standard_normal((4, 4, 4))) for _ in range(2)]
    weights = projection(rng, (4, 4, 4))

    def objective(t: Tensor) -> Tensor:
        out = cfm(t, aux)
        return project(out.fused, weights) + out.coherence

    return grad_check(objective, main, STEP, FLOOR)


def check_srm_step(seed: int) -> float:
    rng = np.random.default_rng(seed)
    step = SrmStep(4, 4, 4, 3, rng, reduction=2)
    cross = Tensor(rng.standard_normal((4, 2, 2)))
    stage = Tensor(rng.standard_normal((4, 4, 4)))
    refined_weights = projection(rng, (4, 4, 4))
    pred_weights = projection(rng, (3, 4, 4))

    def objective(t: Tensor) -> Tensor:
        refined, pred = step(t, stage)
        return project(refined, refined_weights) + project(pred, pred_weights)

    return grad_check(objective, cross, STEP, FLOOR)


def check_model(seed: int) -> float:
    """Full model at 16x16 on the pyramid gates and one prediction bias."""
    rng = np.random.default_rng(seed)
    config = tiny_config()
    model = MtcpModel(config, rng)
    size = config.data.image_size
    image = Tensor(rng.uniform(0.0, 1.0, (3, size, size)))
    weights: Dict[str, np.ndarray] = {task.name: projection(rng, (task.channels, size, size)) for task in model.tasks}

    def objective(_: Tensor) -> Tensor:
        out = model(image)
        total = None
        for task in model.tasks:
            term = project(out.predictions[task.name], weights[task.name]) * (1.0 / (size * size))
            total = term if total is None else total + term
        for term in out.coherence.values():
            total = total + term
        return total

    first = model.tasks[0].name
    gate_logits = model.decoders[first].dfpn.gate_logits
    gate_logits.data[...] = rng.standard_normal(gate_logits.shape) * 0.5
    targets = [gate_logits, model.srms[first].steps[0].predict.bias]
    return max(grad_check(objective, param, STEP, FLOOR) for param in targets)


CHECKS: Dict[str, Callable[[int], float]] = {
    "conv": check_conv,
    "batchnorm": check_batchnorm,
    "attention": check_attention,
    "cbam": check_cbam,
    "gate": check_gate,
    "gram_fuse": check_gram_fuse,
    "coherence_loss": check_coherence_loss,
    "cfm": check_cfm,
    "srm_step": check_srm_step,
    "model": check_model,
}


def run_suite(seeds: Sequence[int] = DEFAULT_SEEDS, blocks: Sequence[str] = ()) -> List[GradResult]:
    names = list(blocks) or list(CHECKS)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ConfigurationError(f"unknown gradient checks: {unknown}; known: {sorted(CHECKS)}")
    results = []
    for name in names:
        for seed in seeds:
            result = GradResult(name, seed, CHECKS[name](seed))
            logger.debug("gradcheck %s seed %d: %.3e", name, seed, result.error)
            results.append(result)
    return results
