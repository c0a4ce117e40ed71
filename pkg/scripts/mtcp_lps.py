"""
Loss prioritization: loss weighting schemes and the epoch-wise weight update.

At every epoch end the per-task epoch-mean losses are appended to a
LossHistory. Once H+1 epochs exist, raw weights are the ratio of each task's
relative loss decrease over the last H epochs to the total's; the spread of
the raw weights around their cross-task mean is then scaled by kappa and the
result clamped. Before that the weights stay at 1 (warmup).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np

from mtcp_errors import DomainError, ShapeError
from mtcp_tensor import Tensor

logger = logging.getLogger(__name__)

LOSS_FLOOR = 1e-8


class SchemeKind(Enum):
    EW = "ew"
    MA = "ma"
    LOG_SMOOTHING = "log-smoothing"
    PRIORITIZATION_ONLY = "prioritization-only"
    LPS = "lps"

    @property
    def dynamic(self) -> bool:
        return self in (SchemeKind.PRIORITIZATION_ONLY, SchemeKind.LPS)


@dataclass(frozen=True)
class LossScheme:
    kind: SchemeKind
    manual_weights: Tuple[float, ...] = ()

    def __post_init__(self):
        if any(w < 0 for w in self.manual_weights):
            raise DomainError(f"manual weights must be non-negative, got {self.manual_weights}")

    @classmethod
    def from_name(cls, name: str, manual_weights: Sequence[float] = ()) -> LossScheme:
        return cls(SchemeKind(name), tuple(float(w) for w in manual_weights))


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _check_lengths(weights: Sequence[float], losses: Sequence) -> None:
    if len(weights) != len(losses):
        raise ShapeError(f"{len(weights)} weights for {len(losses)} task losses")


def weighted_loss(weights: Sequence[float], losses: Sequence):
    """Σ w_i L_i (works on Tensors and plain floats alike)."""
    _check_lengths(weights, losses)
    if any(w < 0 for w in weights):
        raise DomainError(f"weights must be non-negative, got {list(weights)}")
    total = 0.0
    for w, loss in zip(weights, losses):
        total = total + loss * float(w)
    return total


def log_mtl_loss(weights: Sequence[float], losses: Sequence):
    """Σ log(1 + w_i) L_i."""
    _check_lengths(weights, losses)
    if any(w < 0 for w in weights):
        raise DomainError(f"log-scaled weights must be non-negative, got {list(weights)}")
    total = 0.0
    for w, loss in zip(weights, losses):
        total = total + loss * math.log1p(float(w))
    return total


def total_loss(
    scheme: LossScheme,
    weights: Sequence[float],
    task_losses: Sequence,
    intermediate_losses: Sequence[Sequence],
    coherence_losses: Sequence,
    lambda_cos: float = 1.0,
):
    """Scheme-selected main term + unweighted intermediate sum + λ_cos·Σ coherence."""
    count = len(task_losses)
    if len(intermediate_losses) != count:
        raise ShapeError(f"intermediate loss grid has {len(intermediate_losses)} rows for {count} tasks")
    depths = {len(row) for row in intermediate_losses}
    if len(depths) > 1:
        raise ShapeError(f"intermediate loss grid is ragged: row lengths {sorted(depths)}")
    kind = scheme.kind
    if kind is SchemeKind.EW:
        main = weighted_loss([1.0 / count] * count, task_losses)
    elif kind is SchemeKind.MA:
        main = weighted_loss(scheme.manual_weights, task_losses)
    elif kind is SchemeKind.LOG_SMOOTHING:
        main = log_mtl_loss([1.0] * count, task_losses)
    elif kind is SchemeKind.PRIORITIZATION_ONLY:
        main = weighted_loss(weights, task_losses)
    else:
        main = log_mtl_loss(weights, task_losses)
    total = main
    for row in intermediate_losses:
        for loss in row:
            total = total + loss
    for loss in coherence_losses:
        total = total + loss * lambda_cos
    return total


# ---------------------------------------------------------------------------
# History and weight update
# ---------------------------------------------------------------------------


class LossHistory:
    """Ring of per-epoch task losses; totals are the per-epoch task sums."""

    def __init__(self, num_tasks: int, capacity: int):
        self.num_tasks = num_tasks
        self.capacity = capacity
        self.epochs_recorded = 0
        self._records: Deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._records)

    def record(self, task_losses: Sequence[float]) -> None:
        if len(task_losses) != self.num_tasks:
            raise ShapeError(f"history tracks {self.num_tasks} tasks, got {len(task_losses)} losses")
        self._records.append(np.maximum(np.asarray(task_losses, dtype=np.float64), LOSS_FLOOR))
        self.epochs_recorded += 1

    def task_losses(self) -> np.ndarray:
        """Epochs × tasks, oldest first."""
        return np.array(self._records).reshape(len(self._records), self.num_tasks)

    def totals(self) -> np.ndarray:
        return self.task_losses().sum(axis=1)


def update_weights(history: LossHistory, H: int) -> Optional[np.ndarray]:
    """Raw weights from the last H epoch-to-epoch ratios, or None during warmup."""
    if len(history) < H + 1:
        return None
    losses = history.task_losses()[-(H + 1) :]
    totals = losses.sum(axis=1)
    task_ratio = np.ones(history.num_tasks)
    total_ratio = 1.0
    for k in range(1, H + 1):
        task_ratio *= losses[H - k + 1] / losses[H - k]
        total_ratio *= totals[H - k + 1] / totals[H - k]
    return task_ratio / total_ratio


def telescoped_weights(history: LossHistory, H: int) -> Optional[np.ndarray]:
    """Closed form of update_weights: (L_i^n / L_i^{n-H}) / (L^n / L^{n-H})."""
    if len(history) < H + 1:
        return None
    losses = history.task_losses()
    totals = losses.sum(axis=1)
    return (losses[-1] / losses[-(H + 1)]) / (totals[-1] / totals[-(H + 1)])


@dataclass
class SpreadResult:
    mean: float
    deviations: np.ndarray
    pre_clamp: np.ndarray
    adjusted: np.ndarray


def spread_adjust(raw: Sequence[float], kappa: float, clamp: Tuple[float, float] = (0.0, 10.0)) -> SpreadResult:
    if kappa < 0:
        raise DomainError(f"kappa must be >= 0, got {kappa}")
    raw = np.asarray(raw, dtype=np.float64)
    mu = float(raw.mean())
    deviations = raw - mu
    # exact identity at kappa == 1
    pre_clamp = raw.copy() if kappa == 1.0 else mu + kappa * deviations
    return SpreadResult(mu, deviations, pre_clamp, np.clip(pre_clamp, clamp[0], clamp[1]))


@dataclass
class LpsState:
    num_tasks: int
    history_length: int = 3
    kappa: float = 2.5
    clamp_min: float = 0.0
    clamp_max: float = 10.0
    raw: Optional[np.ndarray] = None
    mean: Optional[float] = None
    deviations: Optional[np.ndarray] = None
    adjusted: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.adjusted is None:
            self.adjusted = np.ones(self.num_tasks)


def epoch_end(state: LpsState, history: LossHistory) -> np.ndarray:
    """Advance the LPS state after an epoch's losses were recorded; return w′."""
    raw = update_weights(history, state.history_length)
    if raw is None:
        state.raw, state.mean, state.deviations = None, None, None
        state.adjusted = np.ones(state.num_tasks)
        logger.debug("lps warmup: %d/%d epochs of history", len(history), state.history_length + 1)
        return state.adjusted.copy()
    result = spread_adjust(raw, state.kappa, (state.clamp_min, state.clamp_max))
    if not np.array_equal(result.pre_clamp, result.adjusted):
        logger.debug("lps clamped %s to %s", result.pre_clamp, result.adjusted)
    state.raw = raw
    state.mean = result.mean
    state.deviations = result.deviations
    state.adjusted = result.adjusted
    return state.adjusted.copy()


@dataclass
class WeightRecord:
    epoch: int
    warmup: bool
    raw: Tuple[float, ...]
    weights: Tuple[float, ...]


class LossPrioritizer:
    """Owns the scheme, the loss history and the weight trajectory of one run."""

    def __init__(
        self,
        scheme: LossScheme,
        num_tasks: int,
        history_length: int = 3,
        kappa: float = 2.5,
        clamp: Tuple[float, float] = (0.0, 10.0),
    ):
        if scheme.kind is SchemeKind.MA and len(scheme.manual_weights) != num_tasks:
            raise ShapeError(f"{len(scheme.manual_weights)} manual weights for {num_tasks} tasks")
        self.scheme = scheme
        self.num_tasks = num_tasks
        self.history = LossHistory(num_tasks, capacity=history_length + 1)
        self.state = LpsState(num_tasks, history_length, kappa, clamp[0], clamp[1])
        self.trajectory: List[WeightRecord] = []

    def current_weights(self) -> np.ndarray:
        """Weights the main loss term applies during the coming epoch."""
        kind = self.scheme.kind
        if kind is SchemeKind.EW:
            return np.full(self.num_tasks, 1.0 / self.num_tasks)
        if kind is SchemeKind.MA:
            return np.asarray(self.scheme.manual_weights, dtype=np.float64)
        if kind is SchemeKind.LOG_SMOOTHING:
            return np.ones(self.num_tasks)
        return self.state.adjusted.copy()

    def loss(self, task_losses, intermediate_losses, coherence_losses, lambda_cos: float):
        return total_loss(
            self.scheme, self.current_weights(), task_losses, intermediate_losses, coherence_losses, lambda_cos
        )

    def end_epoch(self, epoch: int, task_losses: Sequence[float]) -> WeightRecord:
        self.history.record(task_losses)
        if self.scheme.kind.dynamic:
            epoch_end(self.state, self.history)
        warmup = self.scheme.kind.dynamic and self.state.raw is None
        raw = self.state.raw if self.state.raw is not None else np.ones(self.num_tasks)
        record = WeightRecord(
            epoch, warmup, tuple(float(x) for x in raw), tuple(float(x) for x in self.current_weights())
        )
        self.trajectory.append(record)
        return record
