#!/usr/bin/env python3
"""
Tests for scripts/mtcp_lps.py.

Covers:
- update_weights against its telescoped closed form on random histories
- worked weight and spread examples, including the clamp
- the scheme-selected loss terms
- warmup and trajectory bookkeeping in LossPrioritizer
"""

import math

import numpy as np
import pytest

from mtcp_errors import DomainError, ShapeError
from mtcp_lps import (
    LOSS_FLOOR,
    LossHistory,
    LossPrioritizer,
    LossScheme,
    LpsState,
    SchemeKind,
    epoch_end,
    log_mtl_loss,
    spread_adjust,
    telescoped_weights,
    total_loss,
    update_weights,
    weighted_loss,
)


def history_of(rows, capacity=None):
    rows = np.asarray(rows, dtype=float)
    history = LossHistory(rows.shape[1], capacity or len(rows))
    for row in rows:
        history.record(row)
    return history


def naive_weights(rows, H):
    """Per-task product of epoch-to-epoch ratios over the last H epochs, one scalar at a time."""
    n = len(rows) - 1
    weights = []
    for i in range(len(rows[0])):
        product = 1.0
        for k in range(1, H + 1):
            task = rows[n - k + 1][i] / rows[n - k][i]
            total = sum(rows[n - k + 1]) / sum(rows[n - k])
            product *= task / total
        weights.append(product)
    return np.array(weights)


# ---------------------------------------------------------------------------
# Weight update
# ---------------------------------------------------------------------------


class TestUpdateWeights:
    def test_worked_example(self):
        history = history_of([[4.0, 1.0], [2.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(update_weights(history, 2), [0.625, 2.5])

    def test_warmup_returns_none(self):
        history = history_of([[1.0, 2.0], [1.0, 2.0]])
        assert update_weights(history, 2) is None
        assert telescoped_weights(history, 2) is None

    def test_constant_losses_give_unit_weights(self):
        history = history_of([[3.0, 0.5, 2.0]] * 4)
        np.testing.assert_allclose(update_weights(history, 3), 1.0)

    def test_uses_only_last_h_plus_one_epochs(self):
        full = history_of([[9.0, 1.0], [4.0, 1.0], [2.0, 1.0], [1.0, 1.0]])
        tail = history_of([[4.0, 1.0], [2.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(update_weights(full, 2), update_weights(tail, 2))

    def test_brute_force_matches_telescoped(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            tasks = int(rng.choice([2, 3, 4]))
            H = int(rng.choice([1, 2, 3, 5]))
            rows = rng.uniform(0.05, 10.0, (H + 1 + int(rng.integers(0, 3)), tasks))
            history = history_of(rows)
            expected = naive_weights(rows, H)
            np.testing.assert_allclose(update_weights(history, H), expected, rtol=1e-12)
            np.testing.assert_allclose(telescoped_weights(history, H), expected, rtol=1e-12)

    def test_single_task_weight_is_one(self):
        history = history_of([[5.0], [3.0], [1.0]])
        np.testing.assert_allclose(update_weights(history, 2), [1.0])


class TestLossHistory:
    def test_zero_loss_floored(self):
        history = history_of([[0.0, 1.0]])
        assert history.task_losses()[0, 0] == LOSS_FLOOR

    def test_ring_keeps_capacity(self):
        history = history_of([[float(i), 1.0] for i in range(1, 6)], capacity=3)
        assert len(history) == 3
        assert history.epochs_recorded == 5
        np.testing.assert_array_equal(history.task_losses()[:, 0], [3.0, 4.0, 5.0])
        np.testing.assert_array_equal(history.totals(), [4.0, 5.0, 6.0])

    def test_wrong_task_count(self):
        with pytest.raises(ShapeError):
            LossHistory(2, 3).record([1.0])


# ---------------------------------------------------------------------------
# Spread control
# ---------------------------------------------------------------------------


class TestSpreadAdjust:
    def test_worked_example_with_clamp(self):
        result = spread_adjust([0.625, 2.5], 2.5)
        assert result.mean == pytest.approx(1.5625)
        np.testing.assert_allclose(result.deviations, [-0.9375, 0.9375])
        np.testing.assert_allclose(result.pre_clamp, [-0.78125, 3.90625])
        np.testing.assert_allclose(result.adjusted, [0.0, 3.90625])

    def test_kappa_zero_flattens(self):
        np.testing.assert_array_equal(spread_adjust([0.5, 1.0, 3.0], 0.0).adjusted, 1.5)

    def test_kappa_one_is_identity(self):
        np.testing.assert_array_equal(spread_adjust([0.5, 1.0, 3.0], 1.0).adjusted, [0.5, 1.0, 3.0])

    def test_kappa_zero_and_one_exact_on_random_vectors(self):
        rng = np.random.default_rng(99)
        for _ in range(1000):
            raw = rng.uniform(0.0, 3.0, int(rng.integers(2, 6)))
            np.testing.assert_array_equal(spread_adjust(raw, 1.0).pre_clamp, raw)
            np.testing.assert_array_equal(spread_adjust(raw, 0.0).pre_clamp, np.full_like(raw, raw.mean()))

    @pytest.mark.parametrize("kappa", [0.5, 2.5, 7.5])
    def test_properties(self, kappa):
        rng = np.random.default_rng(int(kappa * 10))
        for _ in range(50):
            raw = rng.uniform(0.0, 3.0, int(rng.integers(2, 5)))
            result = spread_adjust(raw, kappa)
            assert abs(result.pre_clamp.mean() - raw.mean()) <= 1e-12
            assert ((result.adjusted >= 0.0) & (result.adjusted <= 10.0)).all()
            order = np.argsort(raw, kind="stable")
            assert (np.diff(result.adjusted[order]) >= -1e-12).all()

    def test_variance_monotone_in_kappa(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            raw = rng.uniform(0.0, 3.0, int(rng.integers(2, 5)))
            low, high = sorted(rng.uniform(0.0, 10.0, 2))
            assert spread_adjust(raw, low).pre_clamp.var() <= spread_adjust(raw, high).pre_clamp.var() + 1e-12
            order = np.argsort(raw, kind="stable")
            np.testing.assert_array_equal(np.argsort(spread_adjust(raw, high).pre_clamp, kind="stable"), order)

    def test_upper_clamp(self):
        np.testing.assert_allclose(spread_adjust([0.0, 10.0], 3.0).adjusted, [0.0, 10.0])

    def test_negative_kappa(self):
        with pytest.raises(DomainError):
            spread_adjust([1.0, 2.0], -0.1)


class TestEpochEnd:
    def test_warmup_keeps_unit_weights(self):
        state = LpsState(2, history_length=2)
        history = history_of([[4.0, 1.0], [2.0, 1.0]], capacity=3)
        np.testing.assert_array_equal(epoch_end(state, history), [1.0, 1.0])
        assert state.raw is None

    def test_first_update_after_warmup(self):
        state = LpsState(2, history_length=2, kappa=2.5)
        history = history_of([[4.0, 1.0], [2.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(epoch_end(state, history), [0.0, 3.90625])
        np.testing.assert_allclose(state.raw, [0.625, 2.5])
        assert state.mean == pytest.approx(1.5625)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


class TestLossTerms:
    def test_equal_weighting(self):
        scheme = LossScheme.from_name("ew")
        assert total_loss(scheme, [9.0, 9.0], [2.0, 4.0], [[], []], []) == pytest.approx(3.0)

    def test_log_smoothing(self):
        assert log_mtl_loss([1.0, 1.0], [2.0, 3.0]) == pytest.approx(math.log(2) * 5)

    def test_log_weighted(self):
        assert log_mtl_loss([math.e - 1, 0.0], [1.0, 5.0]) == pytest.approx(1.0)

    def test_total_with_intermediates_and_coherence(self):
        scheme = LossScheme.from_name("ew")
        total = total_loss(scheme, [1.0, 1.0], [2.0, 4.0], [[0.25, 0.25], [0.25, 0.25]], [0.25, 0.75], 1.0)
        assert total == pytest.approx(5.0)

    def test_lambda_scales_coherence(self):
        scheme = LossScheme.from_name("prioritization-only")
        total = total_loss(scheme, [1.0, 2.0], [1.0, 1.0], [[], []], [1.0, 1.0], 0.5)
        assert total == pytest.approx(4.0)

    def test_manual_weights(self):
        scheme = LossScheme.from_name("ma", [0.2, 0.8])
        assert total_loss(scheme, [], [10.0, 5.0], [[], []], []) == pytest.approx(6.0)

    def test_ragged_intermediates(self):
        with pytest.raises(ShapeError):
            total_loss(LossScheme.from_name("lps"), [1.0, 1.0], [1.0, 1.0], [[1.0], []], [])

    def test_negative_weights(self):
        with pytest.raises(DomainError):
            weighted_loss([-1.0, 1.0], [1.0, 1.0])
        with pytest.raises(DomainError):
            LossScheme.from_name("ma", [-0.5])

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            LossScheme.from_name("gradnorm")


# ---------------------------------------------------------------------------
# Prioritizer
# ---------------------------------------------------------------------------


class TestLossPrioritizer:
    def test_warmup_then_update(self):
        prioritizer = LossPrioritizer(LossScheme.from_name("lps"), 2, history_length=2, kappa=2.5)
        first = prioritizer.end_epoch(0, [4.0, 1.0])
        second = prioritizer.end_epoch(1, [2.0, 1.0])
        assert first.warmup and second.warmup
        assert second.weights == (1.0, 1.0)
        third = prioritizer.end_epoch(2, [1.0, 1.0])
        assert not third.warmup
        np.testing.assert_allclose(third.raw, [0.625, 2.5])
        np.testing.assert_allclose(prioritizer.current_weights(), [0.0, 3.90625])
        assert [r.epoch for r in prioritizer.trajectory] == [0, 1, 2]

    def test_static_schemes_never_warm_up(self):
        prioritizer = LossPrioritizer(LossScheme.from_name("ew"), 3)
        record = prioritizer.end_epoch(0, [1.0, 2.0, 3.0])
        assert not record.warmup
        np.testing.assert_allclose(record.weights, 1 / 3)

    def test_log_smoothing_weights(self):
        prioritizer = LossPrioritizer(LossScheme.from_name("log-smoothing"), 2)
        loss = prioritizer.loss([1.0, 1.0], [[], []], [], 1.0)
        assert loss == pytest.approx(2 * math.log(2))

    def test_manual_weight_count(self):
        with pytest.raises(ShapeError):
            LossPrioritizer(LossScheme.from_name("ma", [1.0]), 2)

    def test_dynamic_kinds(self):
        assert SchemeKind.LPS.dynamic and SchemeKind.PRIORITIZATION_ONLY.dynamic
        assert not SchemeKind.EW.dynamic
