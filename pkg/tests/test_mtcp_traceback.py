#!/usr/bin/env python3
"""Tests for scripts/mtcp_traceback.py."""

import numpy as np
import pytest

from mtcp_decoders import StageFeatures
from mtcp_errors import StateError
from mtcp_tensor import Tensor
from mtcp_traceback import SpatialRefinement, SrmStep, traceback_run


def pyramid(rng, width=8, sizes=(8, 4, 2)):
    return StageFeatures([Tensor(rng.standard_normal((width, s, s))) for s in sizes])


class TestSpatialRefinement:
    def test_one_prediction_per_stage(self, rng):
        srm = SpatialRefinement(8, (8, 8, 8), 3, rng, reduction=2)
        out = traceback_run(srm, Tensor(rng.standard_normal((8, 8, 8))), pyramid(rng), (16, 16))
        assert len(out.intermediates) == 3
        assert all(p.shape == (3, 16, 16) for p in out.intermediates)
        assert out.final is out.intermediates[0]

    def test_single_stage(self, rng):
        srm = SpatialRefinement(8, (8,), 1, rng, reduction=2)
        out = srm(Tensor(rng.standard_normal((8, 4, 4))), pyramid(rng, sizes=(4,)), (8, 8))
        assert len(out.intermediates) == 1
        assert out.final.shape == (1, 8, 8)

    def test_mixed_stage_widths(self, rng):
        srm = SpatialRefinement(4, (4, 8), 6, rng, reduction=2)
        stages = StageFeatures([Tensor(rng.standard_normal((4, 4, 4))), Tensor(rng.standard_normal((8, 2, 2)))])
        out = srm(Tensor(rng.standard_normal((4, 4, 4))), stages, (8, 8))
        assert out.final.shape == (6, 8, 8)

    def test_stage_count_mismatch(self, rng):
        srm = SpatialRefinement(8, (8, 8, 8), 3, rng, reduction=2)
        with pytest.raises(StateError):
            srm(Tensor(np.zeros((8, 8, 8))), pyramid(rng, sizes=(8, 4)), (16, 16))


class TestSrmStep:
    def test_refined_at_stage_resolution(self, rng):
        step = SrmStep(8, 4, 6, 3, rng, reduction=2)
        refined, pred = step(Tensor(rng.standard_normal((8, 2, 2))), Tensor(rng.standard_normal((4, 4, 4))))
        assert refined.shape == (6, 4, 4)
        assert pred.shape == (3, 4, 4)
        assert (refined.data >= 0).all()

    def test_missing_stage_features(self, rng):
        step = SrmStep(4, 4, 4, 1, rng, reduction=2)
        with pytest.raises(StateError):
            step(Tensor(np.zeros((4, 2, 2))), None)
