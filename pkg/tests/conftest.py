#!/usr/bin/env python3
"""
Shared pytest fixtures and configuration for the test suite.

Centralises:
- sys.path setup so every test file can ``import mtcp_tensor`` (and the other
  scripts) without its own ``sys.path.insert`` hack.
- Small run configurations that train in seconds.
- Numeric helpers shared by the gradient and brute-force tests.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# ---------------------------------------------------------------------------
# Path setup (replaces per-file sys.path.insert hacks)
# ---------------------------------------------------------------------------

_SCRIPTS_DIR = str(Path(__file__).resolve().parent.parent / "scripts")
if _SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, _SCRIPTS_DIR)

from mtcp_config import RunConfig, apply_overrides  # noqa: E402
from mtcp_gradsuite import tiny_config as gradsuite_tiny_config  # noqa: E402
from mtcp_tensor import Tensor, tsum  # noqa: E402

# ---------------------------------------------------------------------------
# Shared constants
# ---------------------------------------------------------------------------

REPO_ROOT = Path(__file__).resolve().parent.parent
SCHEMAS_DIR = REPO_ROOT / "schemas"

GRAD_SEEDS = [0, 1, 2, 3, 4]

# Trains in a few seconds: 16x16 images, two decoder stages, four samples.
SMALL_RUN = {
    "epochs": 2,
    "batch_size": 2,
    "backbone.channels": 8,
    "backbone.num_queries": 2,
    "decoder.num_stages": 2,
    "decoder.blocks_per_stage": [1, 1],
    "decoder.window": 2,
    "decoder.heads": 2,
    "cfm.reduction": 2,
    "data.image_size": 16,
    "data.train_count": 4,
    "data.val_count": 2,
    "data.max_shapes": 3,
}


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


@pytest.fixture()
def small_config(tmp_path: Path) -> RunConfig:
    """A valid config that trains end-to-end in seconds, writing under tmp_path."""
    return apply_overrides(RunConfig(), dict(SMALL_RUN, output_dir=str(tmp_path / "run")))


@pytest.fixture()
def tiny_config() -> RunConfig:
    """Model-only config at gradient-suite size, below the training minimum."""
    return gradsuite_tiny_config()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Contract ``out`` with a fixed random projection into a scalar."""
    return tsum(out * weights)
