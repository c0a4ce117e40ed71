#!/usr/bin/env python3
"""
Tests for scripts/mtcp_harness.py.

Training runs use the SMALL_RUN geometry from conftest (16x16 images, four
training samples) so a full run with export takes a few seconds.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL_RUN
from mtcp_benchkit import SyntheticDataset
from mtcp_config import DatasetConfig, RunConfig, apply_overrides
from mtcp_errors import ConfigurationError, NumericError
from mtcp_harness import (
    CHECKPOINT,
    CONFIG_JSON,
    METRICS_CSV,
    SUMMARY_FORMAT,
    SUMMARY_JSON,
    TRAJECTORY_CSV,
    AblationGrid,
    Variant,
    ablate,
    available_grids,
    evaluate,
    load_grid,
    load_run,
    parse_grid,
    slugify,
    task_metric,
    train,
    weight_variance,
)
from mtcp_lps import WeightRecord
from mtcp_model import task_specs, task_target


def small(tmp_path: Path, **overrides) -> RunConfig:
    values = dict(SMALL_RUN, output_dir=str(tmp_path))
    values.update(overrides)
    return apply_overrides(RunConfig(), values)


def read_csv(path: Path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("run")
    config = small(out_dir)
    return config, train(config), out_dir


# ---------------------------------------------------------------------------
# Training and export
# ---------------------------------------------------------------------------


class TestTrain:
    def test_rows_and_files(self, trained):
        config, record, out_dir = trained
        assert [row.epoch for row in record.rows] == [1, 2]
        for name in (METRICS_CSV, TRAJECTORY_CSV, SUMMARY_JSON, CHECKPOINT, CONFIG_JSON):
            assert (out_dir / name).is_file(), name

    def test_metrics_csv_columns(self, trained):
        _, _, out_dir = trained
        rows = read_csv(out_dir / METRICS_CSV)
        assert len(rows) == 2
        assert list(rows[0]) == [
            "epoch",
            "loss_seg",
            "loss_depth",
            "loss_normals",
            "weight_seg",
            "weight_depth",
            "weight_normals",
            "miou",
            "rmse",
            "merr",
            "coherence",
            "total",
            "score",
        ]
        assert all(np.isfinite(float(rows[-1][k])) for k in ("total", "score", "coherence"))

    def test_lps_warmup_keeps_unit_weights(self, trained):
        _, record, out_dir = trained
        assert all(set(row.weights.values()) == {1.0} for row in record.rows)
        trajectory = read_csv(out_dir / TRAJECTORY_CSV)
        assert [row["warmup"] for row in trajectory] == ["1", "1"]

    def test_summary(self, trained):
        config, record, out_dir = trained
        summary = json.loads((out_dir / SUMMARY_JSON).read_text())
        assert summary["format"] == SUMMARY_FORMAT
        assert summary["epochs"] == 2
        assert summary["initial"]["metrics"].keys() == summary["final"]["metrics"].keys()
        assert summary["final"]["score"] == pytest.approx(record.final.score)
        assert 1 <= summary["best"]["epoch"] <= 2
        assert summary["weight_variance"] == 0.0

    def test_checkpoint_reproduces_final_metrics(self, trained):
        _, record, out_dir = trained
        config, checkpoint = load_run(out_dir)
        result = evaluate(checkpoint, SyntheticDataset(config.data, config.data_seed, "val"), config)
        for name, value in record.final.metrics.items():
            assert result.metrics[name] == pytest.approx(value, abs=1e-12)

    def test_deterministic(self, trained, tmp_path):
        config, _, out_dir = trained
        train(config, tmp_path / "again")
        assert (tmp_path / "again" / METRICS_CSV).read_text() == (out_dir / METRICS_CSV).read_text()

    def test_equal_weighting(self, tmp_path):
        record = train(small(tmp_path, **{"lps.scheme": "ew", "epochs": 1}))
        assert record.final.weights == pytest.approx({"seg": 1 / 3, "depth": 1 / 3, "normals": 1 / 3})

    def test_weights_update_after_history(self, tmp_path):
        record = train(small(tmp_path, **{"epochs": 3, "lps.history": 1}), export=False)
        assert record.trajectory[0].warmup
        assert not record.trajectory[1].warmup
        assert record.rows[2].weights == pytest.approx(dict(zip(record.tasks, record.trajectory[1].weights)))
        assert not (tmp_path / METRICS_CSV).exists()

    def test_single_task_without_fusion(self, tmp_path):
        record = train(small(tmp_path, **{"tasks": ["depth"], "cfm.enabled": False, "epochs": 1}))
        assert list(record.final.metrics) == ["rmse"]
        assert record.final.coherence is None

    def test_invalid_config_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            train(small(tmp_path, **{"data.image_size": 18}))

    def test_numeric_failure_propagates(self, tmp_path, monkeypatch, caplog):
        import mtcp_harness

        def explode(*args, **kwargs):
            raise NumericError("non-finite value in exp")

        monkeypatch.setattr(mtcp_harness, "sample_loss", explode)
        with pytest.raises(NumericError):
            train(small(tmp_path, epochs=1))
        assert "numeric failure at epoch 1" in caplog.text


class TestTaskMetric:
    def test_untrained_model_near_chance(self, trained):
        _, record, _ = trained
        assert record.initial.metrics["miou"] <= 0.3

    def test_oracle_predictions(self):
        samples = list(SyntheticDataset(DatasetConfig(image_size=16, train_count=2, val_count=0), 0))
        for task in task_specs(["seg", "depth", "normals"]):
            targets = [task_target(task, s) for s in samples]
            if task.name == "seg":
                predictions = [np.eye(task.channels)[t].transpose(2, 0, 1) for t in targets]
            else:
                predictions = [t.astype(float) for t in targets]
            expected = 1.0 if task.metric == "miou" else 0.0
            assert task_metric(task, predictions, targets) == pytest.approx(expected, abs=1e-4)


class TestWeightVariance:
    def test_mean_of_per_epoch_variance(self):
        trajectory = [
            WeightRecord(1, False, (1.0, 1.0), (1.0, 3.0)),
            WeightRecord(2, False, (1.0, 1.0), (2.0, 2.0)),
        ]
        assert weight_variance(trajectory) == pytest.approx(0.5)

    def test_empty(self):
        assert weight_variance([]) is None


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


class TestGrids:
    @pytest.mark.parametrize("name", ["architecture", "schemes", "kappa", "stl"])
    def test_built_in_grids(self, name):
        grid = load_grid(name)
        assert grid.seeds == (0, 1, 2, 3, 4)
        assert len(grid.variants) >= 2
        base = RunConfig()
        for variant in grid.variants:
            apply_overrides(base, variant.overrides)

    def test_available(self):
        assert {"architecture", "schemes", "kappa", "stl"} <= set(available_grids())

    def test_unknown_grid(self):
        with pytest.raises(ConfigurationError, match="unknown ablation grid"):
            load_grid("no-such-grid")

    def test_grid_from_path(self, tmp_path):
        path = tmp_path / "mine.yaml"
        path.write_text("seeds: [7]\nvariants:\n  - name: base\n")
        grid = load_grid(str(path))
        assert (grid.name, grid.seeds, grid.variants) == ("mine", (7,), (Variant("base"),))

    @pytest.mark.parametrize(
        "payload",
        [
            {"variants": []},
            {"variants": [{"overrides": {}}]},
            {"variants": [{"name": "a"}, {"name": "a"}]},
        ],
    )
    def test_bad_grids(self, payload):
        with pytest.raises(ConfigurationError):
            parse_grid(payload)

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("seeds: [0\nvariants: {\n")
        with pytest.raises(ConfigurationError, match="malformed ablation grid"):
            load_grid(str(path))

    def test_slugify(self):
        assert slugify("w/o CFM & SRM") == "w-o-cfm-srm"
        assert slugify("///") == "variant"


class TestAblate:
    def test_two_variant_grid(self, tmp_path):
        grid = AblationGrid(
            "tiny",
            (0, 1),
            (Variant("LPS"), Variant("EW", {"lps.scheme": "ew"})),
        )
        report = ablate(small(tmp_path, epochs=1), grid, tmp_path)
        assert report["reference"] == "LPS"
        assert [row["variant"] for row in report["variants"]] == ["LPS", "EW"]
        assert report["variants"][0]["wins_vs_reference"] == 0
        assert len(report["runs"]) == 4
        assert (tmp_path / "ew" / "seed-1" / METRICS_CSV).is_file()
        assert json.loads((tmp_path / "ablation.json").read_text()) == report
        assert len(read_csv(tmp_path / "ablation.csv")) == 2

    def test_variant_override_validated(self, tmp_path):
        grid = AblationGrid("bad", (0,), (Variant("broken", {"decoder.window": 3}),))
        with pytest.raises(ConfigurationError):
            ablate(small(tmp_path), grid, tmp_path)
