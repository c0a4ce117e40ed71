#!/usr/bin/env python3
"""Tests for scripts/mtcp_cli.py: argument handling, dispatch and exit codes."""

import pytest

import mtcp_cli
from conftest import SMALL_RUN
from mtcp_cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main, parse_seeds
from mtcp_errors import NumericError
from mtcp_gradsuite import GradResult


def small_flags(out_dir, epochs=1):
    flags = []
    for key, value in SMALL_RUN.items():
        if key != "epochs":
            flags += ["--set", f"{key}={value}"]
    return flags + ["--epochs", str(epochs), "--out", str(out_dir)]


class TestParser:
    def test_help_exits_ok(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "mtcp gradcheck" in capsys.readouterr().out

    def test_missing_command(self):
        assert main([]) == EXIT_USAGE

    def test_bad_assignment(self):
        assert main(["train", "--set", "no-equals-sign"]) == EXIT_USAGE

    def test_flags_map_onto_config(self, tmp_path):
        argv = ["train", "--scheme", "ew", "--kappa", "7.5", "--seed", "4", "--set", "lps.history=2"]
        args = build_parser().parse_args(argv + ["--out", str(tmp_path)])
        config = mtcp_cli.resolve_config(args)
        assert (config.lps.scheme, config.lps.kappa, config.seed, config.lps.history) == ("ew", 7.5, 4, 2)
        assert config.output_dir == str(tmp_path)

    def test_dedicated_flag_wins_over_set(self):
        args = build_parser().parse_args(["train", "--set", "epochs=9", "--epochs", "2"])
        assert mtcp_cli.resolve_config(args).epochs == 2

    def test_parse_seeds(self):
        assert parse_seeds("0, 2,5") == (0, 2, 5)


class TestCommands:
    def test_unknown_config_key(self, capsys):
        assert main(["train", "--set", "decoder.depth=3"]) == EXIT_USAGE
        assert "MTCP ERROR: unknown config key" in capsys.readouterr().err

    def test_train_then_eval(self, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert main(["-q", "train", *small_flags(run_dir)]) == EXIT_OK
        assert "score" in capsys.readouterr().out
        assert main(["-q", "eval", str(run_dir)]) == EXIT_OK
        assert "Evaluation of" in capsys.readouterr().out

    def test_malformed_grid_file(self, tmp_path, capsys):
        grid = tmp_path / "broken.yaml"
        grid.write_text("variants: [\n  - name: a\n")
        assert main(["ablate", str(grid), "--out", str(tmp_path / "out")]) == EXIT_USAGE
        assert "MTCP ERROR: malformed ablation grid" in capsys.readouterr().err

    def test_eval_without_target(self):
        assert main(["eval"]) == EXIT_USAGE

    def test_eval_missing_run(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "absent")]) == EXIT_IO
        assert "MTCP ERROR" in capsys.readouterr().err

    def test_eval_corrupt_checkpoint(self, tmp_path):
        checkpoint = tmp_path / "bad.mtcp"
        checkpoint.write_bytes(b"not a checkpoint")
        config = tmp_path / "run.conf"
        config.write_text("epochs = 1\n")
        assert main(["eval", "--checkpoint", str(checkpoint), "--config", str(config)]) == EXIT_IO

    def test_gen_data(self, tmp_path):
        out_dir = tmp_path / "data"
        assert main(["gen-data", "--split", "val", *small_flags(out_dir)]) == EXIT_OK
        assert sorted(p.name for p in out_dir.iterdir()) == ["val_00000.mtcpds", "val_00001.mtcpds"]

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "0", "--blocks", "conv,cbam"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Passed" in out and "2/2" in out

    def test_gradcheck_unknown_block(self):
        assert main(["gradcheck", "--blocks", "lstm"]) == EXIT_USAGE

    def test_gradcheck_failure_exit_code(self, monkeypatch, capsys):
        monkeypatch.setattr(mtcp_cli, "run_suite", lambda seeds, blocks: [GradResult("conv", 0, 1.0)])
        assert main(["gradcheck"]) == EXIT_NUMERIC
        assert "Failed" in capsys.readouterr().out

    def test_numeric_failure_exit_code(self, monkeypatch, tmp_path, capsys):
        def explode(config):
            raise NumericError("non-finite value in log")

        monkeypatch.setattr(mtcp_cli, "train", explode)
        assert main(["train", "--out", str(tmp_path)]) == EXIT_NUMERIC
        assert "non-finite value in log" in capsys.readouterr().err

    @pytest.mark.slow
    def test_ablate_builtin_grid_single_seed(self, tmp_path):
        assert main(["-q", "ablate", "architecture", "--seeds", "0", *small_flags(tmp_path)]) == EXIT_OK
        assert (tmp_path / "ablation.csv").is_file()
        assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 5
