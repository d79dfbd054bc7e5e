"""
Tests for the command-line entry point.
"""

import json

import numpy as np
import pytest
import yaml

from kinoctl.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main
from kinoctl.control_runtime import ExecutionTrace, load_path
from kinoctl.exceptions import NumericalFailure


def _offset_run(sim_params, controller, objective, path, run_cfg, *rest):
    trace = ExecutionTrace("fkd", objective, 0)
    for k, (x, _) in enumerate(path.positions):
        trace.times.append(0.05 * k)
        trace.states.append(np.array([x, 0.1, 0.0, run_cfg.v_desired, 0.0, 0.0]))
        trace.controls.append(np.zeros(2))
        trace.plan_ids.append(-1)
    return trace


@pytest.fixture
def quick_config(tmp_path):
    path = tmp_path / "config.yml"
    path.write_text(yaml.safe_dump({
        "data": {"n_train": 1, "n_validation": 0, "duration": 2.0},
        "eval": {"speeds": [1.0, 2.0], "rollouts": 1, "plots": False},
        "logging": {"structured": False},
    }))
    return path


class TestCli:
    """Tests for the subcommands."""

    def test_paths(self, tmp_path):
        """A built-in path is written and reads back."""
        out = tmp_path / "rect.json"
        assert main(["paths", "--name", "rounded_rectangle", "--out", str(out)]) == EXIT_OK
        assert load_path(out).closed

    def test_unknown_path_name(self, tmp_path):
        """argparse rejects names outside the registry."""
        with pytest.raises(SystemExit):
            main(["paths", "--name", "spiral", "--out", str(tmp_path / "x.json")])

    def test_missing_command(self):
        """A subcommand is required."""
        with pytest.raises(SystemExit):
            main([])

    def test_bad_config_exits_2(self, tmp_path, capsys):
        """An unknown section is a configuration error."""
        bad = tmp_path / "bad.yml"
        bad.write_text(yaml.safe_dump({"fleet": {"x": 1}}))
        code = main(["--config", str(bad), "paths", "--name", "straight", "--out", str(tmp_path / "p.json")])
        assert code == EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err

    def test_gen_data(self, quick_config, tmp_path):
        """Dataset generation writes the manifest, the trajectories and the effective config."""
        out = tmp_path / "data"
        assert main(["--config", str(quick_config), "gen-data", "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["split"] == {"train": ["traj_000.jsonl"], "validation": []}
        saved = yaml.safe_load((out / "config.yml").read_text())
        assert saved["data"]["duration"] == 2.0
        assert saved["sim"]["T_v"] == 0.3

    def test_follow_then_eval(self, mocker, quick_config, tmp_path):
        """run-follow writes an experiment directory that eval turns into a report."""
        mocker.patch("kinoctl.evaluation.run_closed_loop", side_effect=_offset_run)
        run_dir = tmp_path / "follow"
        code = main(["--config", str(quick_config), "run-follow", "--model", "oracle", "--path", "straight",
                     "--out", str(run_dir)])
        assert code == EXIT_OK
        assert (run_dir / "manifest.json").exists()
        report = tmp_path / "report.csv"
        assert main(["eval", "--in", str(run_dir), "--report", str(report)]) == EXIT_OK
        lines = report.read_text().splitlines()
        assert len(lines) == 3

    def test_follow_failure_exits_1(self, mocker, quick_config, tmp_path):
        """A failed rollout gives exit status 1."""
        mocker.patch("kinoctl.evaluation.run_closed_loop", side_effect=NumericalFailure("diverged"))
        code = main(["--config", str(quick_config), "run-follow", "--model", "oracle", "--path", "straight",
                     "--speeds", "1.0", "--out", str(tmp_path / "follow")])
        assert code == EXIT_FAILURE

    def test_eval_without_manifest(self, tmp_path):
        """A directory without a manifest is a configuration error."""
        assert main(["eval", "--in", str(tmp_path), "--report", str(tmp_path / "r.csv")]) == EXIT_CONFIG

    def test_log_level_flag(self, mocker, tmp_path):
        """--log-level overrides the configured level."""
        configure = mocker.patch("kinoctl.cli.configure_from_section")
        main(["--log-level", "DEBUG", "paths", "--name", "straight", "--out", str(tmp_path / "p.json")])
        assert configure.call_args[0][0]["level"] == "DEBUG"
