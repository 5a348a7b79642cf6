import os
import sys
import unittest
from types import SimpleNamespace
from unittest.mock import patch

import pytest

# Add project root to Python path
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt import cli
from fdlc_trajopt.exceptions import MaxIterationsExceeded
from fdlc_trajopt.gradcheck import GradcheckReport


class TestParser(unittest.TestCase):

    def test_goal_list_accepts_commas_and_spaces(self):
        self.assertEqual(cli.parse_goal_list(["10,20", "30"]), [10.0, 20.0, 30.0])

    def test_run_arguments(self):
        args = cli.build_parser().parse_args(
            ["run", "--goal-deg", "10", "20", "--model", "fdlc", "--set", "horizon=5", "--verbose"]
        )
        self.assertEqual(args.command, "run")
        self.assertEqual(args.goal_deg, ["10", "20"])
        self.assertEqual(args.model, "fdlc")
        self.assertEqual(args.overrides, ["horizon=5"])
        self.assertTrue(args.verbose)

    def test_replay_requires_trajectory(self):
        with self.assertRaises(SystemExit):
            cli.build_parser().parse_args(["replay"])

    def test_unknown_model_rejected(self):
        with self.assertRaises(SystemExit):
            cli.build_parser().parse_args(["run", "--model", "line"])


@pytest.mark.parametrize("command", ["run", "replay", "gradcheck", "plot"])
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.parse_and_dispatch([command, "--help"])
    assert excinfo.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--set", "--out", "--model", "--goal-deg", "--verbose"):
        assert flag in out
    if command == "replay":
        assert "--trajectory" in out
    if command == "gradcheck":
        assert "--samples" in out


def test_invalid_parameter_exits_with_validation_code(capsys):
    code = cli.parse_and_dispatch(["run", "--set", "params.mu_p=-1"])
    assert code == cli.EXIT_VALIDATION
    assert "params.mu_p" in capsys.readouterr().err


def test_unknown_key_exits_with_validation_code(capsys):
    code = cli.parse_and_dispatch(["run", "--set", "params.friction=1"])
    assert code == cli.EXIT_VALIDATION
    assert "params.friction" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    code = cli.parse_and_dispatch(["run", "--config", str(tmp_path / "nope.json")])
    assert code == cli.EXIT_VALIDATION


def test_run_passes_effective_config(tmp_path):
    bundle = SimpleNamespace(comparisons=[], failures=[], out_dir=str(tmp_path))
    with patch.object(cli.experiment, "run", return_value=bundle) as run:
        code = cli.parse_and_dispatch(
            ["run", "--goal-deg", "10,20", "--model", "point", "--out", str(tmp_path)]
        )
    assert code == cli.EXIT_OK
    config = run.call_args.args[0]
    assert config.goals_deg == [10.0, 20.0]
    assert [m.name for m in config.models] == ["point"]
    assert config.output_dir == str(tmp_path)


def test_run_with_failures_exits_with_solver_code(tmp_path):
    failed = SimpleNamespace(name="point_10", error_type="MaxIterationsExceeded", error="no convergence")
    bundle = SimpleNamespace(comparisons=[], failures=[failed], out_dir=str(tmp_path))
    with patch.object(cli.experiment, "run", return_value=bundle):
        assert cli.parse_and_dispatch(["run", "--out", str(tmp_path)]) == cli.EXIT_SOLVER


def test_solver_failure_maps_to_exit_two(tmp_path):
    error = MaxIterationsExceeded("stuck", residual_norm=1.0, kappa=1e-8)
    with patch.object(cli.experiment, "run", side_effect=error):
        assert cli.parse_and_dispatch(["run", "--out", str(tmp_path)]) == cli.EXIT_SOLVER


def test_gradcheck_threshold():
    good = GradcheckReport("point", 2, [1e-7, 2e-7], [1e-7, 1e-7])
    bad = GradcheckReport("point", 2, [1e-2, 2e-7], [1e-7, 1e-7])
    with patch.object(cli, "gradcheck", return_value=good) as check:
        assert cli.parse_and_dispatch(["gradcheck", "--model", "point", "--samples", "2"]) == cli.EXIT_OK
    assert check.call_args.args[2] == 2
    with patch.object(cli, "gradcheck", return_value=bad):
        assert cli.parse_and_dispatch(["gradcheck", "--model", "point"]) == cli.EXIT_SOLVER


def test_plot_without_runs(tmp_path):
    assert cli.parse_and_dispatch(["plot", "--out", str(tmp_path)]) == cli.EXIT_VALIDATION
