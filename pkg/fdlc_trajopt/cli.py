"""
Command-line entry point.

    python -m fdlc_trajopt run --config configs/default.json --goal-deg 10 20
    python -m fdlc_trajopt replay --trajectory results/point_10/trajectory.json
    python -m fdlc_trajopt gradcheck --model fdlc --samples 20
    python -m fdlc_trajopt plot --out results

Exit codes: 0 success, 1 invalid configuration or input file, 2 solver failure.
"""

import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from pydantic import ValidationError

from fdlc_trajopt import experiment, plotting
from fdlc_trajopt.config import configure_logging, settings
from fdlc_trajopt.exceptions import SolverFailure, ValidationFailure
from fdlc_trajopt.gradcheck import gradcheck

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
GRADCHECK_TOLERANCE = 1e-4


def parse_goal_list(values: Sequence[str]) -> List[float]:
    """Accepts '10 20', '10,20' or any mix of the two."""
    goals = []
    for value in values:
        for part in value.split(","):
            if part.strip():
                goals.append(float(part))
    return goals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to the JSON experiment configuration.")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config entry by dotted path, e.g. params.mu_p=0.4 (repeatable).",
    )
    common.add_argument("--out", help="Output directory of the run bundle.")
    common.add_argument("--model", choices=["point", "fdlc"], help="Restrict to one contact model.")
    common.add_argument(
        "--goal-deg",
        nargs="+",
        metavar="DEG",
        help="Goal angles in degrees, space- or comma-separated.",
    )
    common.add_argument("--verbose", action="store_true", help="DEBUG logging and diagnostic CSVs.")

    parser = argparse.ArgumentParser(
        prog="fdlc_trajopt",
        description=f"{settings.PROJECT_NAME}: bi-level pusher-box trajectory optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Optimize every (model, goal) pair and write the bundle.")
    replay = sub.add_parser("replay", parents=[common], help="Re-simulate a stored trajectory open loop.")
    replay.add_argument("--trajectory", required=True, help="Path to a trajectory.json file.")
    check = sub.add_parser(
        "gradcheck", parents=[common], help="Compare IFT sensitivities against finite differences."
    )
    check.add_argument("--samples", type=int, default=20, help="Random contact states per model.")
    sub.add_parser("plot", parents=[common], help="Regenerate SVG plots from a bundle's CSVs.")
    return parser


def _format_validation_error(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{loc}: {err['msg']} (got {err.get('input')!r})")
    return "Invalid configuration:\n  " + "\n  ".join(lines)


def _effective_config(args: argparse.Namespace) -> experiment.ExperimentConfig:
    overrides = list(args.overrides)
    if args.goal_deg:
        overrides.append(f"goals_deg={json.dumps(parse_goal_list(args.goal_deg))}")
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    config = experiment.load_config(args.config, overrides)
    if args.model:
        data = config.model_dump(mode="json")
        data["models"] = [m for m in data["models"] if m["kind"] == args.model]
        if not data["models"]:
            raise ValidationFailure(f"Model '{args.model}' is not part of the configuration")
        config = experiment.ExperimentConfig.model_validate(data)
    return config


def _cmd_run(args, config) -> int:
    bundle = experiment.run(config, config.output_dir, verbose=args.verbose)
    for row in bundle.comparisons:
        print(
            f"goal {row.goal_deg:g} deg: effort point={row.effort_point:.4g} fdlc={row.effort_fdlc:.4g}, "
            f"distance point={row.distance_point:.4g} fdlc={row.distance_fdlc:.4g}"
        )
    if bundle.failures:
        for failed in bundle.failures:
            print(f"Run {failed.name} failed ({failed.error_type}): {failed.error}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"Bundle written to {bundle.out_dir}")
    return EXIT_OK


def _cmd_replay(args, config) -> int:
    result = experiment.replay(args.trajectory, config)
    print(f"max state deviation: {result.max_deviation:.3e}")
    return EXIT_OK


def _cmd_gradcheck(args, config) -> int:
    worst = 0.0
    for model in config.models:
        report = gradcheck(model, config.params, args.samples, config.seed, config.step, config.lower)
        print(
            f"{model.name}: max rel. error A={report.max_error_A:.3e} B={report.max_error_B:.3e} "
            f"over {report.samples} samples"
        )
        worst = max(worst, report.max_error)
    print(f"max rel. error: {worst:.3e}")
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_SOLVER


def _cmd_plot(args, config) -> int:
    paths = plotting.plot_bundle(config.output_dir)
    print(f"Wrote {len(paths)} plot(s)")
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "replay": _cmd_replay,
    "gradcheck": _cmd_gradcheck,
    "plot": _cmd_plot,
}


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = _effective_config(args)
        return COMMANDS[args.command](args, config)
    except ValidationError as e:
        print(_format_validation_error(e), file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationFailure, FileNotFoundError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverFailure as e:
        logger.error(f"Solver failure: {e}", exc_info=True)
        print(f"Solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


def main() -> None:
    sys.exit(parse_and_dispatch())
