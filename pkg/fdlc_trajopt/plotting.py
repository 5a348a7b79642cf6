"""SVG figures regenerated from the CSV artifacts of a run bundle."""

import logging
import os
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_DIR = "plots"
SVG_METADATA = {"Date": None}
MODEL_COLORS = {"point": "tab:blue", "fdlc": "tab:orange"}

plt.rcParams["svg.hashsalt"] = "fdlc-trajopt"
plt.rcParams["font.size"] = 9
plt.rcParams["figure.figsize"] = (6.0, 4.0)


def find_runs(out_dir: str) -> Dict[str, str]:
    """Run name -> directory for every subdirectory holding a controls.csv."""
    runs = {}
    if not os.path.isdir(out_dir):
        return runs
    for name in sorted(os.listdir(out_dir)):
        path = os.path.join(out_dir, name)
        if os.path.isfile(os.path.join(path, "controls.csv")):
            runs[name] = path
    return runs


def _save(fig, path: str) -> str:
    fig.savefig(path, format="svg", metadata=SVG_METADATA, bbox_inches="tight")
    plt.close(fig)
    logger.debug(f"Wrote {path}")
    return path


def plot_controls(run_name: str, run_dir: str, plot_dir: str) -> str:
    """One panel per control component over time."""
    controls = pd.read_csv(os.path.join(run_dir, "controls.csv"))
    columns = [c for c in controls.columns if c != "step"]
    n_cols = 2
    n_rows = max(1, (len(columns) + 1) // 2)
    fig, axes = plt.subplots(n_rows, n_cols, sharex=True, squeeze=False, figsize=(7.0, 2.0 * n_rows))
    for ax, column in zip(axes.ravel(), columns):
        ax.step(controls["step"], controls[column], where="post")
        ax.set_ylabel(f"{column} [N]")
        ax.grid(alpha=0.3)
    for ax in axes.ravel()[len(columns) :]:
        ax.set_visible(False)
    for ax in axes[-1]:
        ax.set_xlabel("step")
    fig.suptitle(f"Control inputs: {run_name}")
    return _save(fig, os.path.join(plot_dir, f"controls_{run_name}.svg"))


def _metrics(runs: Dict[str, str]) -> pd.DataFrame:
    frames = [pd.read_csv(os.path.join(path, "metrics.csv")) for path in runs.values()]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def plot_effort(metrics: pd.DataFrame, plot_dir: str) -> str:
    fig, ax = plt.subplots()
    goals = sorted(metrics["goal_deg"].unique())
    models = [m for m in ("point", "fdlc") if m in set(metrics["model"])]
    width = 0.8 / max(1, len(models))
    for j, model in enumerate(models):
        rows = metrics[metrics["model"] == model].set_index("goal_deg")
        heights = [float(rows.loc[g, "control_effort"]) if g in rows.index else 0.0 for g in goals]
        positions = [i + (j - (len(models) - 1) / 2) * width for i in range(len(goals))]
        ax.bar(positions, heights, width=width, label=model, color=MODEL_COLORS.get(model))
    ax.set_xticks(range(len(goals)))
    ax.set_xticklabels([f"{g:g}" for g in goals])
    ax.set_xlabel("goal angle [deg]")
    ax.set_ylabel("control effort [N^2 s]")
    ax.legend()
    return _save(fig, os.path.join(plot_dir, "effort.svg"))


def plot_travel(runs: Dict[str, str], metrics: pd.DataFrame, plot_dir: str) -> str:
    """Cumulative travel per run with a marker where the goal angle is reached."""
    fig, ax = plt.subplots()
    reach = {
        (row.model, row.goal_deg): int(row.reach_step) for row in metrics.itertuples(index=False)
    }
    for name, path in runs.items():
        states = pd.read_csv(os.path.join(path, "states.csv"))
        run_metrics = pd.read_csv(os.path.join(path, "metrics.csv")).iloc[0]
        model = run_metrics["model"]
        (line,) = ax.plot(
            states["step"],
            states["travel"],
            label=name,
            linestyle="-" if model == "fdlc" else "--",
        )
        step = reach.get((model, run_metrics["goal_deg"]), -1)
        if 0 <= step < len(states):
            ax.plot(states["step"].iloc[step], states["travel"].iloc[step], "o", color=line.get_color())
    ax.set_xlabel("step")
    ax.set_ylabel("travel distance [m]")
    ax.legend(fontsize=7)
    return _save(fig, os.path.join(plot_dir, "travel.svg"))


def plot_forces(runs: Dict[str, str], plot_dir: str) -> str:
    fig, ax = plt.subplots()
    for name, path in runs.items():
        forces = pd.read_csv(os.path.join(path, "forces.csv"))
        ax.plot(forces["step"], forces["f_n_total"], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("total normal force [N]")
    ax.legend(fontsize=7)
    return _save(fig, os.path.join(plot_dir, "forces.svg"))


def plot_bundle(out_dir: str) -> List[str]:
    """Regenerates every figure of a bundle from its CSVs; returns the written paths."""
    runs = find_runs(out_dir)
    if not runs:
        raise FileNotFoundError(f"No run directories with CSV artifacts under '{out_dir}'")
    plot_dir = os.path.join(out_dir, PLOT_DIR)
    os.makedirs(plot_dir, exist_ok=True)
    written = [plot_controls(name, path, plot_dir) for name, path in runs.items()]
    metrics = _metrics(runs)
    written.append(plot_effort(metrics, plot_dir))
    written.append(plot_travel(runs, metrics, plot_dir))
    written.append(plot_forces(runs, plot_dir))
    logger.info(f"Wrote {len(written)} plot(s) to {plot_dir}")
    return written
