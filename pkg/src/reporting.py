"""
Run Reporting

Writes the files a run or a comparison leaves behind (per-step CSV metrics,
wall-clock timings, JSON summaries, aligned comparison tables, the residual
ratio ablation table) and renders static SVG line charts and console
summaries.
"""

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.table import Table  # noqa: E402

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TIMINGS_FILE = "timings.csv"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.yaml"
COMPARISON_FILE = "comparison.csv"
ABLATION_FILE = "ablation.csv"

# Fixed so SVG element ids do not change between runs
SVG_HASH_SALT = "galore-plus"


def format_float(value: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(value), ".17g")


def metrics_header(roles: Sequence[str]) -> List[str]:
    return ["step", "loss"] + [f"approx_error_{role}" for role in roles] + ["clamp_count", "analytic_state_elements"]


def write_metrics_csv(path: Path, metrics: Sequence, roles: Sequence[str]) -> None:
    """Deterministic per-step metrics (no wall-clock columns)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(metrics_header(roles))
        for row in metrics:
            writer.writerow(
                [row.step, format_float(row.loss)]
                + [format_float(row.approx_error[role]) for role in roles]
                + [row.clamp_count, row.analytic_state_elements]
            )


def write_timings_csv(path: Path, metrics: Sequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "refresh_time_ns", "step_time_ns"])
        for row in metrics:
            writer.writerow([row.step, row.refresh_time_ns, row.step_time_ns])


def write_json(path: Path, payload: Mapping) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, ensure_ascii=False)
        f.write("\n")


def read_metrics_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def mean_approx_error(row, roles: Sequence[str]) -> float:
    return float(np.mean([row.approx_error[role] for role in roles]))


def write_comparison_csv(path: Path, runs: Sequence[Tuple[str, Sequence]], roles: Sequence[str]) -> None:
    """Aligned per-step loss, cumulative refresh time and mean approximation error of every run.

    Args:
        path: Output file
        runs: (label, metrics) pairs with equal step counts
        roles: Roles averaged into the approximation error column
    """
    header = ["step"]
    for label, _ in runs:
        header += [f"loss[{label}]", f"cumulative_refresh_ns[{label}]", f"approx_error[{label}]"]
    cumulative = [np.cumsum([row.refresh_time_ns for row in metrics]) for _, metrics in runs]

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for i, first in enumerate(runs[0][1]):
            line = [first.step]
            for (_, metrics), refresh in zip(runs, cumulative):
                row = metrics[i]
                line += [format_float(row.loss), int(refresh[i]), format_float(mean_approx_error(row, roles))]
            writer.writerow(line)


def plot_lines(
    path: Path,
    series: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
    title: str,
    ylabel: str,
    log_y: bool = False,
) -> None:
    """Static SVG line chart with one line per series.

    Args:
        path: Output .svg file
        series: label -> (x values, y values)
        title: Chart title
        ylabel: Y axis label
        log_y: Logarithmic y axis
    """
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, label=label, linewidth=1.2)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        if series:
            ax.legend(fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    logger.debug("wrote %s", path)


def plot_comparison(output: Path, runs: Sequence[Tuple[str, Sequence]], roles: Sequence[str]) -> List[Path]:
    """Loss, cumulative refresh time and approximation error charts of aligned runs."""
    output = Path(output)
    steps = {label: [row.step for row in metrics] for label, metrics in runs}
    charts = [
        ("loss.svg", "Training loss", "loss", True, lambda metrics: [row.loss for row in metrics]),
        (
            "refresh_time.svg",
            "Cumulative projection refresh time",
            "seconds",
            False,
            lambda metrics: list(np.cumsum([row.refresh_time_ns for row in metrics]) / 1e9),
        ),
        (
            "approx_error.svg",
            "Relative approximation error (mean over attention weights)",
            "||G - PP^T G|| / ||G||",
            False,
            lambda metrics: [mean_approx_error(row, roles) for row in metrics],
        ),
    ]
    written = []
    for name, title, ylabel, log_y, values in charts:
        series = {label: (steps[label], values(metrics)) for label, metrics in runs}
        if log_y and any(v <= 0 for _, ys in series.values() for v in ys):
            log_y = False
        plot_lines(output / name, series, title, ylabel, log_y=log_y)
        written.append(output / name)
    return written


def ablation_rows(
    final_losses: Sequence[Tuple[float, float]],
    baseline: float = 0.0,
    reference: Optional[float] = None,
) -> Tuple[List[Dict], Optional[Dict]]:
    """Mean and sample standard deviation of final loss per sweep value.

    The returned flag compares `reference` against `baseline`: it is set when
    the reference mean is worse than the baseline mean by more than one pooled
    standard deviation.

    Args:
        final_losses: (sweep value, final loss) for every run
        baseline: Sweep value of the no-residual setting
        reference: Sweep value expected to beat the baseline

    Returns:
        Tuple of (rows sorted by sweep value, flag record or None)
    """
    groups = defaultdict(list)
    for value, loss in final_losses:
        groups[float(value)].append(float(loss))

    rows = []
    for value in sorted(groups):
        losses = groups[value]
        rows.append({
            "value": value,
            "runs": len(losses),
            "mean_final_loss": float(np.mean(losses)),
            "std_final_loss": float(np.std(losses, ddof=1)) if len(losses) > 1 else 0.0,
        })

    flag = None
    by_value = {row["value"]: row for row in rows}
    if reference is not None and baseline in by_value and float(reference) in by_value:
        base, ref = by_value[baseline], by_value[float(reference)]
        pooled = math.sqrt((base["std_final_loss"] ** 2 + ref["std_final_loss"] ** 2) / 2.0)
        gap = ref["mean_final_loss"] - base["mean_final_loss"]
        flag = {
            "baseline": baseline,
            "reference": float(reference),
            "gap": gap,
            "pooled_std": pooled,
            "inverted": gap > 0.0,
            "flagged": gap > pooled,
        }
        if flag["flagged"]:
            logger.warning(
                "ratio %s ends %.3g above ratio %s, more than one pooled sd (%.3g)",
                reference, gap, baseline, pooled,
            )
    return rows, flag


def write_ablation_csv(path: Path, field: str, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([field, "runs", "mean_final_loss", "std_final_loss"])
        for row in rows:
            writer.writerow([
                format_float(row["value"]), row["runs"],
                format_float(row["mean_final_loss"]), format_float(row["std_final_loss"]),
            ])


def print_summary(summary: Mapping, console: Optional[Console] = None) -> None:
    """Print a run summary as a table.

    Args:
        summary: Summary record of a run
        console: Console to print to (stdout by default)
    """
    console = console or Console()
    table = Table(title=f"Run summary: {summary['method']} (seed {summary['seed']})")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    table.add_row("Steps", str(summary["steps"]))
    table.add_row("Initial loss", f"{summary['initial_loss']:.6g}")
    table.add_row("Final loss", f"{summary['final_loss']:.6g}")
    table.add_row("Refresh time (ms)", f"{summary['total_refresh_time_ns'] / 1e6:.3f}")
    table.add_row("Step time (ms)", f"{summary['total_step_time_ns'] / 1e6:.3f}")
    table.add_row("Refresh time share", f"{summary['refresh_time_share']:.1%}")
    table.add_row("Optimizer state elements", f"{summary['peak_analytic_state_elements']:,}")
    table.add_row("Dense AdamW elements", f"{summary['dense_state_elements']:,}")
    table.add_row("State saving", f"{summary['state_saving']:.1%}")
    table.add_row("Uncorrected residual positions", str(summary["clamp_count"]))
    console.print(table)


def print_comparison(summaries: Sequence[Tuple[str, Mapping]], console: Optional[Console] = None) -> None:
    console = console or Console()
    table = Table(title="Comparison")
    for column in ("Run", "Final loss", "Refresh ms", "Refresh share", "State elements"):
        table.add_column(column, justify="left" if column == "Run" else "right")
    for label, summary in summaries:
        table.add_row(
            label,
            f"{summary['final_loss']:.6g}",
            f"{summary['total_refresh_time_ns'] / 1e6:.3f}",
            f"{summary['refresh_time_share']:.1%}",
            f"{summary['peak_analytic_state_elements']:,}",
        )
    console.print(table)


def print_ablation(field: str, rows: Sequence[Mapping], flag: Optional[Mapping], console: Optional[Console] = None) -> None:
    console = console or Console()
    table = Table(title=f"Final loss by {field}")
    table.add_column(field, justify="right")
    table.add_column("Runs", justify="right")
    table.add_column("Final loss (mean ± sd)", justify="right")
    for row in rows:
        table.add_row(f"{row['value']:g}", str(row["runs"]), f"{row['mean_final_loss']:.5g} ± {row['std_final_loss']:.2g}")
    console.print(table)
    if flag is not None and flag["flagged"]:
        console.print(
            f"[yellow]flag:[/yellow] {field}={flag['reference']:g} is worse than {field}={flag['baseline']:g} "
            f"by {flag['gap']:.3g} (> pooled sd {flag['pooled_std']:.3g})"
        )
