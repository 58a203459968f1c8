"""Report rendering: delimited metrics files plus figure images.

The `report` command turns a compression report (and optionally the TRQ
table from a stats bundle) into a flat CSV for scripting and a set of PNG
figures: predicted-vs-measured error per group, achieved retention, and
the influence-score heatmap over timesteps.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import CompressionReport

FIG_DPI = 120


def write_metrics_csv(report: CompressionReport, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "block_id",
                "family",
                "attention",
                "d_eff",
                "rank",
                "retention",
                "predicted_error",
                "measured_loss",
                "params_before",
                "params_after",
            ]
        )
        for r in report.rows:
            writer.writerow(
                [
                    r.block_id,
                    r.family,
                    r.attention,
                    r.d_eff,
                    r.rank,
                    f"{r.rank / r.d_eff:.6f}",
                    f"{r.predicted_error:.9e}",
                    "" if r.measured_loss is None else f"{r.measured_loss:.9e}",
                    r.params_before,
                    r.params_after,
                ]
            )
        writer.writerow([])
        writer.writerow(["total_params_before", report.params_before])
        writer.writerow(["total_params_after", report.params_after])
        writer.writerow(["budget", f"{report.budget:.0f}"])
        writer.writerow(["plan_hash", report.plan_hash])
        if report.output_deviation is not None:
            writer.writerow(["output_deviation", f"{report.output_deviation:.9e}"])
            writer.writerow(["deviation_probes", report.deviation_probes])


def write_trq_csv(trq_table: list[dict], path) -> None:
    path = Path(path)
    cols = [
        "block",
        "family",
        "layer_id",
        "input_kind",
        "timestep",
        "trq",
        "weight",
        "diversity",
        "samples",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in trq_table:
            writer.writerow([row.get(c, "") for c in cols])


def _group_labels(report: CompressionReport) -> list[str]:
    return [f"{r.block_id}.{r.family}" for r in report.rows]


def render_error_figure(report: CompressionReport, path) -> None:
    labels = _group_labels(report)
    predicted = [max(r.predicted_error, 0.0) for r in report.rows]
    measured = [
        0.0 if r.measured_loss is None else max(r.measured_loss, 0.0)
        for r in report.rows
    ]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, len(labels)), 4))
    ax.bar(x - 0.2, predicted, width=0.4, label="predicted")
    ax.bar(x + 0.2, measured, width=0.4, label="measured")
    ax.set_yscale("symlog", linthresh=1e-12)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("reconstruction error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_retention_figure(report: CompressionReport, path) -> None:
    labels = _group_labels(report)
    retention = [r.rank / r.d_eff for r in report.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, len(labels)), 4))
    ax.bar(x, retention, color="#33688a")
    ax.axhline(1.0, color="gray", lw=0.8, ls="--")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("retained rank fraction")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_trq_heatmap(trq_table: list[dict], path) -> None:
    keys = sorted({(r["block"], r["family"]) for r in trq_table})
    tsteps = sorted({r["timestep"] for r in trq_table})
    grid = np.full((len(keys), len(tsteps)), np.nan)
    for r in trq_table:
        i = keys.index((r["block"], r["family"]))
        j = tsteps.index(r["timestep"])
        grid[i, j] = r["trq"]
    fig, ax = plt.subplots(figsize=(max(5, len(tsteps)), max(3, 0.5 * len(keys))))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(tsteps)))
    ax.set_xticklabels([str(t) for t in tsteps])
    ax.set_yticks(range(len(keys)))
    ax.set_yticklabels([f"{b}.{f}" for b, f in keys], fontsize=8)
    ax.set_xlabel("timestep")
    fig.colorbar(im, ax=ax, label="influence score")
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)


def render_report(
    report: CompressionReport,
    out_dir,
    trq_table: list[dict] | None = None,
) -> list[Path]:
    """Write metrics.csv and all figures under out_dir; returns the paths."""
    out = Path(out_dir)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    written = []
    metrics = out / "metrics.csv"
    write_metrics_csv(report, metrics)
    written.append(metrics)
    err_fig = out / "figures" / "errors.png"
    render_error_figure(report, err_fig)
    written.append(err_fig)
    ret_fig = out / "figures" / "retention.png"
    render_retention_figure(report, ret_fig)
    written.append(ret_fig)
    if trq_table:
        trq_csv = out / "trq.csv"
        write_trq_csv(trq_table, trq_csv)
        written.append(trq_csv)
        heat = out / "figures" / "trq_heatmap.png"
        render_trq_heatmap(trq_table, heat)
        written.append(heat)
    return written
