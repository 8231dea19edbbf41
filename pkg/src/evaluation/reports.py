"""
Report writers: report.json, metrics.csv, per_lens.csv, heatmap.csv / heatmap.png
"""

import csv
import json
import logging
import os

import numpy as np

from ..core.errors import MissingArtifactError
from ..core.imports import MATPLOTLIB_AVAILABLE
from ..core.serialization import dump_json
from ..simulation.sampling import grid_axis, grid_positions

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("name", "mae_x", "sd_x", "mae_y", "sd_y", "mae_avg", "sd_avg")


def write_report_json(report, path):
    dump_json(report.to_dict(), path)


def write_metrics_csv(rows, path):
    """One row per preset, in the order given; rows are EvalReport.row() dicts"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] if k == "name" else f"{row[k]:.6f}" for k in METRIC_COLUMNS})
    logger.info("Wrote %d metric rows to %s", len(rows), path)


def read_metrics_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [
            {k: (v if k == "name" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


def write_per_lens_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["lens_id", "mae_um"])
        for lens_id, value in sorted(report.per_lens_mae.items()):
            writer.writerow([lens_id, f"{value:.6f}"])


def write_heatmap_csv(grid, sampling, path):
    """Rows are dy, columns dx; the header row and first column carry the offsets"""
    axis = grid_axis(sampling.range_um, sampling.step_um)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["dy\\dx"] + [f"{v:g}" for v in axis])
        for dy, row in zip(axis, grid):
            writer.writerow([f"{dy:g}"] + [f"{v:.6f}" for v in row])


def plot_heatmap(grid, sampling, path, title="MAE per decenter position (um)"):
    if not MATPLOTLIB_AVAILABLE:
        logger.warning("matplotlib not available; skipping %s", path)
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    r = sampling.range_um
    half = sampling.step_um / 2.0
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(grid, origin="lower", cmap="viridis", extent=(-r - half, r + half, -r - half, r + half))
    fig.colorbar(im, ax=ax, label="MAE (um)")
    ax.set_xlabel("dx (um)")
    ax.set_ylabel("dy (um)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_evaluation_bundle(report, grid, sampling, out_dir):
    """Everything a single evaluated preset produces, under one directory"""
    os.makedirs(out_dir, exist_ok=True)
    write_report_json(report, os.path.join(out_dir, "report.json"))
    write_per_lens_csv(report, os.path.join(out_dir, "per_lens.csv"))
    if grid is not None:
        write_heatmap_csv(grid, sampling, os.path.join(out_dir, "heatmap.csv"))
        plot_heatmap(grid, sampling, os.path.join(out_dir, "heatmap.png"), title=f"{report.preset} MAE (um)")


def plot_adjustment_example(result, path, title=None):
    """Before (top row) and after (bottom row) captures of one adjustment, all five fields"""
    if not MATPLOTLIB_AVAILABLE:
        logger.warning("matplotlib not available; skipping %s", path)
        return None
    if result.before is None or result.after is None:
        raise MissingArtifactError("adjustment result carries no captures to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = result.before.images.shape[0]
    fig, axes = plt.subplots(2, n, figsize=(2.0 * n, 4.4), squeeze=False)
    rows = (
        (result.before, f"start ({result.start.dx:+.1f}, {result.start.dy:+.1f})"),
        (result.after, f"residual ({result.residual.dx:+.1f}, {result.residual.dy:+.1f})"),
    )
    for r, (fovset, label) in enumerate(rows):
        for c in range(n):
            ax = axes[r][c]
            ax.imshow(fovset.images[c], cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r][0].set_ylabel(label, fontsize=8)
    fig.suptitle(title or ("within threshold" if result.success else "outside threshold"))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


LOSS_WEIGHT_COLUMNS = ("name", "lambda_adv", "lambda_pix", "mae_x", "mae_y", "mae_avg", "sd_avg")


def write_loss_weight_grid(cells, out_dir):
    """MAE per (lambda_adv, lambda_pix) cell as loss_weights.json and loss_weights.csv"""
    os.makedirs(out_dir, exist_ok=True)
    cells = sorted(cells, key=lambda c: (c["lambda_adv"], c["lambda_pix"]))
    dump_json({"cells": cells}, os.path.join(out_dir, "loss_weights.json"))
    path = os.path.join(out_dir, "loss_weights.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_WEIGHT_COLUMNS)
        writer.writeheader()
        for cell in cells:
            writer.writerow({k: cell[k] if k == "name" else f"{cell[k]:g}" if k.startswith("lambda")
                             else f"{cell[k]:.6f}" for k in LOSS_WEIGHT_COLUMNS})
    logger.info("Wrote %d loss-weight cells to %s", len(cells), path)
    return path


def read_audit_labels(root_path):
    """Sealed positions of a target dataset, each with its distance to the nearest grid node.

    Only analysis code reads this; dataset loading never does.
    """
    path = os.path.join(root_path, "audit", "labels.sealed.json")
    if not os.path.exists(path):
        raise MissingArtifactError(f"no audit labels at {path}")
    with open(path, "r", encoding="utf-8") as f:
        sealed = json.load(f)["labels"]
    with open(os.path.join(root_path, "dataset.json"), "r", encoding="utf-8") as f:
        sampling = json.load(f)["sampling"]

    nodes = np.array([p.as_tuple() for p in grid_positions(sampling["range_um"], sampling["step_um"])])
    entries = []
    for item in sealed:
        pos = np.array([item["dx_um"], item["dy_um"]])
        entries.append(dict(item, nearest_grid_um=float(np.min(np.hypot(*(nodes - pos).T)))))
    return entries
