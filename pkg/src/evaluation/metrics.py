"""
Accuracy metrics over a labeled test set: MAE / SD per axis, per-position and per-lens breakdowns
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ..core.errors import EvaluationError
from ..simulation.sampling import grid_axis

logger = logging.getLogger(__name__)

# Offsets are grouped after rounding so float noise in labels cannot split a grid cell
_KEY_DECIMALS = 6


def _position_key(dx, dy):
    return (round(float(dx), _KEY_DECIMALS), round(float(dy), _KEY_DECIMALS))


@dataclass
class EvalReport:
    mae_x: float
    mae_y: float
    mae_avg: float
    sd_x: float
    sd_y: float
    sd_avg: float
    per_position_errors: Dict[Tuple[float, float], float]
    per_lens_mae: Dict[int, float]
    n_samples: int
    preset: str = ""
    metadata: Dict = field(default_factory=lambda: {"sd_over": "absolute_errors"})

    def row(self):
        return {
            "name": self.preset,
            "mae_x": self.mae_x,
            "sd_x": self.sd_x,
            "mae_y": self.mae_y,
            "sd_y": self.sd_y,
            "mae_avg": self.mae_avg,
            "sd_avg": self.sd_avg,
        }

    def to_dict(self):
        data = self.row()
        data.update({
            "n_samples": self.n_samples,
            "per_position_errors": [
                {"dx_um": dx, "dy_um": dy, "mae_um": v} for (dx, dy), v in sorted(self.per_position_errors.items())
            ],
            "per_lens_mae": {str(k): v for k, v in sorted(self.per_lens_mae.items())},
            "metadata": dict(self.metadata),
        })
        return data

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_errors(pred, labels, lens_ids, preset=""):
    """Build a report from (N, 2) predictions and labels in micrometers"""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    if pred.shape != labels.shape:
        raise EvaluationError(f"prediction shape {pred.shape} does not match labels {labels.shape}")

    err = np.abs(pred - labels)
    mae_x, mae_y = err.mean(axis=0)
    sd_x, sd_y = err.std(axis=0)
    per_sample = err.mean(axis=1)

    cells = {}
    for (dx, dy), e in zip(labels, per_sample):
        cells.setdefault(_position_key(dx, dy), []).append(e)
    lenses = {}
    for lens_id, e in zip(lens_ids, per_sample):
        lenses.setdefault(int(lens_id), []).append(e)

    return EvalReport(
        mae_x=float(mae_x),
        mae_y=float(mae_y),
        mae_avg=float((mae_x + mae_y) / 2.0),
        sd_x=float(sd_x),
        sd_y=float(sd_y),
        sd_avg=float(err.reshape(-1).std()),
        per_position_errors={k: float(np.mean(v)) for k, v in cells.items()},
        per_lens_mae={k: float(np.mean(v)) for k, v in lenses.items()},
        n_samples=int(len(labels)),
        preset=preset,
    )


def evaluate(model, test, preset="", batch_size=128):
    """Run `model.predict_offsets` over every test capture and summarize the errors"""
    if not test.labeled:
        raise EvaluationError(f"{test.role} dataset carries no labels")
    if test.n_samples == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    pred = model.predict_offsets(test.stacked_images(), batch_size=batch_size)
    lens_ids = [lens_id for lens_id, _ in test.sample_keys()]
    report = report_from_errors(pred, test.stacked_labels(), lens_ids, preset)
    logger.info("Evaluated %s on %d samples: MAE x=%.3f y=%.3f avg=%.3f um",
                preset or "model", report.n_samples, report.mae_x, report.mae_y, report.mae_avg)
    return report


def error_heatmap(report, sampling):
    """(n, n) grid of per-position MAE; rows follow dy, columns follow dx"""
    axis = grid_axis(sampling.range_um, sampling.step_um)
    index = {_position_key(v, 0)[0]: i for i, v in enumerate(axis)}
    grid = np.full((len(axis), len(axis)), np.nan)
    for (dx, dy), value in report.per_position_errors.items():
        if dx not in index or dy not in index:
            raise EvaluationError(f"offset ({dx}, {dy}) is not a node of the {sampling.range_um}/{sampling.step_um} grid")
        grid[index[dy], index[dx]] = value
    if np.isnan(grid).any():
        raise EvaluationError("report does not cover every grid position")
    return grid


def radial_error_profile(report, range_um):
    """Mean per-position MAE over the inner and outer thirds of the decenter range"""
    inner, outer = [], []
    for (dx, dy), value in report.per_position_errors.items():
        r = float(np.hypot(dx, dy))
        if r <= range_um / 3.0:
            inner.append(value)
        elif r >= 2.0 * range_um / 3.0:
            outer.append(value)
    if not inner or not outer:
        raise EvaluationError("report has no positions in the inner or outer third of the range")
    return float(np.mean(inner)), float(np.mean(outer))


def success_threshold(range_um, reference_range=30.0, reference_threshold=2.0):
    """The 2 um acceptance box, scaled with the decenter range"""
    return reference_threshold * range_um / reference_range

