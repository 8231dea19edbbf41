"""
Training-curve bookkeeping: JSON-lines metrics, divergence guard, curve plots
"""

import json
import logging
import math
import os

from ..core.errors import TrainingDivergedError
from ..core.imports import MATPLOTLIB_AVAILABLE

logger = logging.getLogger(__name__)


class MetricsWriter:
    """Appends one JSON object per line; a no-op when no path is given"""

    def __init__(self, path):
        self.file = None
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self.file = open(path, "w", encoding="utf-8")

    def write(self, entry):
        if self.file:
            self.file.write(json.dumps(entry, sort_keys=True) + "\n")
            self.file.flush()

    def close(self):
        if self.file:
            self.file.close()
            self.file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def check_finite(what, iteration, **terms):
    if all(math.isfinite(v) for v in terms.values()):
        return
    detail = ", ".join(f"{k}={v:.4g}" for k, v in terms.items())
    raise TrainingDivergedError(f"{what} diverged at iteration {iteration}: {detail}")


def plot_training_curves(history, path, title="training"):
    """Write a PNG with one line per loss term"""
    if not MATPLOTLIB_AVAILABLE or not history:
        logger.warning("Skipping training curve plot for %s", title)
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    iterations = [h["iteration"] for h in history]
    keys = [k for k in history[0] if k.startswith("l_")]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in keys:
        ax.plot(iterations, [h[key] for h in history], label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_title(title)
    ax.grid(True)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
