"""
Pre-alignment: locate the sharpest imaging position of a lens by grid search
"""

import logging

import numpy as np

from .optics_sim import ZERO_OFFSET, fovset_sharpness, simulate_capture
from .sampling import grid_positions

logger = logging.getLogger(__name__)


def prealign(lens, domain, scan_range, scan_step, center=ZERO_OFFSET):
    """Offset (relative to `center`'s frame origin) maximizing mean 5-field sharpness.

    Captures are noiseless; ties go to the smallest |offset|.
    """
    if scan_range == 0:
        return center

    candidates = [center + p for p in grid_positions(scan_range, scan_step)]
    quiet = domain.noiseless()
    scores = np.array([fovset_sharpness(simulate_capture(p, lens, quiet, 0).images) for p in candidates])

    best = scores.max()
    tied = np.flatnonzero(scores >= best - 1e-12 * abs(best))
    winner = min(tied, key=lambda i: (candidates[i].magnitude, i))
    logger.debug("Lens %d pre-aligned at (%.2f, %.2f)", lens.lens_id, candidates[winner].dx, candidates[winner].dy)
    return candidates[winner]
