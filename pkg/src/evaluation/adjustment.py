"""
Adjustment simulation: capture, predict, move the lens by the negated prediction
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core.seeding import derive_seed
from ..simulation.optics_sim import ZERO_OFFSET, FovImageSet, MisalignmentOffset, simulate_capture

logger = logging.getLogger(__name__)

DEFAULT_SUCCESS_UM = 2.0


@dataclass
class AdjustResult:
    start: MisalignmentOffset
    predicted: MisalignmentOffset
    residual: MisalignmentOffset
    success: bool
    after: Optional[FovImageSet] = None
    before: Optional[FovImageSet] = None


def within_threshold(residual, threshold=DEFAULT_SUCCESS_UM):
    return abs(residual.dx) <= threshold and abs(residual.dy) <= threshold


def _predict(model, fovset):
    dx, dy = model.predict_offsets(fovset.images[None])[0]
    return MisalignmentOffset(float(dx), float(dy))


def adjust_once(model, lens, start, domain, rng_seed, origin=ZERO_OFFSET, threshold=DEFAULT_SUCCESS_UM):
    """One capture-predict-correct step starting `start` away from the lens's aligned origin"""
    before = simulate_capture(origin + start, lens, domain, rng_seed)
    predicted = _predict(model, before)
    residual = start - predicted
    after = simulate_capture(origin + residual, lens, domain, derive_seed(rng_seed, 1))
    return AdjustResult(start, predicted, residual, within_threshold(residual, threshold), after, before)


def adjust_iteratively(model, lens, start, domain, rng_seed, origin=ZERO_OFFSET,
                       threshold=DEFAULT_SUCCESS_UM, max_steps=3):
    """Repeat adjust_once from each residual until it lands inside the box; returns every step"""
    steps = []
    position = start
    for k in range(max_steps):
        result = adjust_once(model, lens, position, domain, derive_seed(rng_seed, k), origin, threshold)
        steps.append(result)
        if result.success:
            break
        position = result.residual
    return steps


def adjustment_summary(model, test, threshold=DEFAULT_SUCCESS_UM, rng_seed=0, max_steps=1):
    """Success rate of adjustment from every labeled test position of every test lens"""
    successes = 0
    residuals = []
    steps_used = []
    for rec, sample in test.iter_samples():
        seed = derive_seed(rng_seed, rec.lens.lens_id, sample.sample_id)
        if max_steps == 1:
            trail = [adjust_once(model, rec.lens, sample.label, test.domain, seed, rec.origin, threshold)]
        else:
            trail = adjust_iteratively(model, rec.lens, sample.label, test.domain, seed, rec.origin,
                                       threshold, max_steps)
        final = trail[-1]
        successes += final.success
        residuals.append(final.residual.magnitude)
        steps_used.append(len(trail))

    n = len(residuals)
    summary = {
        "n_starts": n,
        "threshold_um": threshold,
        "max_steps": max_steps,
        "success_rate": successes / n if n else 0.0,
        "mean_residual_um": float(np.mean(residuals)) if n else 0.0,
        "mean_steps": float(np.mean(steps_used)) if n else 0.0,
    }
    logger.info("Adjustment: %d/%d starts within %.2f um", successes, n, threshold)
    return summary


def adjustment_examples(model, test, threshold=DEFAULT_SUCCESS_UM, rng_seed=0, n_lenses=3):
    """One adjust_once per test lens, started from its farthest labeled position"""
    examples = []
    for rec in test.lenses[:n_lenses]:
        labeled = [s for s in rec.samples if s.label is not None]
        if not labeled:
            continue
        sample = max(labeled, key=lambda s: (s.label.magnitude, -s.sample_id))
        seed = derive_seed(rng_seed, rec.lens.lens_id, sample.sample_id)
        examples.append((rec.lens.lens_id, adjust_once(model, rec.lens, sample.label, test.domain, seed,
                                                        rec.origin, threshold)))
    return examples
