"""
Decenter sampling plans: grid enumeration and the sampling configuration record
"""

import math
from dataclasses import dataclass, field

from ..core.errors import InvalidInputError
from .optics_sim import MisalignmentOffset, ToleranceSpec


@dataclass(frozen=True)
class SamplingConfig:
    range_um: float = 15.0
    step_um: float = 3.0
    n_random: int = 30
    sparse_step_multiplier: int = 5
    prealign: bool = True
    prealign_range_um: float = 6.0
    prealign_step_um: float = 1.0
    tolerance: ToleranceSpec = field(default_factory=ToleranceSpec)

    def grid(self):
        return grid_positions(self.range_um, self.step_um)

    @property
    def grid_size(self):
        return grid_count(self.range_um, self.step_um)


def _steps_per_side(range_um, step_um):
    if not (range_um > 0 and step_um > 0):
        raise InvalidInputError(f"range ({range_um}) and step ({step_um}) must both be positive")
    ratio = range_um / step_um
    n = round(ratio)
    if n < 1 or not math.isclose(ratio, n, rel_tol=0, abs_tol=1e-9):
        raise InvalidInputError(f"range {range_um} is not divisible by step {step_um}")
    return n


def grid_count(range_um, step_um):
    n = _steps_per_side(range_um, step_um)
    return (2 * n + 1) ** 2


def grid_axis(range_um, step_um):
    n = _steps_per_side(range_um, step_um)
    return [k * step_um for k in range(-n, n + 1)]


def grid_positions(range_um, step_um):
    """Row-major Cartesian grid: dy is the outer loop, dx the inner one"""
    axis = grid_axis(range_um, step_um)
    return [MisalignmentOffset(float(dx), float(dy)) for dy in axis for dx in axis]
