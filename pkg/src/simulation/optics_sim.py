"""
Parametric imaging model for misaligned-lens crosshair captures.

A decentered lens group blurs and drags the crosshair. The blur is modelled as
an elliptical Gaussian stretched along the effective decenter direction plus a
displaced coma lobe, bracketed by an inverse/forward ISP:

    capture = ISP( ISP^-1(crosshair) * psf(offset, field, lens) )
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import ndimage, signal

from ..core.errors import InvalidInputError
from ..core.imports import CANVAS_SIDE, NUM_FOVS
from ..core.seeding import derive_seed

logger = logging.getLogger(__name__)

DOMAIN_LABELS = ("source_clean", "source_isp", "target")


@dataclass(frozen=True)
class MisalignmentOffset:
    """Lateral decenter of the movable lens group, in micrometers"""
    dx: float
    dy: float

    def __add__(self, other):
        return MisalignmentOffset(self.dx + other.dx, self.dy + other.dy)

    def __sub__(self, other):
        return MisalignmentOffset(self.dx - other.dx, self.dy - other.dy)

    def __neg__(self):
        return MisalignmentOffset(-self.dx, -self.dy)

    @property
    def magnitude(self):
        return math.hypot(self.dx, self.dy)

    def is_finite(self):
        return math.isfinite(self.dx) and math.isfinite(self.dy)

    def as_tuple(self):
        return (float(self.dx), float(self.dy))


ZERO_OFFSET = MisalignmentOffset(0.0, 0.0)


@dataclass(frozen=True)
class FieldPoint:
    fx: float = 0.0
    fy: float = 0.0

    @property
    def radius(self):
        return math.hypot(self.fx, self.fy)


DEFAULT_FIELDS = (
    FieldPoint(0.0, 0.0),
    FieldPoint(-0.7, -0.7),
    FieldPoint(0.7, -0.7),
    FieldPoint(-0.7, 0.7),
    FieldPoint(0.7, 0.7),
)


@dataclass(frozen=True)
class ToleranceSpec:
    """Distribution of per-lens assembly tolerances"""
    shift_um: float = 5.0
    gain_low: float = 0.8
    gain_high: float = 1.2


@dataclass(frozen=True)
class LensInstance:
    """One virtual lens: a tolerance perturbation of the nominal design"""
    lens_id: int
    tolerance_shift: MisalignmentOffset = ZERO_OFFSET
    gain_parallel: float = 1.0
    gain_perp: float = 1.0
    coma_gain: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("gain_parallel", "gain_perp", "coma_gain"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be strictly positive")

    @classmethod
    def ideal(cls, lens_id=0):
        return cls(lens_id=lens_id)

    def to_dict(self):
        return {
            "lens_id": self.lens_id,
            "tolerance_shift": list(self.tolerance_shift.as_tuple()),
            "gain_parallel": self.gain_parallel,
            "gain_perp": self.gain_perp,
            "coma_gain": self.coma_gain,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data):
        dx, dy = data["tolerance_shift"]
        return cls(
            lens_id=int(data["lens_id"]),
            tolerance_shift=MisalignmentOffset(float(dx), float(dy)),
            gain_parallel=float(data["gain_parallel"]),
            gain_perp=float(data["gain_perp"]),
            coma_gain=float(data["coma_gain"]),
            rng_seed=int(data["rng_seed"]),
        )


def draw_lens(lens_id, rng_seed, tolerance=ToleranceSpec()):
    """Sample a perturbed lens; lens 0 is always the ideal design"""
    if lens_id == 0:
        return LensInstance(lens_id=0, rng_seed=rng_seed)
    rng = np.random.default_rng(rng_seed)
    sx, sy = rng.uniform(-tolerance.shift_um, tolerance.shift_um, size=2)
    g_par, g_perp, g_coma = rng.uniform(tolerance.gain_low, tolerance.gain_high, size=3)
    return LensInstance(
        lens_id=lens_id,
        tolerance_shift=MisalignmentOffset(float(sx), float(sy)),
        gain_parallel=float(g_par),
        gain_perp=float(g_perp),
        coma_gain=float(g_coma),
        rng_seed=rng_seed,
    )


@dataclass(frozen=True)
class PsfFamilyParams:
    base_sigma: float = 1.0         # pixels
    astig_coeff: float = 0.05       # pixels of extra sigma per micrometer of decenter
    coma_coeff: float = 0.08        # pixels of lobe displacement per micrometer
    smoothing_extra: float = 0.0    # pixels, 0 disables


@dataclass(frozen=True)
class IspConfig:
    gamma_range: Tuple[float, float] = (1.0, 1.0)
    scale_jitter_range: Tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0
    quantize_bits: int = 0
    extra_blur_sigma: float = 0.0

    def validate(self):
        lo, hi = self.gamma_range
        if not (0 < lo <= hi <= 8):
            raise InvalidInputError(f"gamma_range {self.gamma_range} must lie within (0, 8]")
        s_lo, s_hi = self.scale_jitter_range
        if not (0 < s_lo <= s_hi):
            raise InvalidInputError(f"scale_jitter_range {self.scale_jitter_range} is not a positive interval")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.quantize_bits not in (0, 8):
            raise InvalidInputError("quantize_bits must be 0 (off) or 8")
        if self.extra_blur_sigma < 0:
            raise InvalidInputError("extra_blur_sigma must be >= 0")
        return self

    @property
    def nominal_gamma(self):
        return 0.5 * (self.gamma_range[0] + self.gamma_range[1])

    @classmethod
    def identity(cls):
        return cls()

    def deterministic(self):
        """Same nominal response with every random element removed"""
        g = self.nominal_gamma
        return dataclasses.replace(
            self, gamma_range=(g, g), scale_jitter_range=(1.0, 1.0), noise_sigma=0.0, quantize_bits=0
        )


@dataclass(frozen=True)
class DomainConfig:
    """One imaging domain: optics family, ISP and capture geometry"""
    label: str = "source_clean"
    psf: PsfFamilyParams = field(default_factory=PsfFamilyParams)
    isp: IspConfig = field(default_factory=IspConfig)
    image_side: int = 48
    fields: Tuple[FieldPoint, ...] = DEFAULT_FIELDS
    psf_side: int = 33
    pixel_pitch_um: float = 1.0

    def validate(self):
        if self.label not in DOMAIN_LABELS:
            raise InvalidInputError(f"domain label {self.label!r} not in {DOMAIN_LABELS}")
        if not (32 <= self.image_side <= CANVAS_SIDE):
            raise InvalidInputError(f"image_side {self.image_side} must be within [32, {CANVAS_SIDE}]")
        if len(self.fields) != NUM_FOVS:
            raise InvalidInputError(f"exactly {NUM_FOVS} field points are required, got {len(self.fields)}")
        for fp in self.fields:
            if not (-1 <= fp.fx <= 1 and -1 <= fp.fy <= 1):
                raise InvalidInputError(f"field point {fp} outside [-1, 1]")
        if self.psf_side < 3 or self.psf_side % 2 == 0:
            raise InvalidInputError("psf_side must be odd and >= 3")
        if self.psf.base_sigma <= 0 or self.psf.smoothing_extra < 0:
            raise InvalidInputError("psf base_sigma must be > 0 and smoothing_extra >= 0")
        self.isp.validate()
        return self

    def noiseless(self):
        return dataclasses.replace(self, isp=self.isp.deterministic())

    def forward_isp(self):
        # Clean simulation skips the forward ISP entirely
        if self.label == "source_clean":
            return IspConfig.identity()
        return self.isp


def source_clean_domain(image_side=48):
    return DomainConfig(label="source_clean", image_side=image_side)


def source_isp_domain(image_side=48):
    isp = IspConfig(gamma_range=(1.6, 2.0), scale_jitter_range=(0.9, 1.1), noise_sigma=0.01, quantize_bits=8)
    return DomainConfig(label="source_isp", isp=isp, image_side=image_side)


def target_domain(image_side=48):
    isp = IspConfig(gamma_range=(2.0, 2.4), scale_jitter_range=(0.9, 1.1), noise_sigma=0.03, quantize_bits=8)
    return DomainConfig(
        label="target",
        psf=PsfFamilyParams(smoothing_extra=0.8),
        isp=isp,
        image_side=image_side,
    )


@dataclass(frozen=True)
class PsfKernel:
    values: np.ndarray
    pixel_pitch: float = 1.0

    @property
    def side(self):
        return self.values.shape[0]

    def centroid(self):
        """(x, y) centroid relative to the geometric center, in pixels"""
        half = self.side // 2
        yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
        return float((xx * self.values).sum()), float((yy * self.values).sum())


@dataclass
class FovImageSet:
    """The five field images captured at one misalignment position"""
    images: np.ndarray
    offset: MisalignmentOffset
    lens_id: int
    rng_seed: int

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[0] != NUM_FOVS:
            raise InvalidInputError(f"expected {NUM_FOVS} field images, got array of shape {self.images.shape}")

    @property
    def side(self):
        return self.images.shape[-1]


def _check_unit_image(img, name="image"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidInputError(f"{name} must be a square 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return arr


def _elliptical_gaussian(xx, yy, center, direction, sigma_par, sigma_perp):
    cx, cy = center
    ux, uy = direction
    px = xx - cx
    py = yy - cy
    along = px * ux + py * uy
    across = -px * uy + py * ux
    sigma_par = max(sigma_par, 1e-3)
    sigma_perp = max(sigma_perp, 1e-3)
    g = np.exp(-0.5 * (along / sigma_par) ** 2 - 0.5 * (across / sigma_perp) ** 2)
    total = g.sum()
    if total <= 0:
        return g
    return g / total


def make_psf(offset, field_point, lens, domain):
    """Field- and decenter-dependent blur kernel, normalized to unit sum"""
    if not offset.is_finite():
        raise InvalidInputError(f"offset {offset} is not finite")
    params = domain.psf

    u = np.array([offset.dx + lens.tolerance_shift.dx, offset.dy + lens.tolerance_shift.dy])
    mag = float(np.hypot(u[0], u[1]))
    direction = (u[0] / mag, u[1] / mag) if mag > 0 else (1.0, 0.0)

    sigma_par = params.base_sigma * lens.gain_parallel + params.astig_coeff * mag
    sigma_perp = params.base_sigma * lens.gain_perp + 0.4 * params.astig_coeff * mag

    half = domain.psf_side // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)

    main = _elliptical_gaussian(xx, yy, (0.0, 0.0), direction, sigma_par, sigma_perp)
    lobe_shift = params.coma_coeff * lens.coma_gain * u * (1.0 + field_point.radius)
    lobe = _elliptical_gaussian(xx, yy, (lobe_shift[0], lobe_shift[1]), direction, sigma_par, sigma_perp)
    weight = min(0.5, 0.02 * mag)
    kernel = (1.0 - weight) * main + weight * lobe

    if params.smoothing_extra > 0:
        kernel = ndimage.gaussian_filter(kernel, params.smoothing_extra, mode="constant")

    kernel = np.clip(kernel, 0.0, None)
    kernel /= kernel.sum()
    return PsfKernel(values=kernel, pixel_pitch=domain.pixel_pitch_um)


def render_crosshair_canvas():
    """Full-resolution canvas with a 1-pixel cross through the center pixel"""
    canvas = np.zeros((CANVAS_SIDE, CANVAS_SIDE), dtype=np.float64)
    c = CANVAS_SIDE // 2
    canvas[c, :] = 1.0
    canvas[:, c] = 1.0
    return canvas


def crop_centered(img, side):
    c = CANVAS_SIDE // 2
    start = c - side // 2
    return img[start:start + side, start:start + side]


def render_ideal_crosshair(domain):
    if domain.image_side < 32:
        raise InvalidInputError("image_side must be >= 32")
    return crop_centered(render_crosshair_canvas(), domain.image_side).copy()


def isp_forward(linear, isp, rng_seed):
    """Linear intensities to sensor output: scale jitter, gamma, blur, noise, quantization"""
    img = _check_unit_image(linear, "linear image")
    rng = np.random.default_rng(rng_seed)

    scale = rng.uniform(isp.scale_jitter_range[0], isp.scale_jitter_range[1])
    gamma = rng.uniform(isp.gamma_range[0], isp.gamma_range[1])
    out = np.clip(scale * img, 0.0, 1.0) ** (1.0 / gamma)

    if isp.extra_blur_sigma > 0:
        out = ndimage.gaussian_filter(out, isp.extra_blur_sigma, mode="constant")
    if isp.noise_sigma > 0:
        out = out + rng.normal(0.0, isp.noise_sigma, size=out.shape)

    out = np.clip(out, 0.0, 1.0)
    if isp.quantize_bits == 8:
        out = np.round(out * 255.0) / 255.0
    return out


def isp_inverse(img, isp):
    """Undo the nominal gamma only; noise and jitter are not invertible"""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(arr, 0.0, 1.0) ** isp.nominal_gamma


def simulate_capture(offset, lens, domain, rng_seed):
    if not offset.is_finite():
        raise InvalidInputError(f"offset {offset} is not finite")

    raw = isp_inverse(render_crosshair_canvas(), domain.isp)
    forward = domain.forward_isp()

    images = []
    for index, field_point in enumerate(domain.fields):
        kernel = make_psf(offset, field_point, lens, domain)
        blurred = signal.fftconvolve(raw, kernel.values, mode="same")
        blurred = np.clip(blurred, 0.0, 1.0)
        cropped = crop_centered(blurred, domain.image_side)
        images.append(isp_forward(cropped, forward, derive_seed(rng_seed, index)))

    return FovImageSet(images=np.stack(images), offset=offset, lens_id=lens.lens_id, rng_seed=rng_seed)


def gradient_energy(img):
    """Sum of squared finite differences along both axes"""
    arr = np.asarray(img, dtype=np.float64)
    return float((np.diff(arr, axis=0) ** 2).sum() + (np.diff(arr, axis=1) ** 2).sum())


def fovset_sharpness(images):
    """Equal-weight mean gradient energy over the field images"""
    return float(np.mean([gradient_energy(img) for img in images]))
