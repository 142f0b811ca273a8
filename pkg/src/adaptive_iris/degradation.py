"""Resolution degradations and photometric augmentation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geometry import (
    CROP_IRIS_DIAMETER,
    CROP_SIZE,
    CroppedIris,
    NormalizedIris,
    area_resample,
    rubber_sheet_normalize,
)

MIN_DIAMETER = 20.0
MAX_DIAMETER = 160.0
MAX_SIGMA = 5.0
MAX_DELTA = 0.5
MAX_SHIFT = 10
AUGMENT_PROBABILITY = 0.5


@dataclass(frozen=True)
class DegradationSpec:
    """One sampled corruption. Identity values mean "not applied"."""

    blur_sigma: float = 0.0
    target_iris_diameter: float | None = None
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    shift_pixels: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (self.blur_sigma >= 0 and math.isfinite(self.blur_sigma)):
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        d = self.target_iris_diameter
        if d is not None and not (MIN_DIAMETER <= d <= MAX_DIAMETER):
            raise ValueError(f"target_iris_diameter must lie in [20, 160], got {d}")
        for name in ("brightness_delta", "contrast_delta"):
            v = getattr(self, name)
            if not abs(v) <= MAX_DELTA:
                raise ValueError(f"{name} must lie in [-0.5, 0.5], got {v}")
        if abs(self.shift_pixels) > MAX_SHIFT or int(self.shift_pixels) != self.shift_pixels:
            raise ValueError(f"shift_pixels must be an integer in [-10, 10], got {self.shift_pixels}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "DegradationSpec":
        return cls(**json.loads(text))

    def without_resolution_loss(self) -> "DegradationSpec":
        """Same photometric/shift augmentation, no blur or down-sampling."""
        return DegradationSpec(
            brightness_delta=self.brightness_delta,
            contrast_delta=self.contrast_delta,
            shift_pixels=self.shift_pixels,
            seed=self.seed,
        )


@dataclass(frozen=True)
class ExpertProfile:
    label: str
    sigma_range: tuple[float, float]
    diameter_range: tuple[float, float]


PROFILES = {
    "HR": ExpertProfile("HR", (0.0, 1.0), (120.0, 160.0)),
    "MR": ExpertProfile("MR", (1.0, 3.0), (60.0, 120.0)),
    "LR": ExpertProfile("LR", (3.0, 5.0), (20.0, 60.0)),
}


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma: off-centre taps overflow to exp(-inf) = 0
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, reflect padding."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    if image.size and image.min() == image.max():
        return image.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(image, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0, out=out)


def downsample_to_diameter(cropped: CroppedIris, d: float) -> CroppedIris:
    """Re-sample the canonical frame so the iris spans ``d`` pixels, then
    bring it back to 192x192. The detail lost on the way down stays lost."""
    if not (MIN_DIAMETER <= d <= MAX_DIAMETER):
        raise ValueError(f"iris diameter must lie in [20, 160], got {d}")
    side = int(round(CROP_SIZE * d / CROP_IRIS_DIAMETER))
    small = area_resample(cropped.pixels, side, side)
    back = area_resample(small, CROP_SIZE, CROP_SIZE)
    np.clip(back, 0.0, 1.0, out=back)
    return cropped.with_pixels(back, nominal_iris_diameter=float(d))


def brightness_contrast(image: np.ndarray, b_delta: float, c_delta: float) -> np.ndarray:
    """``clip((p - 0.5) * (1 + c) + 0.5 + b, 0, 1)``."""
    if abs(b_delta) > MAX_DELTA or abs(c_delta) > MAX_DELTA:
        raise ValueError("brightness/contrast deltas must lie in [-0.5, 0.5]")
    image = np.asarray(image, dtype=np.float64)
    if b_delta == 0 and c_delta == 0:
        return image.copy()
    return np.clip((image - 0.5) * (1.0 + c_delta) + 0.5 + b_delta, 0.0, 1.0)


def horizontal_shift(normalized: NormalizedIris, shift: int) -> NormalizedIris:
    """Rotate the strip along its periodic angular axis."""
    if abs(shift) > MAX_SHIFT or int(shift) != shift:
        raise ValueError(f"shift must be an integer in [-10, 10], got {shift}")
    if shift == 0:
        return NormalizedIris(normalized.pixels.copy())
    return NormalizedIris(np.roll(normalized.pixels, int(shift), axis=1))


def sample_degradation(profile: ExpertProfile, rng_seed: int) -> DegradationSpec:
    """Draw one training corruption for ``profile``.

    Brightness-contrast, shift, blur and down-sampling are each switched on
    independently with probability 0.5; active parameters are uniform over
    their ranges.
    """
    rng = np.random.default_rng(rng_seed)
    on_bc, on_shift, on_blur, on_down = rng.random(4) < AUGMENT_PROBABILITY
    b = c = 0.0
    if on_bc:
        b, c = rng.uniform(-MAX_DELTA, MAX_DELTA, size=2)
    shift = int(rng.integers(-MAX_SHIFT, MAX_SHIFT + 1)) if on_shift else 0
    sigma = float(rng.uniform(*profile.sigma_range)) if on_blur else 0.0
    diameter = float(rng.uniform(*profile.diameter_range)) if on_down else None
    return DegradationSpec(
        blur_sigma=sigma,
        target_iris_diameter=diameter,
        brightness_delta=float(b),
        contrast_delta=float(c),
        shift_pixels=shift,
        seed=int(rng_seed),
    )


def apply_degradation(spec: DegradationSpec, cropped: CroppedIris) -> CroppedIris:
    """Brightness-contrast, shift, blur, down-sampling, in that order.

    The shift acts on the unwrapped strip, so it is only recorded here (as
    ``pending_shift``) and executed by :func:`normalize_cropped`.
    """
    px = brightness_contrast(cropped.pixels, spec.brightness_delta, spec.contrast_delta)
    out = cropped.with_pixels(px, pending_shift=cropped.pending_shift + spec.shift_pixels)
    if spec.blur_sigma > 0:
        out = out.with_pixels(gaussian_blur(out.pixels, spec.blur_sigma))
    if spec.target_iris_diameter is not None:
        out = downsample_to_diameter(out, spec.target_iris_diameter)
    return out


def normalize_cropped(cropped: CroppedIris) -> NormalizedIris:
    """Unwrap a (possibly degraded) crop and apply its pending shift."""
    strip = rubber_sheet_normalize(cropped.pixels, cropped.localization)
    if cropped.pending_shift:
        strip = NormalizedIris(np.roll(strip.pixels, int(cropped.pending_shift), axis=1))
    return strip
