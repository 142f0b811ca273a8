"""Iris geometry: manifest ingestion, area resampling, square cropping and
rubber-sheet unwrapping.

Coordinates are continuous image coordinates: pixel ``(row i, col j)`` covers
``[j, j + 1) x [i, i + 1)``, so its centre sits at ``(j + 0.5, i + 0.5)``.
Circle centres are given as ``(x, y)`` in that frame.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

CROP_SIZE = 192
CROP_IRIS_DIAMETER = 160.0
NORM_HEIGHT = 64
NORM_WIDTH = 512

MANIFEST_COLUMNS = (
    "relative_image_path",
    "identity_label",
    "pupil_cx",
    "pupil_cy",
    "pupil_r",
    "iris_cx",
    "iris_cy",
    "iris_r",
)


class ManifestError(ValueError):
    """A manifest row could not be turned into a valid sample."""

    def __init__(self, row: int, message: str):
        super().__init__(f"manifest row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class IrisLocalization:
    pupil_center: tuple[float, float]
    pupil_radius: float
    iris_center: tuple[float, float]
    iris_radius: float

    def __post_init__(self):
        vals = (*self.pupil_center, self.pupil_radius, *self.iris_center, self.iris_radius)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("localization values must be finite")
        if self.pupil_radius <= 0 or self.iris_radius <= 0:
            raise ValueError("radii must be strictly positive")
        if self.pupil_radius >= self.iris_radius:
            raise ValueError(
                f"pupil_radius ({self.pupil_radius}) must be smaller than "
                f"iris_radius ({self.iris_radius})"
            )

    def check_bounds(self, shape: tuple[int, int]) -> None:
        """Raise if either circle leaves an image of the given ``(H, W)``."""
        h, w = shape
        for name, (cx, cy), r in (
            ("pupil", self.pupil_center, self.pupil_radius),
            ("iris", self.iris_center, self.iris_radius),
        ):
            if cx - r < 0 or cy - r < 0 or cx + r > w or cy + r > h:
                raise ValueError(f"{name} circle exceeds image bounds {w}x{h}")

    def transformed(self, offset: tuple[float, float], scale: float) -> "IrisLocalization":
        """Map into a frame where ``p' = (p - offset) * scale``."""
        ox, oy = offset
        return IrisLocalization(
            pupil_center=((self.pupil_center[0] - ox) * scale, (self.pupil_center[1] - oy) * scale),
            pupil_radius=self.pupil_radius * scale,
            iris_center=((self.iris_center[0] - ox) * scale, (self.iris_center[1] - oy) * scale),
            iris_radius=self.iris_radius * scale,
        )


@dataclass(frozen=True)
class CroppedIris:
    """Canonical 192x192 iris square.

    ``localization`` is expressed in the cropped frame. ``pending_shift`` is an
    angular shift (columns) to apply once the image is unwrapped.
    """

    pixels: np.ndarray
    localization: IrisLocalization
    nominal_iris_diameter: float = CROP_IRIS_DIAMETER
    pending_shift: int = 0

    def __post_init__(self):
        if self.pixels.shape != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"cropped iris must be {CROP_SIZE}x{CROP_SIZE}, got {self.pixels.shape}")

    def with_pixels(self, pixels: np.ndarray, **changes) -> "CroppedIris":
        return replace(self, pixels=pixels, **changes)


@dataclass(frozen=True)
class NormalizedIris:
    """64x512 unwrapped strip; rows are radial, columns angular (periodic)."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (NORM_HEIGHT, NORM_WIDTH):
            raise ValueError(f"normalized iris must be {NORM_HEIGHT}x{NORM_WIDTH}, got {self.pixels.shape}")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    localization: IrisLocalization
    identity: int
    identity_name: str


# --- manifest -----------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit single-channel raster as float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("L", "P"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
            raw = np.asarray(im, dtype=np.float64)
            arr = raw / 65535.0
        else:
            raise ValueError(f"{path}: expected a single-channel image, got mode {im.mode}")
    return np.clip(arr, 0.0, 1.0)


def load_manifest(path: str | Path, check_images: bool = True) -> list[ManifestEntry]:
    """Parse a manifest into validated entries.

    Rows are comma-separated with the columns in ``MANIFEST_COLUMNS``; a header
    line is optional and lines starting with ``#`` are skipped. Image paths are
    resolved relative to the manifest's directory. Identity labels are mapped to
    contiguous indices in sorted order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    raw: list[tuple[int, Path, str, IrisLocalization]] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#"):
                continue
            row = [c.strip() for c in row]
            if tuple(row) == MANIFEST_COLUMNS:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(lineno, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            rel, ident = row[0], row[1]
            try:
                pcx, pcy, pr, icx, icy, ir = (float(v) for v in row[2:])
            except ValueError as exc:
                raise ManifestError(lineno, f"non-numeric geometry ({exc})") from None
            try:
                loc = IrisLocalization((pcx, pcy), pr, (icx, icy), ir)
            except ValueError as exc:
                raise ManifestError(lineno, str(exc)) from None
            img_path = root / rel
            if check_images:
                if not img_path.is_file():
                    raise ManifestError(lineno, f"image not found: {img_path}")
                with Image.open(img_path) as im:
                    w, h = im.size
                try:
                    loc.check_bounds((h, w))
                except ValueError as exc:
                    raise ManifestError(lineno, str(exc)) from None
            raw.append((lineno, img_path, ident, loc))
    names = sorted({r[2] for r in raw})
    index = {n: i for i, n in enumerate(names)}
    return [ManifestEntry(p, loc, index[ident], ident) for _, p, ident, loc in raw]


# --- resampling ---------------------------------------------------------------

def _area_weights(n_out: int, start: float, length: float, n_src: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_src)`` matrix of area overlaps.

    Output pixel ``i`` covers ``[start + i*step, start + (i+1)*step)`` of the
    source axis, ``step = length / n_out``. Source indices outside ``[0, n_src)``
    are clamped, which replicates the edge pixels.
    """
    step = length / n_out
    edges = start + np.arange(n_out + 1) * step
    lo = math.floor(edges[0])
    hi = math.ceil(edges[-1])
    src = np.arange(lo, hi)
    overlap = np.minimum(edges[1:, None], src[None, :] + 1.0) - np.maximum(edges[:-1, None], src[None, :])
    np.clip(overlap, 0.0, None, out=overlap)
    overlap /= step
    weights = np.zeros((n_out, n_src))
    cols = np.clip(src, 0, n_src - 1)
    if lo >= 0 and hi <= n_src:
        weights[:, lo:hi] = overlap
    else:
        np.add.at(weights, (slice(None), cols), overlap)
    return weights


def _resample_window(image, y0, x0, h, w, new_h, new_w):
    wy = _area_weights(new_h, y0, h, image.shape[0])
    wx = _area_weights(new_w, x0, w, image.shape[1])
    return wy @ image @ wx.T


def area_resample(image: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Resize by area interpolation.

    Every output pixel is the area-weighted mean of the source pixels under its
    footprint, which mimics optical integration on a sensor. Same-size requests
    return an unmodified copy.
    """
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (new_h, new_w):
        return image.copy()
    if image.size and image.min() == image.max():
        # weight rows sum to 1 only up to rounding; keep flat fields exact
        return np.full((new_h, new_w), image.flat[0])
    return _resample_window(image, 0.0, 0.0, h, w, new_h, new_w)


def crop_iris_square(image: np.ndarray, loc: IrisLocalization) -> CroppedIris:
    """Cut the square around the iris and rescale it to the canonical frame.

    The iris centre lands on (96, 96) and its diameter on 160 pixels. Windows
    that run past the image border are filled by edge replication.
    """
    if loc.iris_radius <= 0 or loc.pupil_radius <= 0:
        raise ValueError("degenerate localization")
    image = np.asarray(image, dtype=np.float64)
    scale = CROP_IRIS_DIAMETER / (2.0 * loc.iris_radius)
    side = CROP_SIZE / scale
    cx, cy = loc.iris_center
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    pixels = _resample_window(image, y0, x0, side, side, CROP_SIZE, CROP_SIZE)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return CroppedIris(pixels, loc.transformed((x0, y0), scale))


def rubber_sheet_normalize(image: np.ndarray, loc: IrisLocalization) -> NormalizedIris:
    """Unwrap the iris annulus into a 64x512 strip.

    Row ``r`` sits at radial fraction ``(r + 0.5) / 64`` between the pupil
    boundary (top) and the iris boundary (bottom); column ``c`` at angle
    ``2*pi*c / 512`` measured from +x towards +y. Sampling is bilinear.
    """
    if loc.iris_radius <= 0 or loc.pupil_radius <= 0:
        raise ValueError("degenerate localization")
    image = np.asarray(image, dtype=np.float64)
    theta = 2.0 * np.pi * np.arange(NORM_WIDTH) / NORM_WIDTH
    rho = (np.arange(NORM_HEIGHT) + 0.5) / NORM_HEIGHT
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    px = loc.pupil_center[0] + loc.pupil_radius * cos_t
    py = loc.pupil_center[1] + loc.pupil_radius * sin_t
    ix = loc.iris_center[0] + loc.iris_radius * cos_t
    iy = loc.iris_center[1] + loc.iris_radius * sin_t
    x = (1.0 - rho)[:, None] * px[None, :] + rho[:, None] * ix[None, :]
    y = (1.0 - rho)[:, None] * py[None, :] + rho[:, None] * iy[None, :]
    # continuous coords -> array index coords (pixel centres at +0.5)
    out = ndimage.map_coordinates(image, [y - 0.5, x - 0.5], order=1, mode="nearest")
    np.clip(out, 0.0, 1.0, out=out)
    return NormalizedIris(out)


def load_cropped(entries: Sequence[ManifestEntry]) -> tuple[np.ndarray, list[IrisLocalization], np.ndarray]:
    """Load and crop every manifest entry.

    Returns the stacked ``(N, 192, 192)`` crops, their cropped-frame
    localizations and the identity indices.
    """
    crops, locs, ids = [], [], []
    for e in entries:
        c = crop_iris_square(load_image(e.image_path), e.localization)
        crops.append(c.pixels)
        locs.append(c.localization)
        ids.append(e.identity)
    return np.stack(crops), locs, np.asarray(ids, dtype=np.int64)
