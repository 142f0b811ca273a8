"""Synthetic eye images with identity-specific iris texture.

Each identity owns a band-limited texture defined in polar iris coordinates:
a few low angular/radial frequencies plus a band of high ones. Samples of one
identity share that texture and differ by rotation, pupil dilation, placement,
photometric jitter, sensor noise and annotation jitter.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import MANIFEST_COLUMNS


@dataclass(frozen=True)
class SyntheticIrisSpec:
    num_identities: int = 20
    samples_per_identity: int = 10
    image_size: int = 240
    seed: int = 0
    # texture bands: (count, angular freq range, radial cycles range, std)
    low_components: int = 6
    low_angular: tuple[int, int] = (1, 6)
    low_radial: tuple[float, float] = (0.3, 1.5)
    low_std: float = 1.0
    high_components: int = 14
    high_angular: tuple[int, int] = (16, 40)
    high_radial: tuple[float, float] = (2.0, 5.0)
    high_std: float = 1.0
    texture_contrast: float = 0.12
    # per-sample nuisance
    rotation_jitter: float = 0.08
    amplitude_jitter: float = 0.15
    noise_std: float = 0.02
    photometric_jitter: float = 0.05
    iris_radius_range: tuple[float, float] = (84.0, 100.0)
    pupil_ratio_range: tuple[float, float] = (0.3, 0.5)
    center_jitter: float = 8.0
    annotation_jitter: float = 0.5

    def __post_init__(self):
        if self.num_identities < 1 or self.samples_per_identity < 1:
            raise ValueError("need at least one identity and one sample")
        margin = self.image_size / 2 - self.iris_radius_range[1] - self.center_jitter - 2
        if margin < 0:
            raise ValueError("image_size too small for the iris radius range")


def _identity_texture(spec: SyntheticIrisSpec, ident: int) -> dict:
    rng = np.random.default_rng([spec.seed, 1, ident])
    bands = {}
    for band, n, ang, rad, std in (
        ("low", spec.low_components, spec.low_angular, spec.low_radial, spec.low_std),
        ("high", spec.high_components, spec.high_angular, spec.high_radial, spec.high_std),
    ):
        amp = rng.uniform(0.5, 1.0, n)
        amp *= std * np.sqrt(2.0 / np.sum(amp**2))
        bands[band] = dict(
            amp=amp,
            ang=rng.integers(ang[0], ang[1] + 1, n) * rng.choice([-1, 1], n),
            rad=rng.uniform(rad[0], rad[1], n),
            phase=rng.uniform(0, 2 * np.pi, n),
        )
    return bands


def texture_value(bands: dict, rho: np.ndarray, phi: np.ndarray, amp_scale=None) -> np.ndarray:
    """Evaluate a texture at radial fraction ``rho`` and angle ``phi``."""
    out = np.zeros(np.broadcast(rho, phi).shape)
    k = 0
    for b in ("low", "high"):
        p = bands[b]
        for a, n, u, ph in zip(p["amp"], p["ang"], p["rad"], p["phase"]):
            s = 1.0 if amp_scale is None else amp_scale[k]
            out += s * a * np.cos(2 * np.pi * u * rho + n * phi + ph)
            k += 1
    return out


def render_sample(spec: SyntheticIrisSpec, ident: int, sample: int) -> tuple[np.ndarray, tuple]:
    """Render one eye image; returns ``(image in [0,1], annotated circles)``.

    The annotation is ``(pupil_cx, pupil_cy, pupil_r, iris_cx, iris_cy, iris_r)``
    with a little jitter relative to the rendered circles.
    """
    bands = _identity_texture(spec, ident)
    rng = np.random.default_rng([spec.seed, 2, ident, sample])
    size = spec.image_size
    r_iris = rng.uniform(*spec.iris_radius_range)
    r_pupil = r_iris * rng.uniform(*spec.pupil_ratio_range)
    cx = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cy = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    rot = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter)
    n_comp = spec.low_components + spec.high_components
    amp_scale = 1.0 + spec.amplitude_jitter * rng.standard_normal(n_comp)
    gain = 1.0 + rng.uniform(-spec.photometric_jitter, spec.photometric_jitter)
    offset = rng.uniform(-spec.photometric_jitter, spec.photometric_jitter)

    coords = np.arange(size) + 0.5
    x, y = np.meshgrid(coords, coords)
    dx, dy = x - cx, y - cy
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx) - rot
    rho = (r - r_pupil) / (r_iris - r_pupil)
    tex = texture_value(bands, rho, phi, amp_scale)

    img = np.full((size, size), 0.75)
    img -= 0.1 * np.clip((r - r_iris) / (size / 2), 0, 1)
    annulus = (rho >= 0) & (rho <= 1)
    img[annulus] = 0.45 + spec.texture_contrast * tex[annulus]
    img[rho < 0] = 0.08
    img = (img - 0.5) * gain + 0.5 + offset
    img += spec.noise_std * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)

    j = spec.annotation_jitter
    ann = (
        cx + rng.normal(0, j), cy + rng.normal(0, j), r_pupil + rng.normal(0, j),
        cx + rng.normal(0, j), cy + rng.normal(0, j), r_iris + rng.normal(0, j),
    )
    return img, ann


def generate_synthetic_dataset(spec: SyntheticIrisSpec, out_dir: str | Path) -> Path:
    """Render all identities to 8-bit PNGs and write ``manifest.csv``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for ident in range(spec.num_identities):
        for s in range(spec.samples_per_identity):
            img, ann = render_sample(spec, ident, s)
            rel = f"images/id{ident:04d}_s{s:03d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out_dir / rel)
            rows.append([rel, f"id{ident:04d}", *(f"{v:.4f}" for v in ann)])
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    (out_dir / "synthetic_spec.json").write_text(_spec_json(spec), encoding="utf-8")
    return manifest


def _spec_json(spec: SyntheticIrisSpec) -> str:
    return json.dumps(asdict(spec), sort_keys=True, indent=2) + "\n"
