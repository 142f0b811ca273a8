from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage, stats

from adaptive_iris import degradation as deg
from adaptive_iris.degradation import (
    PROFILES,
    DegradationSpec,
    apply_degradation,
    brightness_contrast,
    downsample_to_diameter,
    gaussian_blur,
    horizontal_shift,
    normalize_cropped,
    sample_degradation,
)
from adaptive_iris.geometry import CroppedIris, IrisLocalization, NormalizedIris, area_resample

LOC = IrisLocalization((96.0, 96.0), 30.0, (96.0, 96.0), 80.0)


def crop(pixels) -> CroppedIris:
    return CroppedIris(np.asarray(pixels, dtype=np.float64), LOC)


@pytest.fixture
def textured(rng):
    return crop(rng.random((192, 192)))


# --- spec record --------------------------------------------------------------------

def test_spec_json_round_trip():
    s = DegradationSpec(blur_sigma=1.5, target_iris_diameter=44.0, brightness_delta=-0.2,
                        contrast_delta=0.1, shift_pixels=-7, seed=9)
    assert DegradationSpec.from_json(s.to_json()) == s
    assert DegradationSpec.from_json(DegradationSpec().to_json()).target_iris_diameter is None


@pytest.mark.parametrize("kw", [
    {"blur_sigma": -0.1}, {"target_iris_diameter": 19.9}, {"target_iris_diameter": 161.0},
    {"brightness_delta": 0.51}, {"contrast_delta": -0.6}, {"shift_pixels": 11}, {"shift_pixels": 1.5},
])
def test_spec_invariants(kw):
    with pytest.raises(ValueError):
        DegradationSpec(**kw)


def test_without_resolution_loss_keeps_photometric_part():
    s = DegradationSpec(blur_sigma=2.0, target_iris_diameter=50.0, brightness_delta=0.1, shift_pixels=3, seed=4)
    c = s.without_resolution_loss()
    assert (c.blur_sigma, c.target_iris_diameter) == (0.0, None)
    assert (c.brightness_delta, c.shift_pixels, c.seed) == (0.1, 3, 4)


def test_canonical_profiles():
    assert PROFILES["HR"].sigma_range == (0.0, 1.0) and PROFILES["HR"].diameter_range == (120.0, 160.0)
    assert PROFILES["MR"].sigma_range == (1.0, 3.0) and PROFILES["MR"].diameter_range == (60.0, 120.0)
    assert PROFILES["LR"].sigma_range == (3.0, 5.0) and PROFILES["LR"].diameter_range == (20.0, 60.0)


# --- blur -------------------------------------------------------------------------------

def test_blur_sigma_zero_is_identity(textured):
    assert np.array_equal(gaussian_blur(textured.pixels, 0.0), textured.pixels)


@pytest.mark.parametrize("sigma", [0.3, 1.0, 4.7])
def test_blur_preserves_constant(sigma):
    img = np.full((50, 60), 0.61)
    assert np.array_equal(gaussian_blur(img, sigma), img)


def test_blur_impulse_matches_dense_gaussian():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    out = gaussian_blur(img, 1.0)
    # dense 2-D kernel on the truncated support, convolved directly
    r = math.ceil(3.0)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    k2 = np.exp(-(x**2 + y**2) / 2.0)
    k2 /= k2.sum()
    dense = ndimage.convolve(img, k2, mode="reflect")
    np.testing.assert_allclose(out, dense, atol=1e-15)
    assert abs(out[20, 20] - 1.0 / (2 * math.pi)) < 1e-3


def test_blur_kernel_radius_and_normalization():
    k = deg.gaussian_kernel(1.4)
    assert k.size == 2 * math.ceil(3 * 1.4) + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


def test_blur_rejects_negative():
    with pytest.raises(ValueError):
        gaussian_blur(np.zeros((4, 4)), -1.0)


# --- down-sampling ---------------------------------------------------------------------

def test_downsample_160_is_identity(textured):
    out = downsample_to_diameter(textured, 160.0)
    np.testing.assert_array_max_ulp(out.pixels, textured.pixels, maxulp=1)
    assert out.nominal_iris_diameter == 160.0


def test_downsample_80_collapses_checkerboard():
    checker = (np.indices((192, 192)).sum(axis=0) % 2).astype(float)
    mid = area_resample(checker, 96, 96)
    oracle = checker.reshape(96, 2, 96, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(mid, oracle, atol=1e-15)
    np.testing.assert_allclose(mid, 0.5, atol=1e-15)
    out = downsample_to_diameter(crop(checker), 80.0)
    np.testing.assert_allclose(out.pixels, 0.5, atol=1e-12)
    assert out.nominal_iris_diameter == 80.0


@pytest.mark.parametrize("d, side", [(20.0, 24), (80.0, 96), (60.0, 72), (47.3, 57)])
def test_downsample_intermediate_frame(monkeypatch, textured, d, side):
    shapes = []
    real = deg.area_resample

    def spy(img, h, w):
        shapes.append((h, w))
        return real(img, h, w)

    monkeypatch.setattr(deg, "area_resample", spy)
    downsample_to_diameter(textured, d)
    assert shapes == [(side, side), (192, 192)]


@pytest.mark.parametrize("d", [19.0, 161.0])
def test_downsample_rejects_out_of_range(textured, d):
    with pytest.raises(ValueError):
        downsample_to_diameter(textured, d)


def test_downsample_preserves_constant():
    c = crop(np.full((192, 192), 0.42))
    for d in (20.0, 33.3, 100.0, 159.0):
        assert np.array_equal(downsample_to_diameter(c, d).pixels, c.pixels)


def test_downsample_monotone_information_loss(textured):
    energies = [ndimage.laplace(downsample_to_diameter(textured, d).pixels).var() for d in (160, 120, 80, 40, 20)]
    assert all(b <= a for a, b in zip(energies, energies[1:]))


# --- photometric / shift ------------------------------------------------------------------

def test_brightness_contrast_examples():
    img = np.array([[0.5, 0.8]])
    assert np.array_equal(brightness_contrast(img, 0.0, 0.0), img)
    assert brightness_contrast(np.array([0.5]), 0.5, 0.0)[0] == 1.0
    assert brightness_contrast(np.array([0.8]), 0.0, 0.5)[0] == pytest.approx(0.95, abs=1e-15)
    with pytest.raises(ValueError):
        brightness_contrast(img, 0.6, 0.0)


def test_horizontal_shift_examples(rng):
    n = NormalizedIris(rng.random((64, 512)))
    assert np.array_equal(horizontal_shift(n, 0).pixels, n.pixels)
    assert np.array_equal(horizontal_shift(horizontal_shift(n, 3), -3).pixels, n.pixels)
    s = horizontal_shift(n, 7).pixels
    assert np.array_equal(np.sort(s, axis=None), np.sort(n.pixels, axis=None))
    assert np.array_equal(s[:, 7], n.pixels[:, 0])
    with pytest.raises(ValueError):
        horizontal_shift(n, 512)


# --- sampling ---------------------------------------------------------------------------------

def test_sampling_is_deterministic():
    for p in PROFILES.values():
        for seed in range(20):
            assert sample_degradation(p, seed) == sample_degradation(p, seed)


def test_lr_profile_statistics():
    specs = [sample_degradation(PROFILES["LR"], s) for s in range(10_000)]
    sig = np.array([s.blur_sigma for s in specs])
    active = sig > 0
    assert abs(active.mean() - 0.5) <= 0.02
    assert stats.kstest(sig[active], "uniform", args=(3.0, 2.0)).pvalue > 0.01
    for name, on in (("down", [s.target_iris_diameter is not None for s in specs]),
                     ("shift", [s.shift_pixels != 0 for s in specs])):
        frac = np.mean(on)
        # shift draws 0 with probability 1/21 even when active
        expected = 0.5 * (20 / 21) if name == "shift" else 0.5
        assert abs(frac - expected) <= 0.02, name
    dia = np.array([s.target_iris_diameter for s in specs if s.target_iris_diameter is not None])
    assert dia.min() >= 20.0 and dia.max() <= 60.0


def test_hr_profile_sigma_below_one():
    sig = [sample_degradation(PROFILES["HR"], s).blur_sigma for s in range(2000)]
    assert all(0.0 <= s < 1.0 for s in sig)
    assert any(s > 0 for s in sig)


def test_sampled_parameters_are_independent():
    specs = [sample_degradation(PROFILES["MR"], s) for s in range(4000)]
    blur = np.array([s.blur_sigma > 0 for s in specs])
    down = np.array([s.target_iris_diameter is not None for s in specs])
    assert abs((blur & down).mean() - 0.25) < 0.03


# --- composition ---------------------------------------------------------------------------------

def test_identity_spec_is_bit_identical(textured):
    out = apply_degradation(DegradationSpec(), textured)
    assert np.array_equal(out.pixels, textured.pixels)
    assert out.pending_shift == 0


def test_order_matters(textured):
    spec = DegradationSpec(blur_sigma=2.0, target_iris_diameter=80.0)
    blur_first = downsample_to_diameter(textured.with_pixels(gaussian_blur(textured.pixels, 2.0)), 80.0).pixels
    down_first = gaussian_blur(downsample_to_diameter(textured, 80.0).pixels, 2.0)
    out = apply_degradation(spec, textured).pixels
    assert np.array_equal(out, blur_first)
    assert not np.allclose(blur_first, down_first)


def test_brightness_only_matches_operator(textured):
    out = apply_degradation(DegradationSpec(brightness_delta=0.2, contrast_delta=-0.1), textured)
    assert np.array_equal(out.pixels, brightness_contrast(textured.pixels, 0.2, -0.1))


def test_shift_is_deferred_to_the_strip(textured):
    out = apply_degradation(DegradationSpec(shift_pixels=4), textured)
    assert np.array_equal(out.pixels, textured.pixels)
    assert out.pending_shift == 4
    plain = normalize_cropped(textured).pixels
    assert np.array_equal(normalize_cropped(out).pixels, np.roll(plain, 4, axis=1))


def test_apply_is_deterministic(textured):
    spec = DegradationSpec(blur_sigma=1.3, target_iris_diameter=71.0, brightness_delta=0.3, contrast_delta=0.2)
    assert np.array_equal(apply_degradation(spec, textured).pixels, apply_degradation(spec, textured).pixels)


@settings(max_examples=30, deadline=None)
@given(sigma=st.floats(0, 5), d=st.one_of(st.none(), st.floats(20, 160)), b=st.floats(-0.5, 0.5),
       c=st.floats(-0.5, 0.5), seed=st.integers(0, 2**16))
def test_degradations_stay_in_unit_interval(sigma, d, b, c, seed):
    img = crop(np.random.default_rng(seed).random((192, 192)))
    out = apply_degradation(DegradationSpec(blur_sigma=sigma, target_iris_diameter=d, brightness_delta=b,
                                            contrast_delta=c), img).pixels
    assert out.min() >= 0.0 and out.max() <= 1.0
