"""Invariant suite: metric oracles, loss gradients, geometry and degradation
properties, architecture contracts. Used by ``adaptive-iris verify``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .degradation import (
    PROFILES,
    DegradationSpec,
    apply_degradation,
    downsample_to_diameter,
    gaussian_blur,
    sample_degradation,
)
from .evaluation import ScoreSet, compute_dprime, compute_eer, det_curve
from .geometry import CROP_SIZE, NORM_WIDTH, CroppedIris, IrisLocalization, area_resample, rubber_sheet_normalize
from .losses import ArcFaceState, arcface_loss, cosine_loss, magnitude_loss, reconstruction_loss
from .model import (
    BackboneSpec,
    ExpertLabel,
    SplitConfig,
    build_extractor,
    build_gating,
    extractor_macs,
    gating_macs,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


# --- oracles ------------------------------------------------------------------

def brute_force_eer(genuine, impostor) -> float:
    """Reference EER by direct counting at every threshold position.

    Thresholds are every distinct score plus one above all scores; rates are
    counted by comparison against each threshold, independent of sorting.
    """
    g = np.asarray(genuine, dtype=np.float64)
    i = np.asarray(impostor, dtype=np.float64)
    thr = sorted(set(g.tolist()) | set(i.tolist())) + [math.inf]
    prev = None
    for t in thr:
        frr = float(np.count_nonzero(g < t)) / g.size
        far = float(np.count_nonzero(i >= t)) / i.size
        if frr - far >= 0:
            if prev is None or frr == far:
                return frr
            frr0, far0 = prev
            d0, d1 = frr0 - far0, frr - far
            lam = -d0 / (d1 - d0)
            return frr0 + lam * (frr - frr0)
        prev = (frr, far)
    raise AssertionError("no crossing")


def random_score_sets(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        ng, ni = rng.integers(10, 501, 2)
        sep = rng.uniform(0, 3)
        g = rng.normal(sep, 1, ng)
        i = rng.normal(0, 1, ni)
        if rng.random() < 0.3:  # coarse scores with many ties
            g, i = np.round(g, 1), np.round(i, 1)
        yield np.tanh(g / 3), np.tanh(i / 3)


def check_eer_oracle(n_sets: int = 200) -> tuple[bool, str]:
    worst = 0.0
    for g, i in random_score_sets(n_sets):
        worst = max(worst, abs(compute_eer(ScoreSet(g, i))[0] - brute_force_eer(g, i)))
    return worst < 1e-9, f"{n_sets} random sets, max |diff| = {worst:.2e}"


def check_eer_monotone_invariance() -> tuple[bool, str]:
    worst = 0.0
    for g, i in random_score_sets(30, seed=1):
        a = compute_eer(ScoreSet(g, i))[0]
        b = compute_eer(ScoreSet(np.arctanh(g * 0.999) ** 3, np.arctanh(i * 0.999) ** 3))[0]
        worst = max(worst, abs(a - b))
    return worst < 1e-12, f"max |diff| under a strictly increasing transform = {worst:.1e}"


def lists_with_moments(mean: float, std: float, n: int = 8) -> np.ndarray:
    """A list whose sample mean and sample std (ddof=1) are exactly as given."""
    z = np.arange(n, dtype=np.float64)
    z = (z - z.mean()) / z.std(ddof=1)
    return mean + std * z


def check_dprime() -> tuple[bool, str]:
    g = lists_with_moments(1.0, 1.0)
    i = lists_with_moments(0.0, 1.0)
    d = compute_dprime(ScoreSet(g, i))
    g2, i2 = lists_with_moments(0.7, 0.1, 11), lists_with_moments(0.2, 0.3, 5)
    ref = abs(np.mean(g2) - np.mean(i2)) / math.sqrt((np.var(g2, ddof=1) + np.var(i2, ddof=1)) / 2)
    d2 = compute_dprime(ScoreSet(g2, i2))
    ok = abs(d - 1.0) < 1e-15 and d2 == ref
    return ok, f"d'(1,1 vs 0,1) = {d!r}; formula match on uneven lists: {d2 == ref}"


def check_det_monotone() -> tuple[bool, str]:
    ok = True
    for g, i in random_score_sets(30, seed=2):
        c = det_curve(ScoreSet(g, i), 50)
        ok &= bool(np.all(np.diff(c.far) <= 0) and np.all(np.diff(c.frr) >= 0))
    return ok, "FAR non-increasing and FRR non-decreasing along thresholds on 30 sets"


# --- losses ---------------------------------------------------------------------

def _fd_rel_error(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> float:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    fd = torch.zeros_like(x)
    flat, fdf = x.detach().view(-1), fd.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = fn(x.detach()).item()
        flat[k] = orig - h
        dn = fn(x.detach()).item()
        flat[k] = orig
        fdf[k] = (up - dn) / (2 * h)
    denom = max(g.norm().item(), fd.norm().item(), 1e-12)
    return (g - fd).norm().item() / denom


def check_loss_gradients(n_batches: int = 50, seed: int = 0) -> tuple[bool, str]:
    rng = torch.Generator().manual_seed(seed)
    worst = {"L_arc": 0.0, "L_r": 0.0, "L_cos": 0.0, "L_mag": 0.0}
    for b in range(n_batches):
        n, d, c = 3, 6, 4
        state = ArcFaceState(c, d, seed=seed + b).double()
        state.margin = 0.45 if b % 2 else 0.0
        y = torch.randint(0, c, (n,), generator=rng)
        z = torch.randn(n, d, generator=rng, dtype=torch.float64)
        z2 = torch.randn(n, d, generator=rng, dtype=torch.float64)
        m = torch.randn(n, 2, 3, 3, generator=rng, dtype=torch.float64)
        m2 = torch.randn(n, 2, 3, 3, generator=rng, dtype=torch.float64)
        worst["L_arc"] = max(worst["L_arc"], _fd_rel_error(lambda t: arcface_loss(t, y, state), z))
        worst["L_r"] = max(worst["L_r"], _fd_rel_error(lambda t: reconstruction_loss(t, m2), m))
        worst["L_cos"] = max(worst["L_cos"], _fd_rel_error(lambda t: cosine_loss(t, z2), z))
        worst["L_mag"] = max(worst["L_mag"], _fd_rel_error(lambda t: magnitude_loss(t, z2), z))
    ok = max(worst.values()) < 1e-4
    return ok, f"{n_batches} batches, max relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def check_loss_zero_cases() -> tuple[bool, str]:
    torch.manual_seed(0)
    z = torch.randn(4, 8, dtype=torch.float64)
    m = torch.randn(4, 3, 2, 2, dtype=torch.float64)
    e1 = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    e2 = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    state = ArcFaceState(2, 2).double()
    with torch.no_grad():
        state.weight.copy_(torch.eye(2, dtype=torch.float64))
    # feature equal to its own class row: the softmax floor log(1 + e^-30)
    with torch.no_grad():
        arc = float(arcface_loss(e1, torch.tensor([0]), state))
    arc_ref = math.log1p(math.exp(-state.scale))
    vals = {
        "L_r": float(reconstruction_loss(m, m.clone())),
        "L_cos": float(cosine_loss(z, z.clone())),
        "L_mag": float(magnitude_loss(z, z.clone())),
        "L_cos_orth": float(cosine_loss(e1, e2)),
        "L_cos_anti": float(cosine_loss(e1, -e1)),
    }
    ok = vals["L_r"] == 0 and vals["L_cos"] == 0 and vals["L_mag"] == 0
    ok &= vals["L_cos_orth"] == 1.0 and vals["L_cos_anti"] == 2.0
    ok &= abs(arc - arc_ref) < 1e-15
    return ok, ", ".join(f"{k}={v!r}" for k, v in vals.items()) + f", L_arc(aligned)={arc:.2e} vs {arc_ref:.2e}"


def check_arcface_softmax_equivalence() -> tuple[bool, str]:
    torch.manual_seed(1)
    worst = 0.0
    for _ in range(20):
        state = ArcFaceState(7, 16, margin=0.0).double()
        z = torch.randn(9, 16, dtype=torch.float64)
        y = torch.randint(0, 7, (9,))
        with torch.no_grad():
            w = state.weight / state.weight.norm(dim=1, keepdim=True)
            logits = state.scale * (z / z.norm(dim=1, keepdim=True)) @ w.T
            ref = -(logits.gather(1, y[:, None]).squeeze(1) - torch.logsumexp(logits, dim=1)).mean()
            worst = max(worst, abs(float(arcface_loss(z, y, state)) - float(ref)))
    return worst < 1e-6, f"max |diff| vs normalized softmax = {worst:.1e}"


# --- geometry / degradation -------------------------------------------------------

def check_area_mean() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for f in (2, 3, 4, 8):
        img = rng.random((24 * f, 16 * f))
        worst = max(worst, abs(area_resample(img, 24, 16).mean() - img.mean()))
    return worst < 1e-6, f"max mean drift over integer factors = {worst:.1e}"


def _pattern_image(rot: float, size: int = 192) -> tuple[np.ndarray, IrisLocalization]:
    c = size / 2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = np.hypot(xx - c, yy - c)
    phi = np.arctan2(yy - c, xx - c) - rot
    img = 0.5 + 0.2 * np.cos(3 * phi + 0.3) * np.exp(-((r - 55) / 30) ** 2) + 0.15 * np.sin(5 * phi) * (r / 80)
    return np.clip(img, 0, 1), IrisLocalization((c, c), 30.0, (c, c), 80.0)


def check_rubber_sheet_equivariance() -> tuple[bool, str]:
    worst = 0.0
    for k in (7, 16, 100):
        a, loc = _pattern_image(0.0)
        b, _ = _pattern_image(2 * np.pi * k / NORM_WIDTH)
        na = rubber_sheet_normalize(a, loc).pixels
        nb = rubber_sheet_normalize(b, loc).pixels
        rng_ = na.max() - na.min()
        worst = max(worst, float(np.abs(np.roll(na, k, axis=1) - nb).max() / rng_))
    return worst < 0.02, f"max deviation / dynamic range = {worst:.2%}"


def check_constant_preservation() -> tuple[bool, str]:
    ok = True
    for v in (0.0, 0.37, 1.0):
        img = np.full((CROP_SIZE, CROP_SIZE), v)
        ok &= bool(np.array_equal(gaussian_blur(img, 2.7), img))
        c = CroppedIris(img, IrisLocalization((96.0, 96.0), 30.0, (96.0, 96.0), 80.0))
        for d in (20.0, 47.3, 80.0, 160.0):
            ok &= bool(np.array_equal(downsample_to_diameter(c, d).pixels, img))
    return ok, "blur and down-sampling leave constant images bit-identical"


def check_sampling_determinism() -> tuple[bool, str]:
    ok = all(sample_degradation(PROFILES[p], s) == sample_degradation(PROFILES[p], s)
             for p in PROFILES for s in range(50))
    rng = np.random.default_rng(3)
    img = rng.random((CROP_SIZE, CROP_SIZE))
    c = CroppedIris(img, IrisLocalization((96.0, 96.0), 30.0, (96.0, 96.0), 80.0))
    spec = DegradationSpec(blur_sigma=2.1, target_iris_diameter=63.0, brightness_delta=0.1, contrast_delta=-0.2)
    ok &= bool(np.array_equal(apply_degradation(spec, c).pixels, apply_degradation(spec, c).pixels))
    return ok, "re-sampled specs and re-applied degradations are bit-identical"


# --- architecture -------------------------------------------------------------

def check_clone_outputs() -> tuple[bool, str]:
    ex = build_extractor(BackboneSpec.preset("desk"), SplitConfig(), 0).eval()
    x = torch.rand(2, 1, 64, 512, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        outs = [ex(x, lab)[1] for lab in ExpertLabel]
    ok = all(torch.equal(outs[0], o) for o in outs[1:])
    return ok, "fresh HR/MR/LR clones give identical embeddings"


def check_gating_cost() -> tuple[bool, str]:
    parts, ok = [], True
    for preset in ("desk", "paper-shape"):
        bb = BackboneSpec.preset(preset)
        ratio = gating_macs(build_gating(bb, 0)) / extractor_macs(build_extractor(bb, SplitConfig(), 0))
        ok &= ratio < 0.25
        parts.append(f"{preset} {ratio:.3f}")
    return ok, "gating / extractor MACs: " + ", ".join(parts)


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "eer-oracle": check_eer_oracle,
    "eer-monotone-invariance": check_eer_monotone_invariance,
    "dprime-formula": check_dprime,
    "det-monotone": check_det_monotone,
    "loss-zero-cases": check_loss_zero_cases,
    "loss-gradients": check_loss_gradients,
    "arcface-margin0-softmax": check_arcface_softmax_equivalence,
    "area-resample-mean": check_area_mean,
    "rubber-sheet-equivariance": check_rubber_sheet_equivariance,
    "constant-preservation": check_constant_preservation,
    "sampling-determinism": check_sampling_determinism,
    "expert-clone-outputs": check_clone_outputs,
    "gating-cost": check_gating_cost,
}


def run_checks(names=None, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t)
        if echo:
            echo(res.line())
        results.append(res)
    return results
