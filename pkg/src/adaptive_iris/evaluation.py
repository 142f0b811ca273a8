"""Verification metrics and degradation sweeps.

Threshold convention: a pair is accepted when ``score >= t``. Hence
``FRR(t) = P(genuine < t)`` and ``FAR(t) = P(impostor >= t)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import IrisDataset, render_strips, degrade_crops
from .degradation import MAX_SIGMA, MAX_DIAMETER, MIN_DIAMETER, PROFILES, DegradationSpec
from .model import AdaptiveExtractor, ExpertLabel, GatingNet, gate_batch

POLICIES = ("gate-net", "hr-only", "random", "diameter-only", "oracle-label")


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise ValueError("scores must be finite")

    def require_nonempty(self) -> None:
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ValueError("genuine and impostor score lists must both be non-empty")


def match_score(z1, z2) -> float:
    """Cosine similarity."""
    a = np.asarray(z1, dtype=np.float64)
    b = np.asarray(z2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm feature vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(gallery: np.ndarray, probes: np.ndarray) -> np.ndarray:
    g = np.asarray(gallery, dtype=np.float64)
    p = np.asarray(probes, dtype=np.float64)
    gn, pn = np.linalg.norm(g, axis=1), np.linalg.norm(p, axis=1)
    if (gn == 0).any() or (pn == 0).any():
        raise ValueError("zero-norm feature vector")
    return np.clip((g / gn[:, None]) @ (p / pn[:, None]).T, -1.0, 1.0)


def pair_scores(gallery, gallery_ids, probes, probe_ids, gallery_src=None, probe_src=None) -> ScoreSet:
    """All gallery x probe pairs; pairs built from the same source image are skipped."""
    s = similarity_matrix(gallery, probes)
    same = np.asarray(gallery_ids)[:, None] == np.asarray(probe_ids)[None, :]
    keep = np.ones_like(same)
    if gallery_src is not None and probe_src is not None:
        keep = np.asarray(gallery_src)[:, None] != np.asarray(probe_src)[None, :]
    return ScoreSet(s[same & keep], s[~same & keep])


def _rates(scores: ScoreSet):
    """FRR/FAR at every candidate threshold (distinct scores, then +inf)."""
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    thr = np.unique(np.concatenate([g, i]))
    thr = np.append(thr, np.inf)
    frr = np.searchsorted(g, thr, side="left") / g.size
    far = 1.0 - np.searchsorted(i, thr, side="left") / i.size
    return thr, frr, far


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the threshold where FRR and FAR cross.

    Between the two thresholds that bracket a sign change of ``FRR - FAR`` the
    rates are interpolated linearly, so the value is invariant to any strictly
    increasing transform of the scores.
    """
    scores.require_nonempty()
    thr, frr, far = _rates(scores)
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # diff[-1] == 1, so a crossing exists
    if diff[k] == 0 or k == 0:
        return float(frr[k]), float(_finite(thr, k))
    lam = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = frr[k - 1] + lam * (frr[k] - frr[k - 1])
    t_lo, t_hi = thr[k - 1], _finite(thr, k)
    return float(eer), float(t_lo + lam * (t_hi - t_lo))


def _finite(thr: np.ndarray, k: int) -> float:
    if np.isfinite(thr[k]):
        return thr[k]
    return float(np.nextafter(thr[k - 1], np.inf))


def compute_dprime(scores: ScoreSet) -> float:
    """Decidability ``|mu1 - mu2| / sqrt((s1^2 + s2^2) / 2)`` with sample std."""
    if scores.genuine.size < 2 or scores.impostor.size < 2:
        raise ValueError("d-prime needs at least two scores per list")
    v1 = np.var(scores.genuine, ddof=1)
    v2 = np.var(scores.impostor, ddof=1)
    denom = math.sqrt((v1 + v2) / 2.0)
    if denom == 0:
        raise ValueError("zero combined variance")
    return abs(float(np.mean(scores.genuine) - np.mean(scores.impostor))) / denom


@dataclass
class DetCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.far.tolist(), self.frr.tolist()))


def det_curve(scores: ScoreSet, num_points: int = 100) -> DetCurve:
    """FAR/FRR at ``num_points`` evenly spaced thresholds over the score range,
    plus the two thresholds that bracket the EER crossing."""
    scores.require_nonempty()
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    lo = min(scores.genuine.min(), scores.impostor.min())
    hi = max(scores.genuine.max(), scores.impostor.max())
    grid = np.linspace(lo, hi, num_points)
    thr, frr_all, far_all = _rates(scores)
    diff = frr_all - far_all
    k = int(np.argmax(diff >= 0))
    extra = [thr[max(k - 1, 0)], _finite(thr, k)]
    t = np.unique(np.concatenate([grid, extra]))
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    frr = np.searchsorted(g, t, side="left") / g.size
    far = 1.0 - np.searchsorted(i, t, side="left") / i.size
    return DetCurve(t, far, frr)


# --- feature extraction helpers -------------------------------------------------

def embed(extractor: AdaptiveExtractor, strips: torch.Tensor, label, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, strips.shape[0], batch_size):
            _, z = extractor(strips[s:s + batch_size], label)
            out.append(z.double().numpy())
    return np.concatenate(out)


def embed_all_experts(extractor, strips, batch_size: int = 64) -> np.ndarray:
    """``(3, N, D)`` embeddings, one slab per expert."""
    return np.stack([embed(extractor, strips, lab, batch_size) for lab in ExpertLabel])


def diameter_policy(d: float) -> ExpertLabel:
    """Route by iris diameter alone, using the expert training ranges."""
    if d >= PROFILES["HR"].diameter_range[0]:
        return ExpertLabel.HR
    if d >= PROFILES["MR"].diameter_range[0]:
        return ExpertLabel.MR
    return ExpertLabel.LR


# --- sweeps --------------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    name: str
    sigma: float | None  # None: drawn per probe from [0, 5]
    diameter: float | None  # None: drawn per probe from [20, 160]
    replicas: int = 1

    @property
    def combined(self) -> bool:
        return self.sigma is None or self.diameter is None

    def describe(self) -> str:
        if self.combined:
            return json.dumps({"blur_sigma": [0.0, MAX_SIGMA], "target_iris_diameter": [MIN_DIAMETER, MAX_DIAMETER],
                               "replicas": self.replicas, "order": "blur,downsample"}, sort_keys=True)
        return DegradationSpec(blur_sigma=self.sigma, target_iris_diameter=self.diameter).to_json()


@dataclass(frozen=True)
class SweepGrid:
    diameters: tuple[float, ...] = (20, 40, 60, 80, 100, 120, 140, 160)
    sigmas: tuple[float, ...] = (0, 1, 2, 3, 4, 5)
    extra: tuple[tuple[float, float], ...] = ((5.0, 20.0),)
    combined_replicas: int = 5

    def conditions(self) -> list[Condition]:
        seen: dict[tuple, Condition] = {}
        for d in self.diameters:
            seen.setdefault((0.0, float(d)), Condition(f"s0_d{d:g}", 0.0, float(d)))
        for s in self.sigmas:
            seen.setdefault((float(s), 160.0), Condition(f"s{s:g}_d160", float(s), 160.0))
        for s, d in self.extra:
            seen.setdefault((float(s), float(d)), Condition(f"s{s:g}_d{d:g}", float(s), float(d)))
        out = list(seen.values())
        if self.combined_replicas:
            out.append(Condition("combined", None, None, self.combined_replicas))
        return out


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    det: dict[tuple[str, str], DetCurve] = field(default_factory=dict)

    COLUMNS = ("condition", "sigma", "diameter", "policy", "eer", "eer_threshold", "d_prime",
               "num_genuine", "num_impostor", "frac_hr", "frac_mr", "frac_lr", "degradation")

    def get(self, condition: str, policy: str) -> dict:
        for r in self.rows:
            if r["condition"] == condition and r["policy"] == policy:
                return r
        raise KeyError((condition, policy))

    def eer(self, condition: str, policy: str) -> float:
        return self.get(condition, policy)["eer"]

    def to_tsv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.COLUMNS])
        return path

    @classmethod
    def from_tsv(cls, path: str | Path) -> "EvalReport":
        rows = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh, delimiter="\t"):
                r = dict(rec)
                for c in ("sigma", "diameter", "eer", "eer_threshold", "d_prime", "frac_hr", "frac_mr", "frac_lr"):
                    r[c] = float(r[c]) if r[c] not in ("", "nan") else float("nan")
                for c in ("num_genuine", "num_impostor"):
                    r[c] = int(r[c])
                rows.append(r)
        return cls(rows)

    def write_det_files(self, out_dir: str | Path, prefix: str) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for (cond, policy), curve in sorted(self.det.items()):
            row = self.get(cond, policy)
            p = out_dir / f"det_{prefix}_{_grid_tag(row)}_{policy}.tsv"
            with p.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(("threshold", "far", "frr"))
                for t, a, r in zip(curve.thresholds, curve.far, curve.frr):
                    w.writerow((_fmt(t), _fmt(a), _fmt(r)))
            paths.append(p)
        return paths


def _grid_tag(row: dict) -> str:
    if row["condition"] == "combined":
        return "s0-5_d20-160"
    return f"s{row['sigma']:g}_d{row['diameter']:g}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10)) if math.isfinite(v) else "nan"
    return str(v)


def _probe_degradations(cond: Condition, n: int, rng: np.random.Generator) -> list[DegradationSpec]:
    if not cond.combined:
        spec = DegradationSpec(blur_sigma=cond.sigma, target_iris_diameter=cond.diameter)
        return [spec] * n
    sig = rng.uniform(0.0, MAX_SIGMA, n)
    dia = rng.uniform(MIN_DIAMETER, MAX_DIAMETER, n)
    return [DegradationSpec(blur_sigma=float(s), target_iris_diameter=float(d)) for s, d in zip(sig, dia)]


def route(policy: str, specs: Sequence[DegradationSpec], crops, gating=None, label_map=None,
          rng: np.random.Generator | None = None) -> np.ndarray:
    """Expert index chosen for each probe under ``policy``."""
    n = len(specs)
    if policy == "hr-only":
        return np.full(n, int(ExpertLabel.HR))
    if policy == "random":
        return rng.integers(0, len(ExpertLabel), n)
    if policy == "diameter-only":
        return np.array([int(diameter_policy(s.target_iris_diameter or MAX_DIAMETER)) for s in specs])
    if policy == "oracle-label":
        if label_map is None:
            raise ValueError("oracle-label policy needs a gate label map")
        return np.array([int(label_map.lookup(s.blur_sigma, s.target_iris_diameter or MAX_DIAMETER)) for s in specs])
    if policy == "gate-net":
        if gating is None:
            raise ValueError("gate-net policy needs a gating network")
        labels = []
        for s in range(0, len(crops), 64):
            labels += gate_batch(gating, crops[s:s + 64])
        return np.array([int(l) for l in labels])
    raise ValueError(f"unknown policy {policy!r}")


def sweep_eval(extractor: AdaptiveExtractor, gating: GatingNet | None, dataset: IrisDataset,
               grid: SweepGrid = SweepGrid(), policies: Sequence[str] = POLICIES, label_map=None,
               seed: int = 0, det_points: int = 100, require_trained: bool = True) -> EvalReport:
    """Evaluate routing policies over degradation conditions.

    Gallery: every clean image of ``dataset`` through the HR expert. Probes:
    degraded copies of the same images, routed per policy. Genuine pairs share
    an identity but never a source image.
    """
    if require_trained:
        extractor.require_trained()
    if len(np.unique(dataset.identities)) < 2:
        raise ValueError("sweep needs at least two identities")
    extractor.eval()
    if gating is not None:
        gating.eval()
    gallery = embed(extractor, render_strips(dataset, range(len(dataset))), ExpertLabel.HR)
    report = EvalReport()
    for ci, cond in enumerate(grid.conditions()):
        rng = np.random.default_rng([seed, ci])
        idx = np.tile(np.arange(len(dataset)), cond.replicas)
        specs = _probe_degradations(cond, idx.size, rng)
        crops = degrade_crops(dataset, idx, specs)
        feats = embed_all_experts(extractor, render_strips(dataset, idx, crops=crops))
        for policy in policies:
            if policy == "oracle-label" and label_map is None:
                continue
            if policy == "gate-net" and gating is None:
                continue
            prng = np.random.default_rng([seed, ci, POLICIES.index(policy)])
            choice = route(policy, specs, crops, gating, label_map, prng)
            probe = feats[choice, np.arange(idx.size)]
            scores = pair_scores(gallery, dataset.identities, probe, dataset.identities[idx],
                                 np.arange(len(dataset)), idx)
            eer, thr = compute_eer(scores)
            frac = np.bincount(choice, minlength=3) / choice.size
            report.rows.append(dict(
                condition=cond.name,
                sigma=float("nan") if cond.sigma is None else cond.sigma,
                diameter=float("nan") if cond.diameter is None else cond.diameter,
                policy=policy, eer=eer, eer_threshold=thr, d_prime=compute_dprime(scores),
                num_genuine=int(scores.genuine.size), num_impostor=int(scores.impostor.size),
                frac_hr=float(frac[0]), frac_mr=float(frac[1]), frac_lr=float(frac[2]),
                degradation=cond.describe(),
            ))
            report.det[(cond.name, policy)] = det_curve(scores, det_points)
    return report
