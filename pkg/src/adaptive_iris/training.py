"""Three-stage training: HR expert + shared trunk, distilled lower-resolution
experts, and the gating classifier."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import IrisDataset, degrade_crops, render_strips
from .degradation import (
    MAX_DIAMETER,
    MAX_SIGMA,
    MIN_DIAMETER,
    PROFILES,
    DegradationSpec,
    ExpertProfile,
    sample_degradation,
)
from .evaluation import compute_dprime, compute_eer, embed, embed_all_experts, pair_scores
from .losses import (
    ARC_MARGIN,
    MARGIN_WARMUP,
    ArcFaceState,
    LossWeights,
    arcface_loss,
    cosine_loss,
    magnitude_loss,
    margin_schedule,
    reconstruction_loss,
    total_loss,
)
from .model import (
    AdaptiveExtractor,
    ExpertLabel,
    GatingNet,
    PrerequisiteError,
    crops_to_batch,
    parameter_digest,
)

log = logging.getLogger(__name__)

STAGES = ("HR_SHARED", "EXPERT_MR", "EXPERT_LR", "GATING")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    lr: float
    batch_size: int
    total_iterations: int
    lr_milestones: tuple[tuple[int, float], ...] = ()
    momentum: float = 0.9
    weight_decay: float = 0.0005
    margin_warmup: int = MARGIN_WARMUP
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch statistics)")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")

    @classmethod
    def canonical(cls, stage: str, seed: int = 0) -> "StageConfig":
        if stage == "HR_SHARED":
            return cls(stage, 0.1, 64, 30000, ((15000, 0.1), (27000, 0.1)), seed=seed)
        if stage in ("EXPERT_MR", "EXPERT_LR"):
            return cls(stage, 0.01, 64, 30000, ((21000, 0.1),), seed=seed)
        if stage == "GATING":
            return cls(stage, 0.001, 128, 40000, (), seed=seed)
        raise ValueError(f"unknown stage {stage!r}")

    def scaled(self, factor: float, **overrides) -> "StageConfig":
        """Divide every iteration count by ``factor``; milestone ratios are kept."""
        cfg = replace(
            self,
            total_iterations=max(1, round(self.total_iterations / factor)),
            lr_milestones=tuple((round(it / factor), m) for it, m in self.lr_milestones),
            margin_warmup=round(self.margin_warmup / factor),
        )
        return replace(cfg, **overrides) if overrides else cfg

    def lr_at(self, iteration: int) -> float:
        lr = self.lr
        for it, mult in self.lr_milestones:
            if iteration >= it:
                lr *= mult
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = [list(m) for m in self.lr_milestones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["lr_milestones"] = tuple(tuple(m) for m in d.get("lr_milestones", ()))
        return cls(**d)


@dataclass
class TrainLog:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
        return path


LOSS_COLUMNS = ("iteration", "L_arc", "L_r", "L_cos", "L_mag", "L_total", "lr")


def _sgd(params, cfg: StageConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _batch_indices(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    return rng.choice(n, size=b, replace=n < b)


def _freeze_all(extractor: AdaptiveExtractor) -> None:
    for p in extractor.parameters():
        p.requires_grad_(False)


def _digests(extractor: AdaptiveExtractor, arcface: ArcFaceState | None = None) -> dict[str, str]:
    d = {f"{lab.name}_expert": parameter_digest(extractor.experts[lab.name]) for lab in ExpertLabel}
    d["shared"] = parameter_digest(extractor.shared)
    if arcface is not None:
        d["arcface"] = parameter_digest(arcface)
    return d


def recalibrate_norm_stats(modules, forward, batches) -> None:
    """Re-estimate BatchNorm running statistics of ``modules`` as a plain
    average over ``batches``; the layers are left in eval mode.

    Running averages collected while the weights move lag behind the final
    network, which matters when the batch variance of a feature is small.
    """
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
        m.train()
    with torch.no_grad():
        for x in batches:
            forward(x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
        m.eval()


def _augmented_pass(dataset: IrisDataset, profile: ExpertProfile, batch_size: int, seed: int, passes: int = 2):
    """Yield augmented strip batches covering the dataset ``passes`` times."""
    rng = np.random.default_rng([seed, 17])
    for _ in range(passes):
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if idx.size < 2:
                continue
            specs = [sample_degradation(profile, int(v)) for v in rng.integers(0, 2**62, idx.size)]
            yield render_strips(dataset, idx, specs)


def train_stage1(extractor: AdaptiveExtractor, arcface: ArcFaceState, dataset: IrisDataset,
                 cfg: StageConfig, profile: ExpertProfile = PROFILES["HR"]) -> TrainLog:
    """Train the HR expert, the shared module and the class prototypes with
    ArcFace on HR-profile augmented images. Other experts stay untouched."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if arcface.num_classes != dataset.num_classes:
        raise ValueError(f"ArcFace has {arcface.num_classes} classes, dataset {dataset.num_classes}")
    _freeze_all(extractor)
    hr, shared = extractor.experts["HR"], extractor.shared
    trainable = list(hr.parameters()) + list(shared.parameters())
    for p in trainable:
        p.requires_grad_(True)
    arcface.frozen = False
    opt = _sgd(trainable + [arcface.weight], cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    extractor.eval()
    hr.train()
    shared.train()
    tlog = TrainLog(LOSS_COLUMNS)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for it in range(cfg.total_iterations):
            lr = cfg.lr_at(it)
            _set_lr(opt, lr)
            arcface.margin = margin_schedule(it, cfg.margin_warmup)
            idx = _batch_indices(rng, len(dataset), cfg.batch_size)
            specs = [sample_degradation(profile, int(s)) for s in rng.integers(0, 2**62, idx.size)]
            x = render_strips(dataset, idx, specs)
            y = torch.from_numpy(dataset.identities[idx])
            _, z = extractor(x, ExpertLabel.HR)
            loss = arcface_loss(z, y, arcface)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            v = float(loss.detach())
            tlog.rows.append((it, v, 0.0, 0.0, 0.0, v, lr))
    arcface.margin = margin_schedule(cfg.total_iterations, cfg.margin_warmup)
    extractor.eval()
    recalibrate_norm_stats([hr, shared], lambda x: extractor(x, ExpertLabel.HR),
                           _augmented_pass(dataset, profile, cfg.batch_size, cfg.seed))
    extractor.stages_done.add("HR_SHARED")
    return tlog


def train_expert(label, extractor: AdaptiveExtractor, arcface: ArcFaceState, dataset: IrisDataset,
                 cfg: StageConfig, profile: ExpertProfile | None = None, degrade: bool = True,
                 weights: LossWeights = LossWeights(), init_from_hr: bool = True) -> TrainLog:
    """Distil a lower-resolution expert from the frozen HR path.

    Each batch feeds the augmented clean image to the HR expert and the same
    image, additionally blurred/down-sampled from ``profile``, to the target
    expert; only the target expert's parameters move.
    """
    label = ExpertLabel.parse(label)
    if label is ExpertLabel.HR:
        raise ValueError("the HR expert is trained in stage 1")
    if "HR_SHARED" not in extractor.stages_done:
        raise PrerequisiteError("stage 1 (HR expert + shared) must be trained first")
    profile = profile or PROFILES[label.name]
    target = extractor.experts[label.name]
    if init_from_hr:
        target.load_state_dict(extractor.experts["HR"].state_dict())
    _freeze_all(extractor)
    for p in target.parameters():
        p.requires_grad_(True)
    arcface.frozen = True
    arcface.margin = ARC_MARGIN
    before = _digests(extractor, arcface)
    opt = _sgd(list(target.parameters()), cfg)
    rng = np.random.default_rng([cfg.seed, 12, int(label)])
    extractor.eval()
    target.train()
    tlog = TrainLog(LOSS_COLUMNS)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for it in range(cfg.total_iterations):
            lr = cfg.lr_at(it)
            _set_lr(opt, lr)
            idx = _batch_indices(rng, len(dataset), cfg.batch_size)
            specs = [sample_degradation(profile, int(s)) for s in rng.integers(0, 2**62, idx.size)]
            clean_specs = [s.without_resolution_loss() for s in specs]
            x_clean = render_strips(dataset, idx, clean_specs)
            x_deg = render_strips(dataset, idx, specs) if degrade else x_clean
            y = torch.from_numpy(dataset.identities[idx])
            with torch.no_grad():
                m_hr, z_hr = extractor(x_clean, ExpertLabel.HR)
            m_lr, z_lr = extractor(x_deg, label)
            l_arc = arcface_loss(z_lr, y, arcface)
            l_r = reconstruction_loss(m_lr, m_hr)
            l_cos = cosine_loss(z_lr, z_hr)
            l_mag = magnitude_loss(z_lr, z_hr)
            loss = total_loss(l_arc, l_r, l_cos, l_mag, weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            vals = [float(v.detach()) for v in (l_arc, l_r, l_cos, l_mag, loss)]
            tlog.rows.append((it, *vals, lr))
    extractor.eval()
    recalibrate_norm_stats([target], lambda x: extractor(x, label),
                           _augmented_pass(dataset, profile, cfg.batch_size, cfg.seed))
    after = _digests(extractor, arcface)
    for k in before:
        if k != f"{label.name}_expert" and before[k] != after[k]:
            raise RuntimeError(f"frozen module {k} changed during expert training")
    extractor.stages_done.add(f"EXPERT_{label.name}")
    return tlog


# --- gate labels -----------------------------------------------------------------

@dataclass
class GateLabelMap:
    """Best expert per (blur sigma bin, iris diameter bin)."""

    sigma_edges: np.ndarray
    diameter_edges: np.ndarray
    labels: np.ndarray  # (n_sigma, n_diameter) expert indices
    eer: np.ndarray  # (n_sigma, n_diameter, 3)
    dprime: np.ndarray  # (n_sigma, n_diameter, 3)

    @property
    def sigma_mids(self) -> np.ndarray:
        return 0.5 * (self.sigma_edges[1:] + self.sigma_edges[:-1])

    @property
    def diameter_mids(self) -> np.ndarray:
        return 0.5 * (self.diameter_edges[1:] + self.diameter_edges[:-1])

    def cell(self, sigma: float, diameter: float) -> tuple[int, int]:
        i = int(np.clip(np.searchsorted(self.sigma_edges, sigma, side="right") - 1, 0, len(self.sigma_edges) - 2))
        j = int(np.clip(np.searchsorted(self.diameter_edges, diameter, side="right") - 1, 0,
                        len(self.diameter_edges) - 2))
        return i, j

    def lookup(self, sigma: float, diameter: float) -> ExpertLabel:
        return ExpertLabel(int(self.labels[self.cell(sigma, diameter)]))

    def to_dict(self) -> dict:
        return {
            "sigma_edges": self.sigma_edges.tolist(),
            "diameter_edges": self.diameter_edges.tolist(),
            "labels": [[ExpertLabel(int(v)).name for v in row] for row in self.labels],
            "eer": np.round(self.eer, 10).tolist(),
            "dprime": np.round(self.dprime, 10).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateLabelMap":
        return cls(
            np.asarray(d["sigma_edges"], dtype=np.float64),
            np.asarray(d["diameter_edges"], dtype=np.float64),
            np.array([[int(ExpertLabel[v]) for v in row] for row in d["labels"]]),
            np.asarray(d["eer"], dtype=np.float64),
            np.asarray(d["dprime"], dtype=np.float64),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "GateLabelMap":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def best_expert(eers, dprimes) -> ExpertLabel:
    """Lowest EER; ties by higher d-prime, then toward the lower-resolution expert."""
    eers = np.asarray(eers)
    dprimes = np.asarray(dprimes)
    cand = np.flatnonzero(eers == eers.min())
    d = dprimes[cand]
    cand = cand[d == d.max()]
    return ExpertLabel(int(cand.max()))


def default_bins(n_sigma: int = 5, n_diameter: int = 5) -> tuple[np.ndarray, np.ndarray]:
    return np.linspace(0.0, MAX_SIGMA, n_sigma + 1), np.linspace(MIN_DIAMETER, MAX_DIAMETER, n_diameter + 1)


def derive_gate_labels(extractor: AdaptiveExtractor, eval_dataset: IrisDataset, sigma_bins=None,
                       diameter_bins=None, require_trained: bool = True) -> GateLabelMap:
    """Find the best expert for each degradation cell.

    Probes are degraded at the cell midpoint and scored against clean gallery
    features from the HR expert; same-source pairs are excluded.
    """
    if require_trained:
        extractor.require_trained()
    if len(np.unique(eval_dataset.identities)) < 2:
        raise ValueError("deriving gate labels needs at least two identities")
    s_def, d_def = default_bins()
    s_edges = np.asarray(s_def if sigma_bins is None else sigma_bins, dtype=np.float64)
    d_edges = np.asarray(d_def if diameter_bins is None else diameter_bins, dtype=np.float64)
    extractor.eval()
    n = len(eval_dataset)
    idx = np.arange(n)
    gallery = embed(extractor, render_strips(eval_dataset, idx), ExpertLabel.HR)
    ids = eval_dataset.identities
    shape = (len(s_edges) - 1, len(d_edges) - 1)
    labels = np.zeros(shape, dtype=np.int64)
    eer = np.zeros(shape + (3,))
    dpr = np.zeros(shape + (3,))
    for i, s in enumerate(0.5 * (s_edges[1:] + s_edges[:-1])):
        for j, d in enumerate(0.5 * (d_edges[1:] + d_edges[:-1])):
            spec = DegradationSpec(blur_sigma=float(s), target_iris_diameter=float(d))
            feats = embed_all_experts(extractor, render_strips(eval_dataset, idx, [spec] * n))
            for k in range(3):
                sc = pair_scores(gallery, ids, feats[k], ids, idx, idx)
                eer[i, j, k] = compute_eer(sc)[0]
                dpr[i, j, k] = compute_dprime(sc)
            labels[i, j] = int(best_expert(eer[i, j], dpr[i, j]))
    return GateLabelMap(s_edges, d_edges, labels, eer, dpr)


# --- gating ----------------------------------------------------------------------

GATE_COLUMNS = ("iteration", "loss", "accuracy", "lr")


def _uniform_degradations(rng: np.random.Generator, n: int):
    sig = rng.uniform(0.0, MAX_SIGMA, n)
    dia = rng.uniform(MIN_DIAMETER, MAX_DIAMETER, n)
    return sig, dia, [DegradationSpec(blur_sigma=float(s), target_iris_diameter=float(d)) for s, d in zip(sig, dia)]


def _gating_pass(dataset: IrisDataset, batch_size: int, seed: int, passes: int = 2):
    rng = np.random.default_rng([seed, 18])
    for _ in range(passes):
        order = rng.permutation(len(dataset))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if idx.size >= 2:
                yield crops_to_batch(degrade_crops(dataset, idx, _uniform_degradations(rng, idx.size)[2]))


def train_gating(gating: GatingNet, label_map: GateLabelMap | None, dataset: IrisDataset,
                 cfg: StageConfig) -> TrainLog:
    """Cross-entropy training of the gate on uniformly degraded images."""
    if label_map is None:
        raise PrerequisiteError("gate label map is required to train the gating module")
    for p in gating.parameters():
        p.requires_grad_(True)
    opt = _sgd(list(gating.parameters()), cfg)
    rng = np.random.default_rng([cfg.seed, 13])
    gating.train()
    tlog = TrainLog(GATE_COLUMNS)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for it in range(cfg.total_iterations):
            lr = cfg.lr_at(it)
            _set_lr(opt, lr)
            idx = _batch_indices(rng, len(dataset), cfg.batch_size)
            sig, dia, specs = _uniform_degradations(rng, idx.size)
            crops = degrade_crops(dataset, idx, specs)
            y = torch.tensor([int(label_map.lookup(s, d)) for s, d in zip(sig, dia)])
            logits = gating(crops_to_batch(crops))
            loss = F.cross_entropy(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            acc = float((logits.argmax(1) == y).float().mean())
            tlog.rows.append((it, float(loss.detach()), acc, lr))
    gating.eval()
    recalibrate_norm_stats([gating], gating, _gating_pass(dataset, cfg.batch_size, cfg.seed))
    return tlog
