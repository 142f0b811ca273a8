"""Experiment directories: config, data preparation, stage runs and sweeps.

Layout under the output directory::

    config.yaml                      resolved configuration
    data/manifest.csv, data/images/  synthetic data (when no manifest is given)
    checkpoints/{stage}/{module}.ckpt
    checkpoints/digests.json         "{stage}/{module}" -> parameter digest
    logs/{stage}.tsv                 per-iteration training log
    labels/gate_labels.json          best expert per degradation cell
    reports/                         sweep tables and DET curves
    plots/                           SVG figures and their data tables
    run_info.json                    timestamps (the only non-reproducible file)
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import torch
import yaml
from filelock import FileLock, Timeout

from .dataset import IrisDataset, split_holdout
from .degradation import PROFILES, ExpertProfile
from .evaluation import POLICIES, EvalReport, SweepGrid, sweep_eval
from .losses import ArcFaceState, LossWeights
from .model import (
    AdaptiveExtractor,
    BackboneSpec,
    GatingNet,
    PrerequisiteError,
    SplitConfig,
    build_extractor,
    build_gating,
    load_module,
    save_module,
)
from .synthetic import SyntheticIrisSpec, generate_synthetic_dataset
from .training import (
    GateLabelMap,
    StageConfig,
    default_bins,
    derive_gate_labels,
    train_expert,
    train_gating,
    train_stage1,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ADAPTIVE_IRIS_OUTPUT_ROOT"

# CLI stage name -> (training stage, prerequisite CLI stages)
STAGE_ORDER = {
    "stage1": ("HR_SHARED", ()),
    "expert_mr": ("EXPERT_MR", ("stage1",)),
    "expert_lr": ("EXPERT_LR", ("stage1",)),
    "gating": ("GATING", ("stage1", "expert_mr", "expert_lr")),
}
STAGE_MODULES = {
    "stage1": ("HR_expert", "shared", "arcface"),
    "expert_mr": ("MR_expert",),
    "expert_lr": ("LR_expert",),
    "gating": ("gating",),
}

# desk iteration budgets: total CPU for the full pipeline stays within minutes.
# Stage 1 gets the most iterations so HR is near convergence before the experts branch off.
DESK_STAGES = {
    "HR_SHARED": dict(factor=100, batch_size=32),
    "EXPERT_MR": dict(factor=200, batch_size=32),
    "EXPERT_LR": dict(factor=200, batch_size=32),
    "GATING": dict(factor=200, batch_size=32, lr=0.01),
}


class ConfigError(ValueError):
    """Invalid or unresolvable experiment configuration."""


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic: SyntheticIrisSpec = field(default_factory=SyntheticIrisSpec)
    holdout_per_identity: int = 4


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/desk"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec.preset("desk"))
    split: SplitConfig = field(default_factory=SplitConfig)
    profiles: dict[str, ExpertProfile] = field(default_factory=lambda: dict(PROFILES))
    stages: dict[str, StageConfig] = field(default_factory=dict)
    losses: LossWeights = field(default_factory=LossWeights)
    label_grid: tuple[int, int] = (5, 5)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    policies: tuple[str, ...] = POLICIES
    det_points: int = 100

    @classmethod
    def from_preset(cls, name: str, seed: int = 0) -> "ExperimentConfig":
        if name == "desk":
            stages = {}
            for st, kw in DESK_STAGES.items():
                kw = dict(kw)
                factor = kw.pop("factor")
                stages[st] = StageConfig.canonical(st, seed).scaled(factor, **kw)
            return cls(preset=name, seed=seed, out_dir="runs/desk", stages=stages)
        if name == "paper-shape":
            stages = {st: StageConfig.canonical(st, seed) for st in DESK_STAGES}
            return cls(preset=name, seed=seed, out_dir="runs/paper-shape",
                       backbone=BackboneSpec.preset("paper-shape"), stages=stages, label_grid=(11, 15))
        raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'paper-shape'")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        stages = {k: replace(v, seed=seed) for k, v in self.stages.items()}
        return replace(self, seed=seed, stages=stages)

    # --- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": {
                "manifest": self.data.manifest,
                "holdout_per_identity": self.data.holdout_per_identity,
                "synthetic": _plain(asdict(self.data.synthetic)),
            },
            "backbone": _plain(self.backbone.to_dict()),
            "split": asdict(self.split),
            "profiles": {k: _plain(asdict(v)) for k, v in self.profiles.items()},
            "stages": {k: _plain(v.to_dict()) for k, v in self.stages.items()},
            "losses": asdict(self.losses),
            "label_grid": list(self.label_grid),
            "sweep": _plain(asdict(self.sweep)),
            "policies": list(self.policies),
            "det_points": self.det_points,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "ExperimentConfig":
        """Overlay ``d`` on its preset (default ``desk``); unknown keys are errors."""
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        d = dict(d)
        base = cls.from_preset(d.pop("preset", "desk"), int(d.get("seed", 0)))
        try:
            cfg = _overlay(base, d)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if seed is not None:
            cfg = cfg.with_seed(seed)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None) -> "ExperimentConfig":
        try:
            d = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
        return cls.from_dict(d, seed)

    def validate(self) -> None:
        missing = set(DESK_STAGES) - set(self.stages)
        if missing:
            raise ConfigError(f"missing stage configs: {sorted(missing)}")
        if set(self.profiles) != {"HR", "MR", "LR"}:
            raise ConfigError("profiles must define exactly HR, MR and LR")
        bad = [p for p in self.policies if p not in POLICIES]
        if bad:
            raise ConfigError(f"unknown policies {bad}; expected a subset of {POLICIES}")
        if min(self.label_grid) < 1:
            raise ConfigError("label_grid entries must be positive")
        if self.data.holdout_per_identity < 2:
            raise ConfigError("holdout_per_identity must be >= 2 (genuine pairs need two images)")

    def resolved_out_dir(self) -> Path:
        """``out_dir``, re-rooted under ``$ADAPTIVE_IRIS_OUTPUT_ROOT`` when set and relative."""
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.out_dir)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


def _plain(obj):
    """Tuples to lists, recursively, for YAML output."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupled(obj):
    if isinstance(obj, list):
        return tuple(_tupled(v) for v in obj)
    return obj


def _overlay(base: ExperimentConfig, d: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise KeyError(f"unknown config keys {sorted(unknown)}")
    kw = {}
    for key, val in d.items():
        if key == "data":
            val = dict(val)
            syn = val.pop("synthetic", None)
            data = replace(base.data, **val)
            if syn is not None:
                syn = {k: _tupled(v) for k, v in syn.items()}
                data = replace(data, synthetic=replace(base.data.synthetic, **syn))
            kw[key] = data
        elif key == "backbone":
            kw[key] = BackboneSpec.preset(val) if isinstance(val, str) else BackboneSpec.from_dict(val)
        elif key == "split":
            kw[key] = replace(base.split, **val)
        elif key == "profiles":
            prof = dict(base.profiles)
            for name, p in val.items():
                p = {k: _tupled(v) for k, v in p.items()}
                prof[name] = replace(prof[name], **p) if name in prof else ExpertProfile(**p)
            kw[key] = prof
        elif key == "stages":
            stages = dict(base.stages)
            for name, s in val.items():
                s = dict(s)
                if "lr_milestones" in s:
                    s["lr_milestones"] = tuple(tuple(m) for m in s["lr_milestones"])
                stages[name] = replace(stages[name], **s) if name in stages else StageConfig(stage=name, **s)
            kw[key] = stages
        elif key == "losses":
            kw[key] = replace(base.losses, **val)
        elif key == "sweep":
            kw[key] = replace(base.sweep, **{k: _tupled(v) for k, v in val.items()})
        elif key in ("label_grid", "policies"):
            kw[key] = tuple(val)
        else:
            kw[key] = val
    return replace(base, **kw)


# --- experiment directory ---------------------------------------------------------

class Experiment:
    """One output directory, owned by one process at a time."""

    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None):
        self.config = config
        self.root = Path(out_dir) if out_dir is not None else config.resolved_out_dir()
        self._lock = FileLock(str(self.root) + ".lock")

    def __enter__(self) -> "Experiment":
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            self._lock.acquire(timeout=0)
        except Timeout as exc:
            raise RuntimeError(f"{self.root} is in use by another process") from exc
        return self

    def __exit__(self, *exc) -> None:
        self._lock.release()

    # paths
    def ckpt(self, stage: str, module: str) -> Path:
        return self.root / "checkpoints" / stage / f"{module}.ckpt"

    @property
    def digest_path(self) -> Path:
        return self.root / "checkpoints" / "digests.json"

    @property
    def labels_path(self) -> Path:
        return self.root / "labels" / "gate_labels.json"

    @property
    def manifest_path(self) -> Path:
        if self.config.data.manifest:
            return Path(self.config.data.manifest)
        return self.root / "data" / "manifest.csv"

    def log_path(self, stage: str) -> Path:
        return self.root / "logs" / f"{stage}.tsv"

    # bookkeeping
    def digests(self) -> dict[str, str]:
        if not self.digest_path.exists():
            return {}
        return json.loads(self.digest_path.read_text(encoding="utf-8"))

    def _record_digests(self, new: dict[str, str]) -> None:
        d = self.digests()
        d.update(new)
        self.digest_path.parent.mkdir(parents=True, exist_ok=True)
        self.digest_path.write_text(json.dumps(dict(sorted(d.items())), indent=1) + "\n", encoding="utf-8")

    def _touch_run_info(self, event: str) -> None:
        path = self.root / "run_info.json"
        info = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
        info[event] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def stage_done(self, stage: str) -> bool:
        return all(self.ckpt(stage, m).exists() for m in STAGE_MODULES[stage])

    def require(self, stages: Sequence[str]) -> None:
        missing = [s for s in stages if not self.stage_done(s)]
        if missing:
            raise PrerequisiteError(f"missing prerequisite stage(s): {', '.join(missing)}; run them first")

    def write_config(self) -> Path:
        path = self.root / "config.yaml"
        path.write_text(self.config.to_yaml(), encoding="utf-8")
        return path

    # data
    def prepare(self) -> Path:
        """Write the resolved config and make sure the dataset exists."""
        self.root.mkdir(parents=True, exist_ok=True)
        self.write_config()
        if self.config.data.manifest is None and not self.manifest_path.exists():
            generate_synthetic_dataset(self.config.data.synthetic, self.manifest_path.parent)
        IrisDataset.from_manifest(self.manifest_path)  # validate
        self._touch_run_info("prepare")
        return self.manifest_path

    def datasets(self) -> tuple[IrisDataset, IrisDataset]:
        if not self.manifest_path.exists():
            raise PrerequisiteError(f"dataset manifest {self.manifest_path} missing; run 'prepare' first")
        ds = IrisDataset.from_manifest(self.manifest_path)
        return split_holdout(ds, self.config.data.holdout_per_identity)

    # models
    def build(self) -> tuple[AdaptiveExtractor, ArcFaceState]:
        cfg = self.config
        ex = build_extractor(cfg.backbone, cfg.split, cfg.seed)
        arc = ArcFaceState(self._num_classes(), cfg.backbone.embed_dim, seed=cfg.seed + 1)
        return ex, arc

    def _num_classes(self) -> int:
        train, _ = self.datasets()
        return train.num_classes

    def load_extractor(self, stages: Sequence[str] = ("stage1", "expert_mr", "expert_lr")):
        """Extractor and ArcFace state with every available checkpoint of ``stages`` loaded."""
        ex, arc = self.build()
        if "stage1" in stages and self.stage_done("stage1"):
            self._load_into(ex.experts["HR"], "stage1", "HR_expert")
            self._load_into(ex.shared, "stage1", "shared")
            self._load_into(arc, "stage1", "arcface")
            ex.stages_done.add("HR_SHARED")
        for st in ("expert_mr", "expert_lr"):
            if st in stages and self.stage_done(st):
                lab = st[-2:].upper()
                self._load_into(ex.experts[lab], st, f"{lab}_expert")
                ex.stages_done.add(f"EXPERT_{lab}")
        ex.eval()
        return ex, arc

    def load_gating(self) -> GatingNet:
        self.require(["gating"])
        g = build_gating(self.config.backbone, self.config.seed + 2)
        self._load_into(g, "gating", "gating")
        g.eval()
        return g

    def _load_into(self, module: torch.nn.Module, stage: str, name: str) -> None:
        meta, state = load_module(self.ckpt(stage, name))
        if meta["backbone"] != json.loads(json.dumps(self.config.backbone.to_dict())):
            raise PrerequisiteError(f"{self.ckpt(stage, name)} was trained with a different backbone")
        module.load_state_dict(state)

    def _save(self, stage: str, name: str, module, extra: dict | None = None) -> Path:
        path = self.ckpt(stage, name)
        digest = save_module(path, module, name, self.config.backbone, self.config.split, extra)
        self._record_digests({f"{stage}/{name}": digest})
        return path


def _stage_config(exp: Experiment, cli_stage: str) -> StageConfig:
    return exp.config.stages[STAGE_ORDER[cli_stage][0]]


def run_stage(config: ExperimentConfig, stage: str, out_dir: str | Path | None = None) -> list[Path]:
    """Train one stage and write its checkpoints, digests and log."""
    if stage not in STAGE_ORDER:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {list(STAGE_ORDER)}")
    with Experiment(config, out_dir) as exp:
        exp.require(STAGE_ORDER[stage][1])
        train, test = exp.datasets()
        cfg = _stage_config(exp, stage)
        log.info("running %s for %d iterations", stage, cfg.total_iterations)
        if stage == "stage1":
            ex, arc = exp.build()
            tlog = train_stage1(ex, arc, train, cfg, exp.config.profiles["HR"])
            paths = [exp._save(stage, "HR_expert", ex.experts["HR"]), exp._save(stage, "shared", ex.shared),
                     exp._save(stage, "arcface", arc)]
        elif stage in ("expert_mr", "expert_lr"):
            lab = stage[-2:].upper()
            ex, arc = exp.load_extractor(("stage1",))
            tlog = train_expert(lab, ex, arc, train, cfg, exp.config.profiles[lab], weights=exp.config.losses)
            paths = [exp._save(stage, f"{lab}_expert", ex.experts[lab])]
        else:
            ex, _ = exp.load_extractor()
            labels = _labels(exp, ex, test)
            g = build_gating(exp.config.backbone, exp.config.seed + 2)
            tlog = train_gating(g, labels, train, cfg)
            paths = [exp._save(stage, "gating", g)]
            paths.append(labels.save(exp.ckpt(stage, "gate_labels").with_suffix(".json")))
        tlog.write(exp.log_path(stage))
        exp.write_config()
        exp._touch_run_info(f"train {stage}")
        return paths


def _labels(exp: Experiment, ex: AdaptiveExtractor, test: IrisDataset, recompute: bool = False) -> GateLabelMap:
    """Load the label map if it was derived from the current expert checkpoints, else derive it."""
    d = exp.digests()
    source = {k: v for k, v in d.items() if k.split("/")[0] in ("stage1", "expert_mr", "expert_lr")}
    stamp = exp.labels_path.with_suffix(".source.json")
    if not recompute and exp.labels_path.exists() and stamp.exists():
        if json.loads(stamp.read_text(encoding="utf-8")) == source:
            return GateLabelMap.load(exp.labels_path)
    ns, nd = exp.config.label_grid
    s_edges, d_edges = default_bins(ns, nd)
    labels = derive_gate_labels(ex, test, s_edges, d_edges)
    labels.save(exp.labels_path)
    stamp.write_text(json.dumps(source, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return labels


def run_derive_labels(config: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    with Experiment(config, out_dir) as exp:
        exp.require(["stage1", "expert_mr", "expert_lr"])
        _, test = exp.datasets()
        ex, _ = exp.load_extractor()
        _labels(exp, ex, test, recompute=True)
        exp._touch_run_info("derive-labels")
        return exp.labels_path


def run_sweep(config: ExperimentConfig, policies: Sequence[str] | None = None,
              out_dir: str | Path | None = None, plots: bool = True) -> list[Path]:
    """Evaluate the policies over the sweep grid; write report, DET files and plots."""
    policies = tuple(policies or config.policies)
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policies {bad}")
    with Experiment(config, out_dir) as exp:
        exp.require(["stage1", "expert_mr", "expert_lr"])
        _, test = exp.datasets()
        ex, _ = exp.load_extractor()
        gating = exp.load_gating() if "gate-net" in policies else None
        labels = _labels(exp, ex, test) if "oracle-label" in policies else None
        report = sweep_eval(ex, gating, test, exp.config.sweep, policies, labels, exp.config.seed,
                            exp.config.det_points)
        tag = report_tag(exp, test)
        rep_dir = exp.root / "reports"
        paths = [report.to_tsv(rep_dir / f"sweep_{tag}.tsv")]
        paths += report.write_det_files(rep_dir / "det", tag)
        if plots:
            from .plots import render_all

            paths += render_all(report, labels, exp.root / "plots")
        exp._touch_run_info("sweep")
        return paths


def report_tag(exp: Experiment, dataset: IrisDataset) -> str:
    """``{dataset id}_{checkpoint digest prefix}`` used in report file names."""
    d = exp.digests()
    combined = "".join(d[k] for k in sorted(d))
    return f"{dataset.name}_{hashlib.sha256(combined.encode()).hexdigest()[:10]}"


def run_plot(config: ExperimentConfig, out_dir: str | Path | None = None) -> list[Path]:
    """Re-render plots from the latest sweep report on disk."""
    from .plots import render_all

    with Experiment(config, out_dir) as exp:
        reports = sorted((exp.root / "reports").glob("sweep_*.tsv"))
        if not reports:
            raise PrerequisiteError("no sweep report found; run 'sweep' first")
        report = EvalReport.from_tsv(reports[-1])
        labels = GateLabelMap.load(exp.labels_path) if exp.labels_path.exists() else None
        return render_all(report, labels, exp.root / "plots")


def run_pipeline(config: ExperimentConfig, out_dir: str | Path | None = None) -> list[Path]:
    """prepare -> stage1 -> expert_mr -> expert_lr -> gating -> sweep."""
    with Experiment(config, out_dir) as exp:
        exp.prepare()
    paths = []
    for st in STAGE_ORDER:
        paths += run_stage(config, st, out_dir)
    paths += run_sweep(config, out_dir=out_dir)
    return paths
