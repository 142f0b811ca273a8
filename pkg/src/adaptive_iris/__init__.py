"""Resolution-adaptive iris feature extraction: three resolution experts with a
shared trunk, a lightweight gate that picks one per probe, the degradation
harness used to train and evaluate them, and verification metrics."""

from .degradation import PROFILES, DegradationSpec, ExpertProfile, apply_degradation, sample_degradation
from .evaluation import ScoreSet, compute_dprime, compute_eer, det_curve, match_score, sweep_eval
from .geometry import CroppedIris, IrisLocalization, NormalizedIris, crop_iris_square, rubber_sheet_normalize
from .losses import ArcFaceState, LossWeights, arcface_loss, cosine_loss, magnitude_loss, reconstruction_loss
from .model import (
    AdaptiveExtractor,
    BackboneSpec,
    ExpertLabel,
    GatingNet,
    PrerequisiteError,
    SplitConfig,
    build_extractor,
    build_gating,
    extract,
    gate,
)
from .training import GateLabelMap, StageConfig, derive_gate_labels, train_expert, train_gating, train_stage1

__version__ = "0.1.0"

__all__ = [
    "AdaptiveExtractor",
    "ArcFaceState",
    "BackboneSpec",
    "CroppedIris",
    "DegradationSpec",
    "ExpertLabel",
    "ExpertProfile",
    "GateLabelMap",
    "GatingNet",
    "IrisLocalization",
    "LossWeights",
    "NormalizedIris",
    "PROFILES",
    "PrerequisiteError",
    "ScoreSet",
    "SplitConfig",
    "StageConfig",
    "apply_degradation",
    "arcface_loss",
    "build_extractor",
    "build_gating",
    "compute_dprime",
    "compute_eer",
    "cosine_loss",
    "crop_iris_square",
    "derive_gate_labels",
    "det_curve",
    "extract",
    "gate",
    "magnitude_loss",
    "match_score",
    "reconstruction_loss",
    "rubber_sheet_normalize",
    "sample_degradation",
    "sweep_eval",
    "train_expert",
    "train_gating",
    "train_stage1",
]
