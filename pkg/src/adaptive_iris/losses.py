"""Classification and distillation losses.

All losses take batched tensors with the batch on dimension 0 and return a
scalar averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

ARC_SCALE = 30.0
ARC_MARGIN = 0.45
MARGIN_WARMUP = 2000
COS_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha_r: float = 0.1
    alpha_cos: float = 1.0
    alpha_mag: float = 0.0001

    def __post_init__(self):
        if min(self.alpha_r, self.alpha_cos, self.alpha_mag) < 0:
            raise ValueError("loss weights must be non-negative")


class ArcFaceState(nn.Module):
    """Class prototypes plus the scale/margin used by :func:`arcface_loss`."""

    def __init__(self, num_classes: int, embed_dim: int = 256, scale: float = ARC_SCALE,
                 margin: float = 0.0, seed: int | None = None):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            w = torch.empty(num_classes, embed_dim)
            nn.init.xavier_uniform_(w)
        self.weight = nn.Parameter(w)
        self.scale = float(scale)
        self.margin = float(margin)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def frozen(self) -> bool:
        return not self.weight.requires_grad

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self.weight.requires_grad_(not value)

    def cosines(self, features: torch.Tensor) -> torch.Tensor:
        w = self.weight.detach() if self.frozen else self.weight
        return F.normalize(features, dim=1) @ F.normalize(w, dim=1).T


def _check_nonzero(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if bool((t.detach().flatten(1).norm(dim=1) == 0).any()):
            raise ValueError("zero-norm feature vector")


def arcface_loss(features: torch.Tensor, labels: torch.Tensor, state: ArcFaceState) -> torch.Tensor:
    """Additive angular margin softmax loss.

    The true-class logit is ``s * cos(theta_y + m)``; the others stay
    ``s * cos(theta_j)``. Past ``theta_y = pi - m`` the margin term would turn
    back upward and reward anti-parallel features, so there the target
    continues as ``cos(theta_y) - (1 - cos m)``, which meets -1 at the seam and
    keeps decreasing in ``theta_y``.
    """
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    labels = labels.long()
    if bool(((labels < 0) | (labels >= state.num_classes)).any()):
        raise ValueError(f"labels must lie in [0, {state.num_classes})")
    if not 0.0 <= state.margin < math.pi / 2:
        raise ValueError("margin must lie in [0, pi/2)")
    _check_nonzero(features)
    cos = state.cosines(features)
    if state.margin == 0.0:
        logits = cos
    else:
        cos_y = cos.gather(1, labels[:, None]).clamp(-1.0 + COS_EPS, 1.0 - COS_EPS)
        target = torch.where(
            cos_y > -math.cos(state.margin),
            torch.cos(torch.acos(cos_y) + state.margin),
            cos_y - (1.0 - math.cos(state.margin)),
        )
        logits = cos.scatter(1, labels[:, None], target)
    return F.cross_entropy(state.scale * logits, labels)


def reconstruction_loss(m_lr: torch.Tensor, m_hr: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample element-mean squared map difference."""
    if m_lr.shape != m_hr.shape:
        raise ValueError(f"map shapes differ: {tuple(m_lr.shape)} vs {tuple(m_hr.shape)}")
    return (m_lr - m_hr).pow(2).flatten(1).mean(dim=1).mean()


def cosine_loss(z_lr: torch.Tensor, z_hr: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - cos(z_lr, z_hr)``; lies in [0, 2]."""
    _check_nonzero(z_lr, z_hr)
    dot = (z_lr * z_hr).sum(dim=1)
    # sqrt of the product keeps identical inputs at exactly cos = 1
    denom = torch.sqrt((z_lr * z_lr).sum(dim=1) * (z_hr * z_hr).sum(dim=1))
    return (1.0 - dot / denom).mean()


def magnitude_loss(z_lr: torch.Tensor, z_hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of the embedding L2 norms."""
    if z_lr.shape[0] == 0:
        raise ValueError("empty batch")
    return (z_lr.norm(dim=1) - z_hr.norm(dim=1)).abs().mean()


def total_loss(arc, r, cos, mag, w: LossWeights = LossWeights()):
    for v in (arc, r, cos, mag):
        if not math.isfinite(float(v.detach())):
            raise ValueError("non-finite loss component")
    return arc + w.alpha_r * r + w.alpha_cos * cos + w.alpha_mag * mag


def margin_schedule(iteration: int, warmup: int = MARGIN_WARMUP, margin: float = ARC_MARGIN) -> float:
    """Zero margin during warm-up, then the full margin."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return 0.0 if iteration < warmup else margin
