"""In-memory iris datasets in the canonical cropped frame."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .degradation import DegradationSpec, apply_degradation, normalize_cropped
from .geometry import CroppedIris, IrisLocalization, load_cropped, load_manifest


@dataclass
class IrisDataset:
    crops: np.ndarray  # (N, 192, 192)
    localizations: list[IrisLocalization]
    identities: np.ndarray  # (N,) contiguous class ids
    num_classes: int
    name: str = "dataset"

    def __len__(self) -> int:
        return self.crops.shape[0]

    def cropped(self, i: int) -> CroppedIris:
        return CroppedIris(self.crops[i], self.localizations[i])

    def subset(self, indices, name: str | None = None) -> "IrisDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return IrisDataset(self.crops[idx], [self.localizations[i] for i in idx],
                           self.identities[idx], self.num_classes, name or self.name)

    @classmethod
    def from_manifest(cls, path: str | Path, name: str | None = None) -> "IrisDataset":
        entries = load_manifest(path)
        if not entries:
            raise ValueError(f"{path}: manifest has no rows")
        crops, locs, ids = load_cropped(entries)
        return cls(crops, locs, ids, int(ids.max()) + 1, name or Path(path).parent.name)


def split_holdout(ds: IrisDataset, holdout_per_identity: int) -> tuple[IrisDataset, IrisDataset]:
    """Keep the last ``holdout_per_identity`` samples of every identity apart.

    Both halves share the class index space, so verification on the held-out
    half is closed-set with unseen images.
    """
    train, test = [], []
    for ident in np.unique(ds.identities):
        idx = np.flatnonzero(ds.identities == ident)
        if idx.size <= holdout_per_identity:
            raise ValueError(f"identity {ident} has only {idx.size} samples")
        train.extend(idx[:-holdout_per_identity])
        test.extend(idx[-holdout_per_identity:])
    return ds.subset(sorted(train), ds.name + "-train"), ds.subset(sorted(test), ds.name + "-test")


def degrade_crops(ds: IrisDataset, indices: Sequence[int], specs: Sequence[DegradationSpec]) -> list[CroppedIris]:
    return [apply_degradation(s, ds.cropped(int(i))) for i, s in zip(indices, specs)]


def render_strips(ds: IrisDataset, indices: Sequence[int], specs: Sequence[DegradationSpec] | None = None,
                  crops: Sequence[CroppedIris] | None = None) -> torch.Tensor:
    """Degrade (optional), unwrap and stack into an ``(N, 1, 64, 512)`` tensor."""
    indices = list(indices)
    if crops is None:
        crops = degrade_crops(ds, indices, specs) if specs is not None else [ds.cropped(int(i)) for i in indices]
    arr = np.stack([normalize_cropped(c).pixels for c in crops]).astype(np.float32)
    return torch.from_numpy(arr).unsqueeze(1)
