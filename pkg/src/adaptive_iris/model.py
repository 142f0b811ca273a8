"""Backbone, resolution-expert split, gating network and checkpoints."""
from __future__ import annotations

import copy
import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .degradation import normalize_cropped
from .geometry import CROP_SIZE, NORM_HEIGHT, NORM_WIDTH, CroppedIris, NormalizedIris

CHECKPOINT_FORMAT = "adaptive-iris-ckpt/1"


class PrerequisiteError(RuntimeError):
    """A stage or artifact was requested before the ones it depends on."""


EXTRACTOR_STAGES = ("HR_SHARED", "EXPERT_MR", "EXPERT_LR")


class ExpertLabel(enum.IntEnum):
    """Expert index; also the gating logit index."""

    HR = 0
    MR = 1
    LR = 2

    @classmethod
    def parse(cls, value) -> "ExpertLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class StageSpec:
    width: int
    stride: int
    repeats: int


@dataclass(frozen=True)
class BackboneSpec:
    """Residual CNN: init block, four stages, pooled linear head."""

    stages: tuple[StageSpec, ...]
    stem_width: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = True
    block: str = "basic"
    norm: str = "group"
    embed_dim: int = 256
    in_channels: int = 1

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError(f"backbone needs exactly 4 stages, got {len(self.stages)}")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"unknown norm {self.norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)

    @classmethod
    def preset(cls, name: str) -> "BackboneSpec":
        if name == "desk":
            return cls(
                stages=(StageSpec(16, 1, 1), StageSpec(32, 2, 2), StageSpec(64, 2, 2), StageSpec(128, 2, 2)),
                stem_width=16,
                stem_kernel=7,
                stem_stride=4,
                stem_pool=False,
            )
        if name == "paper-shape":
            # ResNet50 layout on single-channel input
            return cls(
                stages=(StageSpec(64, 1, 3), StageSpec(128, 2, 4), StageSpec(256, 2, 6), StageSpec(512, 2, 3)),
                stem_width=64,
                stem_kernel=7,
                stem_stride=2,
                block="bottleneck",
                norm="batch",
            )
        raise KeyError(f"unknown backbone preset {name!r}")


SPLIT_POINTS = ("1-2", "2-3", "3-4")


@dataclass(frozen=True)
class SplitConfig:
    split_point: str = "2-3"
    order: str = "R-S"

    def __post_init__(self):
        if self.split_point not in SPLIT_POINTS:
            raise ValueError(f"split_point must be one of {SPLIT_POINTS}, got {self.split_point!r}")
        if self.order not in ("R-S", "S-R"):
            raise ValueError(f"order must be 'R-S' or 'S-R', got {self.order!r}")

    @property
    def boundary(self) -> int:
        """Number of intermediate stages on the input side."""
        return int(self.split_point[0])


# --- building blocks ---------------------------------------------------------

def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, width: int, stride: int, norm: str):
        super().__init__()
        cout = width
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _norm(norm, cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(norm, cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + idt)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int, norm: str):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.n1 = _norm(norm, width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.n2 = _norm(norm, width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.n3 = _norm(norm, cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(norm, cout))

    def forward(self, x):
        idt = x if self.down is None else self.down(x)
        out = F.relu(self.n1(self.conv1(x)))
        out = F.relu(self.n2(self.conv2(out)))
        out = self.n3(self.conv3(out))
        return F.relu(out + idt)


class Head(nn.Module):
    """Global average pool, linear projection, batch-normalized embedding.

    The final normalization strips the component shared by all pooled
    feature vectors; without it cosine-logit training stalls.
    """

    def __init__(self, cin: int, embed_dim: int):
        super().__init__()
        self.fc = nn.Linear(cin, embed_dim)
        self.bn = nn.BatchNorm1d(embed_dim)

    def forward(self, x):
        return self.bn(self.fc(x.mean(dim=(2, 3))))


def _stem(spec: BackboneSpec) -> nn.Sequential:
    layers = [
        nn.Conv2d(spec.in_channels, spec.stem_width, spec.stem_kernel, spec.stem_stride,
                  spec.stem_kernel // 2, bias=False),
        _norm(spec.norm, spec.stem_width),
        nn.ReLU(),
    ]
    if spec.stem_pool:
        layers.append(nn.MaxPool2d(3, 2, 1))
    return nn.Sequential(*layers)


def _stage(spec: BackboneSpec, idx: int, cin: int) -> tuple[nn.Sequential, int]:
    block = BasicBlock if spec.block == "basic" else Bottleneck
    st = spec.stages[idx]
    blocks = []
    for r in range(st.repeats):
        blocks.append(block(cin, st.width, st.stride if r == 0 else 1, spec.norm))
        cin = st.width * block.expansion
    return nn.Sequential(*blocks), cin


def backbone_segments(spec: BackboneSpec) -> list[nn.Module]:
    """``[init, stage1, stage2, stage3, stage4, head]``."""
    segs: list[nn.Module] = [_stem(spec)]
    c = spec.stem_width
    for i in range(4):
        s, c = _stage(spec, i, c)
        segs.append(s)
    segs.append(Head(c, spec.embed_dim))
    return segs


# --- extractor ----------------------------------------------------------------

class AdaptiveExtractor(nn.Module):
    """Three resolution experts plus one shared sub-network.

    With ``R-S`` ordering each expert holds the init block and the stages up to
    the split; the shared module holds the remaining stages and the head. With
    ``S-R`` the roles are swapped.
    """

    def __init__(self, backbone: BackboneSpec, split: SplitConfig, experts: nn.ModuleDict, shared: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.split = split
        self.experts = experts
        self.shared = shared
        self.stages_done: set[str] = set()

    def require_trained(self) -> None:
        missing = [s for s in EXTRACTOR_STAGES if s not in self.stages_done]
        if missing:
            raise PrerequisiteError(f"untrained extractor stages: {missing}")

    def forward(self, x: torch.Tensor, label) -> tuple[torch.Tensor, torch.Tensor]:
        expert = self.experts[ExpertLabel.parse(label).name]
        if self.split.order == "R-S":
            m = expert(x)
            return m, self.shared(m)
        m = self.shared(x)
        return m, expert(m)


def build_extractor(backbone: BackboneSpec, split: SplitConfig, rng_seed: int) -> AdaptiveExtractor:
    """Instantiate the extractor; all experts start as clones of one init."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        segs = backbone_segments(backbone)
    k = split.boundary + 1
    first, second = nn.Sequential(*segs[:k]), nn.Sequential(*segs[k:])
    if split.order == "R-S":
        expert, shared = first, second
    else:
        shared, expert = first, second
    experts = nn.ModuleDict({lab.name: copy.deepcopy(expert) for lab in ExpertLabel})
    return AdaptiveExtractor(backbone, split, experts, shared)


def as_input_batch(strips) -> torch.Tensor:
    """Stack normalized strips (arrays or :class:`NormalizedIris`) to ``(N,1,64,512)``."""
    arrs = [s.pixels if isinstance(s, NormalizedIris) else np.asarray(s) for s in strips]
    x = torch.from_numpy(np.stack(arrs).astype(np.float32))
    return x.unsqueeze(1)


def forward_features(extractor: AdaptiveExtractor, normalized, label) -> tuple[torch.Tensor, torch.Tensor]:
    """Intermediate map at the split boundary and the embedding.

    ``normalized`` is a single :class:`NormalizedIris` or a ``(N,1,64,512)``
    tensor. A single strip yields unbatched outputs.
    """
    single = isinstance(normalized, NormalizedIris)
    x = as_input_batch([normalized]) if single else normalized
    if tuple(x.shape[-2:]) != (NORM_HEIGHT, NORM_WIDTH) or x.dim() != 4:
        raise ValueError(f"expected input (N,1,{NORM_HEIGHT},{NORM_WIDTH}), got {tuple(x.shape)}")
    m, z = extractor(x, label)
    if single:
        return m[0], z[0]
    return m, z


# --- gating -------------------------------------------------------------------

class GatingNet(nn.Module):
    """Init block and first stage of the backbone, pooled, 3 logits.

    Always batch-normalized: per-sample normalization (GroupNorm) divides out
    the image energy and sharpness that distinguish degradation levels.
    """

    def __init__(self, backbone: BackboneSpec):
        super().__init__()
        self.backbone = backbone
        segs = backbone_segments(replace(backbone, norm="batch"))
        self.features = nn.Sequential(segs[0], segs[1])
        cout = backbone.stages[0].width * (1 if backbone.block == "basic" else Bottleneck.expansion)
        self.fc = nn.Linear(cout, len(ExpertLabel))
        # equal logits at start
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))


def build_gating(backbone: BackboneSpec, rng_seed: int) -> GatingNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng_seed)
        return GatingNet(backbone)


def crops_to_batch(crops) -> torch.Tensor:
    arrs = [c.pixels if isinstance(c, CroppedIris) else np.asarray(c) for c in crops]
    return torch.from_numpy(np.stack(arrs).astype(np.float32)).unsqueeze(1)


def label_from_logits(logits) -> ExpertLabel:
    """Argmax; ties go to the lowest-resolution expert among the maxima."""
    v = np.asarray(logits, dtype=np.float64)
    best = np.flatnonzero(v == v.max())
    return ExpertLabel(int(best.max()))


def gate(gating: GatingNet, cropped: CroppedIris) -> tuple[ExpertLabel, np.ndarray]:
    px = cropped.pixels if isinstance(cropped, CroppedIris) else np.asarray(cropped)
    if px.shape != (CROP_SIZE, CROP_SIZE):
        raise ValueError(f"gating input must be {CROP_SIZE}x{CROP_SIZE}, got {px.shape}")
    with torch.no_grad():
        logits = gating(crops_to_batch([px]))[0].double().numpy()
    return label_from_logits(logits), logits


def gate_batch(gating: GatingNet, crops) -> list[ExpertLabel]:
    with torch.no_grad():
        logits = gating(crops_to_batch(crops)).double().numpy()
    return [label_from_logits(row) for row in logits]


def extract(extractor: AdaptiveExtractor, gating: GatingNet, cropped: CroppedIris) -> np.ndarray:
    """End-to-end inference: gate, unwrap, embed."""
    label, _ = gate(gating, cropped)
    with torch.no_grad():
        _, z = forward_features(extractor, normalize_cropped(cropped), label)
    return z.double().numpy()


# --- parameters, cost, checkpoints ---------------------------------------------

def parameter_digest(params) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes of a state dict.

    Accepts a module or a ``{name: tensor}`` mapping; buffers count as parameters.
    """
    state = params.state_dict() if isinstance(params, nn.Module) else params
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_macs(module: nn.Module, input_shape: tuple[int, ...], *forward_args) -> int:
    """Multiply-accumulates of convolutions and linear layers for one sample."""
    total = 0

    def conv_hook(m, inp, out):
        nonlocal total
        k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
        total += out[0].numel() * k

    def lin_hook(m, inp, out):
        nonlocal total
        total += m.in_features * m.out_features

    handles = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(lin_hook))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            module(torch.zeros((1, *input_shape)), *forward_args)
    finally:
        for hd in handles:
            hd.remove()
        module.train(was_training)
    return total


def extractor_macs(extractor: AdaptiveExtractor) -> int:
    return count_macs(extractor, (1, NORM_HEIGHT, NORM_WIDTH), ExpertLabel.HR)


def gating_macs(gating: GatingNet) -> int:
    return count_macs(gating, (1, CROP_SIZE, CROP_SIZE))


@dataclass
class CheckpointMeta:
    module: str
    backbone: dict
    split: dict
    format: str = CHECKPOINT_FORMAT
    extra: dict = field(default_factory=dict)


def save_module(path: str | Path, module: nn.Module | dict, name: str, backbone: BackboneSpec,
                split: SplitConfig | None = None, extra: dict | None = None) -> str:
    """Write one module checkpoint and return its parameter digest."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    state = {k: v.detach().cpu().clone() for k, v in state.items()}
    meta = CheckpointMeta(name, backbone.to_dict(), asdict(split) if split else {}, extra=extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"meta": json.dumps(asdict(meta), sort_keys=True), "state": state}, path)
    return parameter_digest(state)


def load_module(path: str | Path) -> tuple[dict, dict]:
    """Return ``(meta, state_dict)``; rejects unknown format tags."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    meta = json.loads(blob["meta"])
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, blob["state"]
