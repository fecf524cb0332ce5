"""CR-Seg backbone: VGG-16 style stages with SeLU, side outputs and fusion.

Each of the five stages taps a one-channel 1x1 side output after its last
convolution (before pooling). The side logits are bilinearly upsampled to
the input size, concatenated and fused by a final 1x1 convolution. Every
stage also owns a small per-pixel projection head producing unit-norm
embeddings for the contrastive branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError

STAGE_CONVS = (2, 2, 3, 3, 3)
STAGE_MULT = (1, 2, 4, 8, 8)
MIN_INPUT = 16
CHECKPOINT_VERSION = 1


@dataclass
class CRSegConfig:
    in_channels: int = 1
    base_width: int = 64
    stage_convs: tuple = STAGE_CONVS
    embed_dim: int = 32
    upsample: str = "bilinear"

    def __post_init__(self):
        self.stage_convs = tuple(int(c) for c in self.stage_convs)
        if len(self.stage_convs) != 5 or sum(self.stage_convs) != 13:
            raise ConfigError(f"stage_convs must have 5 entries summing to 13, got {self.stage_convs}")
        if self.base_width < 8:
            raise ConfigError(f"base_width must be >= 8, got {self.base_width}")
        if self.in_channels < 1 or self.embed_dim < 1:
            raise ConfigError("in_channels and embed_dim must be positive")
        if self.upsample != "bilinear":
            raise ConfigError("only bilinear upsampling is supported")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in STAGE_MULT]


@dataclass
class StageOutputs:
    """Outputs of one forward pass. Tensors are NCHW."""

    side_logits: list[torch.Tensor]
    fused_logit: torch.Tensor
    stage_embeddings: list[torch.Tensor] = field(default_factory=list)

    @property
    def side_probs(self) -> list[torch.Tensor]:
        return [torch.sigmoid(s) for s in self.side_logits]

    @property
    def fused_prob(self) -> torch.Tensor:
        return torch.sigmoid(self.fused_logit)


def backbone_param_count(in_channels: int, base_width: int, stage_convs=STAGE_CONVS) -> int:
    """Closed-form weight + bias count of the 13 backbone convolutions."""
    total = 0
    cin = in_channels
    for n_convs, mult in zip(stage_convs, STAGE_MULT):
        cout = base_width * mult
        # first conv of the stage changes width, the rest keep it
        total += 9 * cin * cout + cout
        total += (n_convs - 1) * (9 * cout * cout + cout)
        cin = cout
    return total


class ProjectionHead(nn.Module):
    """Per-pixel two-layer MLP followed by L2 normalisation."""

    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.fc1 = nn.Conv2d(in_dim, embed_dim, 1)
        self.fc2 = nn.Conv2d(embed_dim, embed_dim, 1)

    def forward(self, x):
        return F.normalize(self.fc2(F.selu(self.fc1(x))), dim=1)


class CRSeg(nn.Module):
    def __init__(self, cfg: CRSegConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = cfg.in_channels
        for n_convs, width in zip(cfg.stage_convs, cfg.widths):
            layers = []
            for i in range(n_convs):
                layers.append(nn.Conv2d(cin if i == 0 else width, width, 3, padding=1))
                layers.append(nn.SELU())
            stages.append(nn.Sequential(*layers))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.side = nn.ModuleList(nn.Conv2d(w, 1, 1) for w in cfg.widths)
        self.fuse = nn.Conv2d(5, 1, 1)
        self.heads = nn.ModuleList(ProjectionHead(w, cfg.embed_dim) for w in cfg.widths)

    def backbone_parameters(self):
        return [p for stage in self.stages for p in stage.parameters()]

    def forward(self, x: torch.Tensor, with_embeddings: bool = True) -> StageOutputs:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected N x {self.cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if min(h, w) < MIN_INPUT:
            raise ValueError(f"spatial dims must be >= {MIN_INPUT} for four poolings, got {h}x{w}")
        side_logits, embeddings = [], []
        feat = x
        for m, stage in enumerate(self.stages):
            if m > 0:
                feat = F.max_pool2d(feat, 2, 2, ceil_mode=True)
            feat = stage(feat)
            s = self.side[m](feat)
            if m > 0:
                s = F.interpolate(s, size=(h, w), mode="bilinear", align_corners=False)
            side_logits.append(s)
            if with_embeddings:
                embeddings.append(self.heads[m](feat))
        fused = self.fuse(torch.cat(side_logits, dim=1))
        return StageOutputs(side_logits, fused, embeddings)


def init_normal_(model: nn.Module, generator: torch.Generator) -> None:
    """Normal init scaled by fan-in (the self-normalising setting for SeLU)."""
    for mod in model.modules():
        if isinstance(mod, nn.Conv2d):
            fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
            with torch.no_grad():
                mod.weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
                mod.bias.zero_()


def build_crseg(cfg: CRSegConfig, seed: int = 0) -> CRSeg:
    model = CRSeg(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    init_normal_(model, gen)
    n_backbone = sum(p.numel() for p in model.backbone_parameters())
    expected = backbone_param_count(cfg.in_channels, cfg.base_width, cfg.stage_convs)
    assert n_backbone == expected, (n_backbone, expected)
    model.seed = int(seed)
    return model


def forward(model: CRSeg, images: torch.Tensor) -> StageOutputs:
    """Inference-mode forward pass (no autograd graph)."""
    model.eval()
    with torch.no_grad():
        return model(images)


def embedding_sizes(h: int, w: int) -> list[tuple[int, int]]:
    """Spatial size of each stage's features under ceil-mode pooling."""
    sizes = [(h, w)]
    for _ in range(4):
        h, w = -(-h // 2), -(-w // 2)
        sizes.append((h, w))
    return sizes


def road_cascade_forward(surface_model: CRSeg, edge_model: CRSeg, centerline_model: CRSeg,
                         image: torch.Tensor):
    """Surface prediction is appended as an extra channel for the edge and centerline nets."""
    c = image.shape[1]
    if surface_model.cfg.in_channels != c:
        raise ValueError("surface model channels do not match the image")
    for name, m in (("edge", edge_model), ("centerline", centerline_model)):
        if m.cfg.in_channels != c + 1:
            raise ValueError(f"{name} model needs in_channels={c + 1}, has {m.cfg.in_channels}")
    surface = surface_model(image, with_embeddings=False).fused_prob
    guided = torch.cat([image, surface], dim=1)
    edge = edge_model(guided, with_embeddings=False).fused_prob
    centerline = centerline_model(guided, with_embeddings=False).fused_prob
    return surface, edge, centerline


def save_checkpoint(model: CRSeg, path, extra: dict | None = None) -> None:
    """Write a named-array archive (.npz).

    Keys: ``__meta__`` holds a JSON string with the format version, the
    config and the seed; every other key is a state_dict entry such as
    ``stages.0.0.weight``.
    """
    import json

    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
            "seed": getattr(model, "seed", None), "extra": extra or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> CRSeg:
    import json

    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in data.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
    model = CRSeg(CRSegConfig(**meta["config"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.seed = meta.get("seed")
    model.meta_extra = meta.get("extra", {})
    return model
