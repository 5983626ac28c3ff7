"""Contrastive encoder pretraining on the synthesized corpus.

Two augmented views per image, a projection head on top of the encoder, and
the normalized-temperature cross entropy from the losses module. Only the
backbone survives pretraining; the projection head is discarded for
downstream use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from fewgen.errors import NumericError, ValidationError
from fewgen.losses import nt_xent_loss
from fewgen.utils import config_hash, read_manifest, write_manifest, write_telemetry


@dataclass
class ViewConfig:
    """Strengths for the two-view augmentation.

    crop scale is the area fraction kept by the random resized crop; jitter
    scales brightness/contrast factors around 1 (single-channel images, so
    color jitter degenerates to intensity jitter). Setting crop bounds to 1
    and jitter to 0 with flip off makes the augmentation the identity.
    """

    crop_min: float = 0.2
    crop_max: float = 1.0
    jitter: float = 0.4
    flip: bool = True

    def __post_init__(self):
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ValidationError("crop scale bounds must satisfy 0 < min <= max <= 1")
        if not 0.0 <= self.jitter < 1.0:
            raise ValidationError("jitter must lie in [0, 1)")


def _resized_crop(chip: Tensor, scale: float, u_top: float, u_left: float) -> Tensor:
    s = chip.shape[-1]
    side = max(1, min(s, round(s * math.sqrt(scale))))
    if side == s:
        return chip
    top = int(u_top * (s - side + 1))
    left = int(u_left * (s - side + 1))
    patch = chip[..., top:top + side, left:left + side]
    return F.interpolate(patch.unsqueeze(0), size=(s, s), mode="bilinear",
                         align_corners=False).squeeze(0).clamp(-1.0, 1.0)


def _one_view(chip: Tensor, cfg: ViewConfig, rng: np.random.Generator) -> Tensor:
    # fixed draw count per view keeps the stream layout independent of config
    scale = float(rng.uniform(cfg.crop_min, cfg.crop_max))
    u_top = float(rng.uniform())
    u_left = float(rng.uniform())
    b = float(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter))
    c = float(rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter))
    do_flip = bool(rng.uniform() < 0.5) and cfg.flip
    out = _resized_crop(chip, scale, u_top, u_left)
    if cfg.jitter > 0:
        x01 = (out + 1.0) * 0.5
        x01 = x01 * b
        mean = x01.mean()
        x01 = ((x01 - mean) * c + mean).clamp(0.0, 1.0)
        out = x01 * 2.0 - 1.0
    if do_flip:
        out = torch.flip(out, dims=(-1,))
    return out


def make_views(chip: Tensor, rng: np.random.Generator,
               cfg: ViewConfig | None = None) -> tuple[Tensor, Tensor]:
    """Two independent augmentations of one chip, each in [-1, 1]."""
    cfg = cfg or ViewConfig()
    return _one_view(chip, cfg, rng), _one_view(chip, cfg, rng)


class SmallEncoder(nn.Module):
    """Four stride-2 conv blocks and global pooling; minutes-scale backbone."""

    def __init__(self, channels: int = 1, width: int = 32):
        super().__init__()
        widths = [width, width * 2, width * 4, width * 8]
        layers = []
        in_ch = channels
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 3, 2, 1, bias=False),
                       nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            in_ch = w
        self.body = nn.Sequential(*layers)
        self.feature_dim = widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x).mean(dim=(2, 3))


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.down = None
        if stride != 1 or in_ch != out_ch:
            self.down = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                      nn.BatchNorm2d(out_ch))

    def forward(self, x):
        idn = x if self.down is None else self.down(x)
        h = F.relu(self.bn1(self.conv1(x)), inplace=True)
        h = self.bn2(self.conv2(h))
        return F.relu(h + idn, inplace=True)


class ResNetEncoder(nn.Module):
    """Residual backbone in the 18-layer shape, sized for small chips.

    3x3 stem without the initial max-pool, then four stages of two basic
    blocks at widths 64/128/256/512.
    """

    def __init__(self, channels: int = 1, width: int = 64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(channels, width, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(width), nn.ReLU(inplace=True))
        stages = []
        in_ch = width
        for i, w in enumerate([width, width * 2, width * 4, width * 8]):
            stride = 1 if i == 0 else 2
            stages += [_BasicBlock(in_ch, w, stride), _BasicBlock(w, w, 1)]
            in_ch = w
        self.stages = nn.Sequential(*stages)
        self.feature_dim = in_ch

    def forward(self, x: Tensor) -> Tensor:
        return self.stages(self.stem(x)).mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping backbone features to the contrastive space."""

    def __init__(self, in_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True),
                                 nn.Linear(in_dim, proj_dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


ENCODER_ARCHS = ("small", "resnet18")


def build_encoder(arch: str = "small", channels: int = 1, width: int | None = None) -> nn.Module:
    if arch == "small":
        return SmallEncoder(channels, width or 32)
    if arch == "resnet18":
        return ResNetEncoder(channels, width or 64)
    raise ValidationError(f"unknown encoder arch {arch!r}, expected one of {ENCODER_ARCHS}")


@dataclass
class SslConfig:
    """Pretraining knobs; width/arch pick the desk or full-size backbone."""

    epochs: int = 100
    batch_size: int = 64
    tau: float = 0.2
    lr: float = 1e-3
    seed: int = 0
    arch: str = "small"
    width: int | None = None
    proj_dim: int = 64
    views: ViewConfig = field(default_factory=ViewConfig)

    def __post_init__(self):
        if isinstance(self.views, dict):
            self.views = ViewConfig(**self.views)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (a batch carries 2N >= 4 views)")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")


def simclr_pretrain(images: Tensor, cfg: SslConfig,
                    encoder: nn.Module | None = None) -> tuple[nn.Module, list[dict]]:
    """Pretrain an encoder on unlabeled images; returns (backbone, telemetry).

    The encoder and head are constructed under torch.manual_seed(cfg.seed)
    when not supplied, and augmentation draws come from a numpy stream with
    the same seed, so a run is reproducible end to end. The projection head
    is used for the loss and thrown away.
    """
    if images.dim() != 4 or images.shape[0] < 2:
        raise ValidationError("need at least 2 images of shape (n, c, s, s)")
    n = images.shape[0]
    torch.manual_seed(cfg.seed)
    if encoder is None:
        encoder = build_encoder(cfg.arch, images.shape[1], cfg.width)
    head = ProjectionHead(encoder.feature_dim, cfg.proj_dim)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    encoder.train()
    head.train()
    telemetry = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # a lone image has no in-batch negatives
            v1, v2 = [], []
            for i in idx:
                a, b = make_views(images[int(i)], rng, cfg.views)
                v1.append(a)
                v2.append(b)
            batch = torch.stack(v1 + v2)
            emb = head(encoder(batch))
            loss = nt_xent_loss(emb, cfg.tau)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite contrastive loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        telemetry.append({"epoch": epoch, "mean_loss": float(np.mean(losses))})
    encoder.eval()
    return encoder, telemetry


def save_backbone(encoder: nn.Module, out_dir: str | Path, cfg: SslConfig,
                  extra: dict | None = None):
    """Persist backbone weights plus a manifest describing the architecture."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"backbone": encoder.state_dict()}, out_dir / "backbone.pt")
    payload = {
        "kind": "ssl-backbone",
        "arch": cfg.arch,
        "width": cfg.width,
        "feature_dim": encoder.feature_dim,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
    }
    payload.update(extra or {})
    write_manifest(out_dir, payload)


def load_backbone(in_dir: str | Path) -> tuple[nn.Module, dict]:
    in_dir = Path(in_dir)
    path = in_dir / "backbone.pt"
    if not path.is_file():
        raise FileNotFoundError(
            f"no backbone at {path}; produce one with the pretrain subcommand"
        )
    manifest = read_manifest(in_dir)
    encoder = build_encoder(manifest["arch"], 1, manifest.get("width"))
    state = torch.load(path, weights_only=True)
    encoder.load_state_dict(state["backbone"])
    encoder.eval()
    return encoder, manifest


def write_ssl_telemetry(out_dir: str | Path, telemetry: list[dict]):
    write_telemetry(Path(out_dir) / "ssl_telemetry.csv", telemetry, ["epoch", "mean_loss"])
