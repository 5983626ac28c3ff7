"""Generator and two-branch discriminator.

The discriminator carries two heads on one spectral-normalized conv trunk:
an unbounded critic score and a diagonal Gaussian feature posterior (mu,
log-variance). The posterior heads are plain linear layers; constraining
them with spectral norm would needlessly squash the feature space.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
from torch.nn.utils import spectral_norm

from fewgen.errors import DimensionError
from fewgen.latent import FeatureStats


def init_dcgan_weights(module: nn.Module):
    """Normal(0, 0.02) init for conv/linear weights, zeros for biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            # spectral_norm reparameterizes .weight; init the original tensor
            w = getattr(m, "weight_orig", m.weight)
            nn.init.normal_(w, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def _stages_for(image_size: int) -> int:
    if image_size < 16 or image_size & (image_size - 1) != 0:
        raise DimensionError(f"image_size must be a power of two >= 16, got {image_size}")
    return int(math.log2(image_size // 4))


class Generator(nn.Module):
    """Transposed-conv generator mapping a latent vector to a [-1, 1] image.

    A linear-free projection (4x4 transposed conv) lifts z to a 4x4 map,
    then stride-2 stages double the resolution up to ``image_size``.
    """

    def __init__(self, latent_dim: int = 128, image_size: int = 64,
                 channels: int = 1, base_channels: int = 96):
        super().__init__()
        self.latent_dim = latent_dim
        self.image_size = image_size
        n_stages = _stages_for(image_size)
        width = base_channels * 2 ** (n_stages - 1)
        blocks = [
            nn.ConvTranspose2d(latent_dim, width, 4, 1, 0, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        ]
        for _ in range(n_stages - 1):
            blocks += [
                nn.ConvTranspose2d(width, width // 2, 4, 2, 1, bias=False),
                nn.BatchNorm2d(width // 2),
                nn.ReLU(inplace=True),
            ]
            width //= 2
        blocks += [nn.ConvTranspose2d(width, channels, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*blocks)
        init_dcgan_weights(self)

    def forward(self, z: Tensor) -> Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise DimensionError(
                f"expected z of shape (n, {self.latent_dim}), got {tuple(z.shape)}"
            )
        return self.net(z.unsqueeze(-1).unsqueeze(-1))


class Discriminator(nn.Module):
    """Spectral-normalized conv trunk with critic and feature-posterior heads.

    ``forward`` returns ``(scores, FeatureStats)``: per-image critic scores of
    shape (n,) and a diagonal Gaussian over a ``feature_dim`` latent space.
    Features are read off the trunk at three depths, globally average-pooled,
    and concatenated before the two parallel posterior heads.
    """

    def __init__(self, image_size: int = 64, channels: int = 1,
                 base_channels: int = 96, feature_dim: int = 128):
        super().__init__()
        self.image_size = image_size
        self.feature_dim = feature_dim
        n_stages = _stages_for(image_size)  # stride-2 stages down to 4x4
        widths = [base_channels * 2 ** i for i in range(n_stages)]
        stages = []
        in_ch = channels
        for w in widths:
            stages.append(nn.Sequential(
                spectral_norm(nn.Conv2d(in_ch, w, 4, 2, 1, bias=False)),
                nn.LeakyReLU(0.2, inplace=True),
            ))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.score_head = spectral_norm(nn.Conv2d(in_ch, 1, 4, 1, 0, bias=False))
        # pool taps: mid stage, late stage, final stage
        self._taps = sorted({max(0, n_stages - 3), max(0, n_stages - 2), n_stages - 1})
        tap_width = sum(widths[i] for i in self._taps)
        self.mu_head = nn.Linear(tap_width, feature_dim)
        self.log_var_head = nn.Linear(tap_width, feature_dim)
        init_dcgan_weights(self)

    def forward(self, x: Tensor, tag: str = "real") -> tuple[Tensor, FeatureStats]:
        if x.dim() != 4 or x.shape[-1] != self.image_size or x.shape[-2] != self.image_size:
            raise DimensionError(
                f"expected (n, c, {self.image_size}, {self.image_size}) input, got {tuple(x.shape)}"
            )
        pooled = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i in self._taps:
                pooled.append(h.mean(dim=(2, 3)))
        score = self.score_head(h).reshape(x.shape[0])
        feats = torch.cat(pooled, dim=1)
        stats = FeatureStats(mu=self.mu_head(feats), log_var=self.log_var_head(feats), tag=tag)
        return score, stats

    def encode(self, x: Tensor, tag: str = "real") -> FeatureStats:
        return self.forward(x, tag=tag)[1]


def count_parameters(*modules: nn.Module) -> int:
    total = 0
    for m in modules:
        for p in m.parameters():
            if p.requires_grad:
                total += p.numel()
    return total


def estimate_macs(module: nn.Module, example: Tensor) -> int:
    """Multiply-accumulate estimate for one forward pass, from layer shapes."""
    counts = []

    def hook(layer, inputs, output):
        x = inputs[0]
        if isinstance(layer, nn.Conv2d):
            k = layer.kernel_size[0] * layer.kernel_size[1]
            out = output if isinstance(output, Tensor) else output[0]
            counts.append(out.numel() // out.shape[0] * (layer.in_channels // layer.groups) * k)
        elif isinstance(layer, nn.ConvTranspose2d):
            k = layer.kernel_size[0] * layer.kernel_size[1]
            counts.append(x.numel() // x.shape[0] * layer.out_channels * k)
        elif isinstance(layer, nn.Linear):
            counts.append(layer.in_features * layer.out_features)

    handles = [m.register_forward_hook(hook) for m in module.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))]
    was_training = module.training
    module.eval()
    with torch.no_grad():
        module(example)
    for h in handles:
        h.remove()
    module.train(was_training)
    return int(sum(counts))


def model_complexity(g: Generator, d: Discriminator) -> dict:
    """Parameter counts per model and a forward MAC estimate for each."""
    z = torch.zeros(1, g.latent_dim)
    x = torch.zeros(1, d.stages[0][0].in_channels, d.image_size, d.image_size)
    return {
        "generator_params": count_parameters(g),
        "discriminator_params": count_parameters(d),
        "total_params": count_parameters(g, d),
        "generator_macs": estimate_macs(g, z),
        "discriminator_macs": estimate_macs(d, x),
    }


def build_models(latent_dim: int = 128, image_size: int = 64, channels: int = 1,
                 base_channels: int = 96, feature_dim: int | None = None
                 ) -> tuple[Generator, Discriminator]:
    """Construct a matched generator/discriminator pair.

    The feature posterior dimension defaults to the latent dimension so
    reparameterized feature draws can feed the generator directly.
    """
    fd = latent_dim if feature_dim is None else feature_dim
    g = Generator(latent_dim, image_size, channels, base_channels)
    d = Discriminator(image_size, channels, base_channels, fd)
    return g, d
