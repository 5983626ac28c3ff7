"""Latent-space primitives: binary masks, channel interpolation, reparameterization.

All functions are pure given their inputs plus an explicit ``torch.Generator``,
so they are safe to call from concurrent workers as long as each worker owns
its generator. Every array argument may be a single vector ``(d,)`` or a batch
``(n, d)``; shapes are preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from fewgen.errors import DimensionError, NumericError

VALID_TAGS = ("real", "mixed", "generated")


@dataclass
class FeatureStats:
    """Diagonal-Gaussian posterior emitted by the discriminator feature head.

    ``mu`` and ``log_var`` share shape ``(d,)`` or ``(n, d)``. Sigma is kept as
    log-variance so it stays strictly positive under exponentiation without
    clamping. ``tag`` records which role the stats play: features of real
    images, channel-interpolated mixtures, or re-encoded generated images.
    """

    mu: Tensor
    log_var: Tensor
    tag: str = "real"

    def __post_init__(self):
        if not isinstance(self.mu, Tensor):
            self.mu = torch.as_tensor(self.mu, dtype=torch.get_default_dtype())
        if not isinstance(self.log_var, Tensor):
            self.log_var = torch.as_tensor(self.log_var, dtype=self.mu.dtype)
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(
                f"mu shape {tuple(self.mu.shape)} != log_var shape {tuple(self.log_var.shape)}"
            )
        if self.mu.shape[-1] == 0:
            raise DimensionError("feature dimension must be positive")
        if self.tag not in VALID_TAGS:
            raise ValueError(f"unknown tag {self.tag!r}, expected one of {VALID_TAGS}")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def sigma(self) -> Tensor:
        return torch.exp(0.5 * self.log_var)

    def validate_finite(self):
        if not (torch.isfinite(self.mu).all() and torch.isfinite(self.log_var).all()):
            raise NumericError("non-finite entries in feature statistics")


@dataclass
class BinaryMask:
    """Per-channel 0/1 selector used by channel interpolation."""

    bits: Tensor

    def __post_init__(self):
        if not isinstance(self.bits, Tensor):
            self.bits = torch.as_tensor(self.bits, dtype=torch.get_default_dtype())
        self.bits = self.bits.to(dtype=torch.get_default_dtype()) if self.bits.dtype == torch.bool else self.bits
        if self.bits.numel() == 0:
            raise DimensionError("mask must be non-empty")
        ok = (self.bits == 0) | (self.bits == 1)
        if not ok.all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def dim(self) -> int:
        return self.bits.shape[-1]


@dataclass
class LatentCode:
    """Reparameterized latent vector fed to the generator."""

    z: Tensor
    source: str = "real"

    def __post_init__(self):
        if self.source not in ("real", "mixed"):
            raise ValueError(f"latent source must be 'real' or 'mixed', got {self.source!r}")
        if not torch.isfinite(self.z).all():
            raise NumericError("non-finite latent code")

    @property
    def dim(self) -> int:
        return self.z.shape[-1]


def sample_mask(d: int, p: float, rng: torch.Generator, dtype: torch.dtype = torch.float32) -> BinaryMask:
    """Draw a length-``d`` mask whose bits are independently 1 with probability ``p``."""
    if d < 1:
        raise DimensionError(f"mask dimension must be >= 1, got {d}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"ones-probability must lie in [0, 1], got {p}")
    u = torch.rand(d, generator=rng, dtype=torch.float64)
    return BinaryMask((u < p).to(dtype))


def sample_masks(n: int, d: int, p: float, rng: torch.Generator, dtype: torch.dtype = torch.float32) -> Tensor:
    """Batched mask draw, one fresh mask per row; returns a ``(n, d)`` 0/1 tensor."""
    if d < 1 or n < 1:
        raise DimensionError(f"mask batch must be non-empty, got n={n}, d={d}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"ones-probability must lie in [0, 1], got {p}")
    u = torch.rand(n, d, generator=rng, dtype=torch.float64)
    return (u < p).to(dtype)


def channel_interpolate(x: Tensor, y: Tensor, mask: BinaryMask | Tensor) -> Tensor:
    """Element-wise selection ``K*x + (1-K)*y``: take ``x`` where the mask bit is 1."""
    bits = mask.bits if isinstance(mask, BinaryMask) else mask
    if x.shape[-1] != y.shape[-1] or x.shape[-1] != bits.shape[-1]:
        raise DimensionError(
            f"channel interpolation needs matching dims, got {x.shape[-1]}, {y.shape[-1]}, {bits.shape[-1]}"
        )
    bits = bits.to(dtype=x.dtype)
    return bits * x + (1.0 - bits) * y


def interpolate_stats(a: FeatureStats, b: FeatureStats, mask: BinaryMask | Tensor) -> FeatureStats:
    """Mix two real-feature posteriors channel-wise under one shared mask.

    The same mask selects channels for both the mean and the log-variance, so
    each retained channel keeps its (mu, sigma) pair intact.
    """
    if a.dim != b.dim:
        raise DimensionError(f"stats dims differ: {a.dim} vs {b.dim}")
    if a.tag != "real" or b.tag != "real":
        raise ValueError("interpolation sources must both be tagged 'real'")
    mu = channel_interpolate(a.mu, b.mu, mask)
    log_var = channel_interpolate(a.log_var, b.log_var, mask)
    return FeatureStats(mu=mu, log_var=log_var, tag="mixed")


def reparameterize(
    stats: FeatureStats,
    eps: Tensor | None = None,
    rng: torch.Generator | None = None,
) -> LatentCode:
    """Sample ``z = mu + eps * sigma`` with ``eps ~ N(0, I)`` drawn when not supplied."""
    stats.validate_finite()
    if eps is None:
        if rng is None:
            raise ValueError("either eps or rng must be provided")
        eps = torch.randn(stats.mu.shape, generator=rng, dtype=stats.mu.dtype)
    if eps.shape != stats.mu.shape:
        raise DimensionError(f"eps shape {tuple(eps.shape)} != stats shape {tuple(stats.mu.shape)}")
    if stats.tag not in ("real", "mixed"):
        raise ValueError(f"cannot reparameterize stats tagged {stats.tag!r}")
    z = stats.mu + eps * stats.sigma
    return LatentCode(z=z, source=stats.tag)


def sample_derangement(n: int, rng: torch.Generator) -> Tensor:
    """Random permutation of ``range(n)`` without fixed points.

    Used to pair each batch element with a distinct partner; self-pairing is
    excluded because interpolating a feature with itself is the identity.
    """
    if n < 2:
        raise DimensionError(f"derangement needs n >= 2, got {n}")
    while True:
        perm = torch.randperm(n, generator=rng)
        if (perm != torch.arange(n)).all():
            return perm
