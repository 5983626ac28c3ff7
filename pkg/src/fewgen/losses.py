"""Training objectives as pure, differentiable functions.

Every loss here maps plain tensors (or thin stat containers) to a scalar
tensor and is checkable against central finite differences with respect to
each of its inputs. Reduction convention: L1 terms sum over the per-image
dimensions and average over the batch, so the diversity ratio stays
scale-meaningful; expectation-style terms are batch means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

from fewgen.errors import DimensionError, NumericError
from fewgen.latent import FeatureStats, LatentCode

NORM_EPS = 1e-12


@dataclass
class LossWeights:
    """Scalar weights for the composite objectives plus the softmax temperature.

    Defaults: the adversarial, reconstruction, and prior terms carry weight 1.0;
    the feature-cycle and diversity terms 0.1; temperature 0.2.
    """

    lambda_gan: float = 1.0
    lambda_ir: float = 1.0
    lambda_pr: float = 1.0
    lambda_feat: float = 0.1
    lambda_ms: float = 0.1
    tau: float = 0.2

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_ir", "lambda_pr", "lambda_feat", "lambda_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def _flat_batch(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def image_recon_loss(reconstructed: Tensor, real: Tensor) -> Tensor:
    """Mean over the batch of the per-image L1 distance, summed over pixels."""
    if reconstructed.shape != real.shape:
        raise DimensionError(
            f"shape mismatch: {tuple(reconstructed.shape)} vs {tuple(real.shape)}"
        )
    per_image = _flat_batch(reconstructed - real).abs().sum(dim=1)
    return per_image.mean()


def critic_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Unclipped critic objective: mean fake score minus mean real score."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise DimensionError("critic loss needs non-empty score batches")
    return d_fake.mean() - d_real.mean()


def generator_adv_loss(d_fake: Tensor) -> Tensor:
    """Generator side of the critic game: negated mean fake score."""
    if d_fake.numel() == 0:
        raise DimensionError("adversarial loss needs a non-empty score batch")
    return -d_fake.mean()


def prior_kl(stats: FeatureStats) -> Tensor:
    """Closed-form KL from the diagonal Gaussian posterior to the unit prior.

    Per image: ``0.5 * sum_i (mu_i^2 + sigma_i^2 - log sigma_i^2 - 1)``; the
    result is averaged over the batch.
    """
    stats.validate_finite()
    mu = torch.atleast_2d(stats.mu)
    log_var = torch.atleast_2d(stats.log_var)
    kl = 0.5 * (mu.pow(2) + log_var.exp() - log_var - 1.0).sum(dim=1)
    return kl.mean()


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last dim; norms are floored by 1e-12."""
    num = (u * v).sum(dim=-1)
    den = (u.norm(dim=-1) + NORM_EPS) * (v.norm(dim=-1) + NORM_EPS)
    return num / den


def _check_nonzero(x: Tensor, what: str):
    if (x.norm(dim=-1) == 0).any():
        raise NumericError(f"zero-norm {what}: cosine similarity undefined")


def alignment_uniform_loss(q: Tensor, k_pos: Tensor, negatives: Tensor | None, tau: float) -> Tensor:
    """Softmax alignment of an anchor to its positive against a negative set.

    ``-log( exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau)) )`` with cosine
    similarities, computed with max-subtraction so large logits cannot
    overflow. An empty negative set gives exactly zero. ``q`` and ``k_pos``
    may be single vectors or aligned ``(n, d)`` batches sharing one negative
    set; batched input returns the per-anchor mean.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    _check_nonzero(q, "anchor")
    _check_nonzero(k_pos, "positive key")
    if q.shape != k_pos.shape:
        raise DimensionError(f"anchor/positive shape mismatch: {tuple(q.shape)} vs {tuple(k_pos.shape)}")
    squeeze = q.dim() == 1
    q2 = torch.atleast_2d(q)
    k2 = torch.atleast_2d(k_pos)
    pos = cosine_similarity(q2, k2) / tau  # (n,)
    if negatives is None or negatives.numel() == 0:
        logits = pos.unsqueeze(1)
    else:
        _check_nonzero(negatives, "negative key")
        if negatives.shape[-1] != q2.shape[-1]:
            raise DimensionError("negative keys must match the anchor dimension")
        neg = cosine_similarity(q2.unsqueeze(1), negatives.unsqueeze(0)) / tau  # (n, m)
        logits = torch.cat([pos.unsqueeze(1), neg], dim=1)
    m = logits.max(dim=1, keepdim=True).values.detach()
    log_den = (logits - m).exp().sum(dim=1).log() + m.squeeze(1)
    loss = log_den - pos
    return loss.mean() if not squeeze else loss.squeeze(0)


def feature_cycle_loss(
    gen_stats: FeatureStats,
    mixed_stats: FeatureStats,
    neg_mu: Tensor | None,
    neg_sigma: Tensor | None,
    tau: float,
) -> Tensor:
    """Feature-domain cycle consistency via two alignment terms.

    Anchors are the re-encoded generated features, positives the mixed
    features that produced them (aligned index-wise), negatives a shared set
    of real-feature snapshots. The mean term and the sigma term are summed;
    sigma is recovered from the stored log-variance.
    """
    mu_g, mu_m = torch.atleast_2d(gen_stats.mu), torch.atleast_2d(mixed_stats.mu)
    if mu_g.shape[0] != mu_m.shape[0]:
        raise DimensionError(
            f"generated/mixed batches misaligned: {mu_g.shape[0]} vs {mu_m.shape[0]}"
        )
    mu_term = alignment_uniform_loss(mu_g, mu_m, neg_mu, tau)
    sig_term = alignment_uniform_loss(
        torch.atleast_2d(gen_stats.sigma), torch.atleast_2d(mixed_stats.sigma), neg_sigma, tau
    )
    return mu_term + sig_term


def feature_distance_loss(gen_stats: FeatureStats, mixed_stats: FeatureStats) -> Tensor:
    """Plain Euclidean variant of the feature-cycle term (ablation only).

    This direct distance admits a degenerate solution where the mixture is
    treated as just another sample; the alignment form above is the default.
    """
    mu_g, mu_m = torch.atleast_2d(gen_stats.mu), torch.atleast_2d(mixed_stats.mu)
    if mu_g.shape != mu_m.shape:
        raise DimensionError("generated/mixed batches misaligned")
    d_mu = (mu_g - mu_m).norm(dim=1)
    d_sig = (torch.atleast_2d(gen_stats.sigma) - torch.atleast_2d(mixed_stats.sigma)).norm(dim=1)
    return (d_mu + d_sig).mean()


def _codes(z: Tensor | LatentCode) -> Tensor:
    return z.z if isinstance(z, LatentCode) else z


def mode_seeking_loss(
    img1: Tensor,
    img2: Tensor,
    z1: Tensor | LatentCode,
    z2: Tensor | LatentCode,
    eps: float = 1e-8,
) -> Tensor:
    """Negated mean ratio of image distance to latent distance over pairs.

    Pairs whose latent L1 gap falls below ``eps`` are skipped to avoid the
    division blowing up; if every pair is skipped the loss is 0 with a warning.
    """
    za, zb = torch.atleast_2d(_codes(z1)), torch.atleast_2d(_codes(z2))
    if img1.shape != img2.shape or za.shape != zb.shape or img1.shape[0] != za.shape[0]:
        raise DimensionError("mode-seeking batches misaligned")
    img_gap = _flat_batch(img1 - img2).abs().sum(dim=1)
    z_gap = (za - zb).abs().sum(dim=1)
    keep = z_gap > eps
    if not keep.any():
        warnings.warn("all latent pairs degenerate; mode-seeking term is 0", RuntimeWarning)
        return torch.zeros((), dtype=img1.dtype)
    ratio = img_gap[keep] / z_gap[keep]
    return -ratio.mean()


def discriminator_objective(parts: tuple[Tensor, Tensor, Tensor], w: LossWeights) -> Tensor:
    """Weighted discriminator total: (adversarial, feature-cycle, prior) parts."""
    gan, feat, prior = parts
    return w.lambda_gan * gan + w.lambda_feat * feat + w.lambda_pr * prior


def generator_objective(parts: tuple[Tensor, Tensor, Tensor], w: LossWeights) -> Tensor:
    """Weighted generator total: (adversarial, reconstruction, diversity) parts."""
    gan, ir, ms = parts
    return w.lambda_gan * gan + w.lambda_ir * ir + w.lambda_ms * ms


def nt_xent_loss(embeddings: Tensor, tau: float) -> Tensor:
    """Normalized-temperature cross entropy over 2N view embeddings.

    Rows ``i`` and ``i + N`` are the two views of sample ``i``. Each anchor's
    denominator runs over all ``2N - 1`` other rows; the result is the mean
    over the 2N anchors.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    two_n = embeddings.shape[0]
    if two_n < 4 or two_n % 2 != 0:
        raise DimensionError(f"expected 2N >= 4 embeddings, got {two_n}")
    _check_nonzero(embeddings, "embedding")
    n = two_n // 2
    sim = cosine_similarity(embeddings.unsqueeze(1), embeddings.unsqueeze(0)) / tau
    eye = torch.eye(two_n, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    pos_idx = torch.arange(two_n).roll(n)
    m = sim.max(dim=1, keepdim=True).values.detach()
    log_den = (sim - m).exp().sum(dim=1).log() + m.squeeze(1)
    pos = sim[torch.arange(two_n), pos_idx]
    return (log_den - pos).mean()
