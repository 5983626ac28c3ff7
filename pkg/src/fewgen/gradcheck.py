"""Central finite-difference verification of every training objective.

Each loss is evaluated as a scalar function of raw double-precision tensors;
autograd gradients are compared element-wise against (f(x+h) - f(x-h)) / 2h.
Instances are sampled with margins away from the L1/norm kinks so the
difference quotient is taken on a smooth neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from fewgen.latent import FeatureStats
from fewgen.losses import (LossWeights, alignment_uniform_loss, critic_loss,
                           discriminator_objective, feature_cycle_loss,
                           feature_distance_loss, generator_adv_loss,
                           generator_objective, image_recon_loss,
                           mode_seeking_loss, nt_xent_loss, prior_kl)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    instances: int
    max_rel_err: float
    passed: bool


def finite_diff_grads(fn, tensors: list[Tensor], step: float = DEFAULT_STEP) -> list[Tensor]:
    """Central differences w.r.t. every element of every input tensor."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat = t.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(fn(*tensors))
                flat[i] = orig - step
                f_minus = float(fn(*tensors))
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * step)
            grads.append(g)
    return grads


def check_gradients(fn, tensors: list[Tensor], step: float = DEFAULT_STEP) -> float:
    """Max relative error between autograd and finite-difference gradients."""
    leaves = [t.detach().double().requires_grad_(True) for t in tensors]
    loss = fn(*leaves)
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)
    numeric = finite_diff_grads(fn, [t.detach().clone() for t in leaves], step)
    worst = 0.0
    for a, f in zip(analytic, numeric):
        if a is None:
            a = torch.zeros_like(f)
        denom = torch.maximum(torch.maximum(a.abs(), f.abs()),
                              torch.full_like(f, REL_FLOOR))
        worst = max(worst, ((a - f).abs() / denom).max().item())
    return worst


def _margin(x: Tensor, lo: float = 0.05) -> Tensor:
    """Push values away from zero so |.| stays locally linear under the step."""
    return torch.where(x.abs() < lo, lo * torch.sign(x) + (x == 0) * lo, x)


def _instance(name: str, rng: torch.Generator):
    """Build (fn over raw tensors, inputs) for one randomized loss instance."""
    def r(*shape):
        return torch.randn(*shape, generator=rng, dtype=torch.float64)

    w = LossWeights()
    if name == "image_recon_loss":
        real = r(2, 1, 3, 3)
        recon = real + _margin(r(2, 1, 3, 3))
        return lambda a, b: image_recon_loss(a, b), [recon, real]
    if name == "critic_loss":
        return lambda a, b: critic_loss(a, b), [r(4), r(4)]
    if name == "generator_adv_loss":
        return lambda a: generator_adv_loss(a), [r(5)]
    if name == "prior_kl":
        mu, lv = r(3, 5), r(3, 5).clamp(-1.5, 1.5)
        return lambda m, v: prior_kl(FeatureStats(m, v)), [mu, lv]
    if name == "alignment_uniform_loss":
        q, k, neg = r(3, 5), r(3, 5), r(4, 5)
        return lambda a, b, c: alignment_uniform_loss(a, b, c, w.tau), [q, k, neg]
    if name == "feature_cycle_loss":
        gmu, glv = r(3, 5), r(3, 5).clamp(-1.5, 1.5)
        mmu, mlv = r(3, 5), r(3, 5).clamp(-1.5, 1.5)
        nmu, nsig = r(4, 5), r(4, 5).abs() + 0.1
        fn = lambda a, b, c, d, e, f: feature_cycle_loss(
            FeatureStats(a, b, tag="generated"), FeatureStats(c, d, tag="mixed"),
            e, f, w.tau)
        return fn, [gmu, glv, mmu, mlv, nmu, nsig]
    if name == "feature_distance_loss":
        gmu, glv = r(3, 5), r(3, 5).clamp(-1.5, 1.5)
        mmu = gmu + _margin(r(3, 5), 0.2)
        mlv = (glv + _margin(r(3, 5), 0.4)).clamp(-1.8, 1.8)
        fn = lambda a, b, c, d: feature_distance_loss(
            FeatureStats(a, b, tag="generated"), FeatureStats(c, d, tag="mixed"))
        return fn, [gmu, glv, mmu, mlv]
    if name == "mode_seeking_loss":
        i1 = r(3, 1, 2, 2)
        i2 = i1 + _margin(r(3, 1, 2, 2), 0.2)
        z1 = r(3, 4)
        z2 = z1 + _margin(r(3, 4), 0.2)
        return lambda a, b, c, d: mode_seeking_loss(a, b, c, d), [i1, i2, z1, z2]
    if name == "nt_xent_loss":
        emb = r(6, 5)
        emb = emb + 0.2 * torch.sign(emb)  # keep norms comfortably non-zero
        return lambda e: nt_xent_loss(e, w.tau), [emb]
    if name == "discriminator_objective":
        parts = [r(()) for _ in range(3)]
        return lambda a, b, c: discriminator_objective((a, b, c), w), parts
    if name == "generator_objective":
        parts = [r(()) for _ in range(3)]
        return lambda a, b, c: generator_objective((a, b, c), w), parts
    raise KeyError(name)


ALL_LOSSES = (
    "image_recon_loss", "critic_loss", "generator_adv_loss", "prior_kl",
    "alignment_uniform_loss", "feature_cycle_loss", "feature_distance_loss",
    "mode_seeking_loss", "nt_xent_loss",
    "discriminator_objective", "generator_objective",
)


def run_suite(instances: int = 100, seed: int = 0, step: float = DEFAULT_STEP,
              tol: float = DEFAULT_TOL, losses: tuple = ALL_LOSSES) -> list[GradReport]:
    """Check each named loss on ``instances`` random draws; one report per loss."""
    reports = []
    for li, name in enumerate(losses):
        worst = 0.0
        for i in range(instances):
            rng = torch.Generator().manual_seed(seed * 100003 + li * 7919 + i)
            fn, tensors = _instance(name, rng)
            worst = max(worst, check_gradients(fn, tensors, step))
        reports.append(GradReport(name, instances, worst, worst < tol))
    return reports
