"""Momentum feature bank for the feature-cycle negatives.

A shadow copy of the discriminator is advanced by exponential moving
average and used (gradient-free) to encode real images; the resulting mu
and sigma snapshots land in fixed-capacity FIFO queues that supply negative
keys. Keeping the keys from a slowly trailing encoder stops the negative
set from chasing the current discriminator step for step.
"""

from __future__ import annotations

import copy

import torch
from torch import Tensor, nn

from fewgen.errors import DimensionError, ValidationError
from fewgen.latent import FeatureStats

NEGATIVES_MODES = ("union", "batch", "bank")


class FeatureQueue:
    """Fixed-capacity FIFO of feature rows, oldest evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValidationError("queue capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf = torch.zeros(capacity, dim)
        self._size = 0
        self._head = 0  # next write slot

    def __len__(self) -> int:
        return self._size

    def push(self, rows: Tensor):
        rows = torch.atleast_2d(rows.detach())
        if rows.shape[1] != self.dim:
            raise DimensionError(f"expected rows of dim {self.dim}, got {rows.shape[1]}")
        for r in rows:
            self._buf[self._head] = r
            self._head = (self._head + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def snapshot(self) -> Tensor:
        """Current contents in insertion order, oldest first."""
        if self._size < self.capacity:
            return self._buf[: self._size].clone()
        return torch.cat([self._buf[self._head:], self._buf[: self._head]]).clone()

    def state_dict(self) -> dict:
        return {"buf": self._buf.clone(), "size": self._size, "head": self._head}

    def load_state_dict(self, state: dict):
        if state["buf"].shape != self._buf.shape:
            raise DimensionError("queue state shape mismatch")
        self._buf = state["buf"].clone()
        self._size = int(state["size"])
        self._head = int(state["head"])


class MomentumBank:
    """EMA shadow encoder plus paired mu/sigma queues.

    ``momentum`` close to 1 makes the shadow trail slowly; ``update`` must be
    called after each discriminator optimizer step, ``enqueue_real`` with the
    same step's real batch.
    """

    def __init__(self, discriminator: nn.Module, capacity: int = 512,
                 momentum: float = 0.999):
        if not 0.0 <= momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.shadow = copy.deepcopy(discriminator)
        for p in self.shadow.parameters():
            p.requires_grad_(False)
        self.shadow.eval()
        dim = discriminator.feature_dim
        self.mu_queue = FeatureQueue(capacity, dim)
        self.sigma_queue = FeatureQueue(capacity, dim)

    @torch.no_grad()
    def update(self, discriminator: nn.Module):
        """shadow <- m * shadow + (1 - m) * live, buffers copied outright."""
        live_p = dict(discriminator.named_parameters())
        for name, p in self.shadow.named_parameters():
            p.mul_(self.momentum).add_(live_p[name], alpha=1.0 - self.momentum)
        live_b = dict(discriminator.named_buffers())
        for name, b in self.shadow.named_buffers():
            b.copy_(live_b[name])

    @torch.no_grad()
    def encode(self, x: Tensor) -> FeatureStats:
        return self.shadow.encode(x, tag="real")

    @torch.no_grad()
    def enqueue_real(self, x: Tensor) -> FeatureStats:
        """Encode a real batch with the shadow and push its mu/sigma rows."""
        stats = self.encode(x)
        self.mu_queue.push(torch.atleast_2d(stats.mu))
        self.sigma_queue.push(torch.atleast_2d(stats.sigma))
        return stats

    def negatives(self, batch_stats: FeatureStats | None, mode: str = "union"
                  ) -> tuple[Tensor | None, Tensor | None]:
        """Assemble (neg_mu, neg_sigma) from the batch, the bank, or both.

        Batch negatives are the current real batch's own (detached) stats;
        bank negatives the queue snapshots. Empty sources drop out; if
        nothing is available both returns are None.
        """
        if mode not in NEGATIVES_MODES:
            raise ValidationError(f"negatives mode must be one of {NEGATIVES_MODES}")
        mus, sigmas = [], []
        if mode in ("union", "batch") and batch_stats is not None:
            mus.append(torch.atleast_2d(batch_stats.mu).detach())
            sigmas.append(torch.atleast_2d(batch_stats.sigma).detach())
        if mode in ("union", "bank") and len(self.mu_queue) > 0:
            mus.append(self.mu_queue.snapshot())
            sigmas.append(self.sigma_queue.snapshot())
        if not mus:
            return None, None
        return torch.cat(mus), torch.cat(sigmas)

    def state_dict(self) -> dict:
        return {
            "shadow": self.shadow.state_dict(),
            "mu_queue": self.mu_queue.state_dict(),
            "sigma_queue": self.sigma_queue.state_dict(),
            "momentum": self.momentum,
        }

    def load_state_dict(self, state: dict):
        self.shadow.load_state_dict(state["shadow"])
        self.mu_queue.load_state_dict(state["mu_queue"])
        self.sigma_queue.load_state_dict(state["sigma_queue"])
        self.momentum = float(state["momentum"])
