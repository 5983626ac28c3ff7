"""Adversarial training loop with feature-cycle and diversity regularization.

One iteration is one discriminator step followed by one generator step, each
on a freshly sampled (optionally augmented) real batch. Randomness is split
between two explicit sources so runs are bit-reproducible:

* ``data_rng`` (numpy): batch index draws, then per-image augmentation draws.
* ``op_rng`` (torch): latent-side draws, consumed in a fixed order -
  D step: pairing derangement, masks, eps for the mixed codes;
  G step: eps for the real codes, derangement, masks, eps for the mixed
  codes, then (only when the diversity term is enabled) the pair shuffle.

The mixing draws feed image generation, so they are consumed whether or not
the feature-cycle term is enabled: ``disable_fr`` drops that loss term and
the momentum bank, ``disable_ms`` drops the diversity term and its shuffle
draw. A run with both set consumes exactly the stream of a plain VAE-GAN
loop generating from mixed codes, making the reduction comparison bit-exact.

Gradient routing: the discriminator step scores detached generated images
(its losses reach only discriminator weights); the generator step encodes
real images without gradients, so reconstruction gradients reach only the
generator. The momentum bank is advanced after the discriminator's
optimizer step, then the real batch is enqueued.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from fewgen.bank import NEGATIVES_MODES, MomentumBank
from fewgen.data import ChipDataset, augment_basic
from fewgen.errors import NumericError, PairingError, ValidationError
from fewgen.latent import (FeatureStats, interpolate_stats, reparameterize,
                           sample_derangement, sample_masks)
from fewgen.losses import (LossWeights, critic_loss, discriminator_objective,
                           feature_cycle_loss, feature_distance_loss,
                           generator_adv_loss, generator_objective,
                           image_recon_loss, mode_seeking_loss, prior_kl)
from fewgen.utils import (config_hash, numpy_rng_state, read_manifest,
                          restore_numpy_rng, write_manifest, write_telemetry)

TELEMETRY_COLUMNS = ["iteration", "d_gan", "d_feat", "d_prior", "d_total",
                     "g_gan", "g_ir", "g_ms", "g_total", "bank_size", "wall_clock"]
# wall_clock is informational; determinism comparisons must exclude it.
DETERMINISTIC_COLUMNS = [c for c in TELEMETRY_COLUMNS if c != "wall_clock"]


@dataclass
class TrainConfig:
    """Knobs for the adversarial stage.

    Optimizer defaults are the usual Adam settings for this family of
    convolutional GANs (lr 2e-4, betas 0.5/0.999); the loss weights and the
    bank momentum carry their own defaults in LossWeights/bank settings.
    """

    iterations: int = 15000
    batch_size: int = 16
    d_lr: float = 2e-4
    g_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 5000
    seed: int = 0
    mask_p: float = 0.5
    bank_capacity: int = 512
    bank_momentum: float = 0.999
    negatives_mode: str = "union"
    augment: bool = True
    disable_fr: bool = False
    disable_ms: bool = False
    use_plain_distance: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (pairing needs two images)")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")
        if self.negatives_mode not in NEGATIVES_MODES:
            raise ValidationError(f"negatives_mode must be one of {NEGATIVES_MODES}")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ValidationError("mask_p must lie in [0, 1]")


def _detached(stats: FeatureStats) -> FeatureStats:
    return FeatureStats(stats.mu.detach(), stats.log_var.detach(), tag=stats.tag)


class GanTrainer:
    """Owns the models, optimizers, bank, and the two random streams."""

    def __init__(self, generator, discriminator, config: TrainConfig):
        self.g = generator
        self.d = discriminator
        self.config = config
        w = config.weights
        self.weights = w
        self.opt_d = torch.optim.Adam(self.d.parameters(), lr=config.d_lr,
                                      betas=(config.beta1, config.beta2))
        self.opt_g = torch.optim.Adam(self.g.parameters(), lr=config.g_lr,
                                      betas=(config.beta1, config.beta2))
        self.bank = None
        if not config.disable_fr:
            self.bank = MomentumBank(self.d, capacity=config.bank_capacity,
                                     momentum=config.bank_momentum)
        self.data_rng = np.random.default_rng(config.seed)
        self.op_rng = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        self.telemetry: list[dict] = []

    # -- latent plumbing -------------------------------------------------

    def _mixed_codes(self, stats: FeatureStats):
        """Derangement-pair the batch stats, mix under fresh masks, sample z^m.

        Consumes, in order: one derangement, one mask batch, one eps batch.
        Returns (codes, mixed_stats); everything is detached from the graph.
        """
        mu = stats.mu.detach()
        log_var = stats.log_var.detach()
        n = mu.shape[0]
        if n < 2:
            raise PairingError("mixing needs a batch of at least 2")
        partner = sample_derangement(n, self.op_rng)
        masks = sample_masks(n, mu.shape[1], self.config.mask_p, self.op_rng,
                             dtype=mu.dtype)
        a = FeatureStats(mu, log_var, tag="real")
        b = FeatureStats(mu[partner], log_var[partner], tag="real")
        mixed = interpolate_stats(a, b, masks)
        eps = torch.randn(mu.shape, generator=self.op_rng, dtype=mu.dtype)
        code = reparameterize(mixed, eps=eps)
        return code, mixed

    # -- steps -----------------------------------------------------------

    def train_step_d(self, x_real: Tensor) -> dict:
        """One discriminator update; returns the per-term losses as floats."""
        if x_real.shape[0] < 2:
            raise PairingError("discriminator step needs a batch of at least 2")
        self.opt_d.zero_grad(set_to_none=True)
        self.opt_g.zero_grad(set_to_none=True)

        score_real, stats_real = self.d(x_real)
        code_m, mixed = self._mixed_codes(stats_real)
        with torch.no_grad():
            x_gen = self.g(code_m.z)
        score_fake, stats_gen = self.d(x_gen, tag="generated")

        loss_gan = critic_loss(score_real, score_fake)
        if self.config.disable_fr:
            loss_feat = torch.zeros((), dtype=loss_gan.dtype)
        elif self.config.use_plain_distance:
            loss_feat = feature_distance_loss(stats_gen, mixed)
        else:
            neg_mu, neg_sigma = self.bank.negatives(_detached(stats_real),
                                                    mode=self.config.negatives_mode)
            loss_feat = feature_cycle_loss(stats_gen, mixed, neg_mu, neg_sigma,
                                           self.weights.tau)
        loss_prior = prior_kl(stats_real) + prior_kl(stats_gen)

        total = discriminator_objective((loss_gan, loss_feat, loss_prior), self.weights)
        total.backward()
        self.opt_d.step()
        if self.bank is not None:
            self.bank.update(self.d)
            with torch.no_grad():
                self.bank.enqueue_real(x_real)
        return {"d_gan": loss_gan.item(), "d_feat": loss_feat.item(),
                "d_prior": loss_prior.item(), "d_total": total.item()}

    def train_step_g(self, x_real: Tensor) -> dict:
        """One generator update; returns the per-term losses as floats."""
        if x_real.shape[0] < 2:
            raise PairingError("generator step needs a batch of at least 2")
        self.opt_d.zero_grad(set_to_none=True)
        self.opt_g.zero_grad(set_to_none=True)

        with torch.no_grad():
            _, stats_real = self.d(x_real)
        eps_r = torch.randn(stats_real.mu.shape, generator=self.op_rng,
                            dtype=stats_real.mu.dtype)
        code_r = reparameterize(_detached(stats_real), eps=eps_r)
        x_rec = self.g(code_r.z)
        loss_ir = image_recon_loss(x_rec, x_real)

        code_m, _ = self._mixed_codes(stats_real)
        x_gen = self.g(code_m.z)
        score_fake, _ = self.d(x_gen, tag="generated")
        loss_gan = generator_adv_loss(score_fake)

        if self.config.disable_ms:
            loss_ms = torch.zeros((), dtype=loss_gan.dtype)
        else:
            n = x_real.shape[0]
            pool_img = torch.cat([x_rec, x_gen])
            pool_z = torch.cat([code_r.z, code_m.z])
            shuffle = torch.randperm(2 * n, generator=self.op_rng)
            loss_ms = mode_seeking_loss(pool_img[shuffle[:n]], pool_img[shuffle[n:]],
                                        pool_z[shuffle[:n]], pool_z[shuffle[n:]])

        total = generator_objective((loss_gan, loss_ir, loss_ms), self.weights)
        total.backward()
        self.opt_g.step()
        return {"g_gan": loss_gan.item(), "g_ir": loss_ir.item(),
                "g_ms": loss_ms.item(), "g_total": total.item()}

    # -- loop ------------------------------------------------------------

    def _sample_batch(self, ds: ChipDataset) -> tuple[Tensor, np.ndarray]:
        idx = self.data_rng.integers(0, len(ds), size=self.config.batch_size)
        batch = ds.images[torch.from_numpy(idx)].clone()
        if self.config.augment:
            for i in range(batch.shape[0]):
                batch[i] = augment_basic(batch[i], self.data_rng)
        return batch.to(next(self.g.parameters()).dtype), idx

    def run(self, ds: ChipDataset, out_dir: str | Path | None = None,
            iterations: int | None = None, cfg_hash: str | None = None,
            final_checkpoint: bool = False) -> list[dict]:
        """Train for the configured number of iterations.

        Appends one telemetry row per iteration and writes checkpoints on the
        ``checkpoint_every`` cadence when ``out_dir`` is given;
        ``final_checkpoint`` additionally snapshots an off-cadence last
        iteration. Any non-finite loss aborts with the offending batch indices.
        """
        if len(ds) == 0:
            raise ValidationError("training dataset is empty")
        total = self.config.iterations if iterations is None else iterations
        out_dir = Path(out_dir) if out_dir is not None else None
        cfg_hash = cfg_hash or config_hash(self.config)
        start = time.perf_counter()
        for _ in range(total):
            self.iteration += 1
            x_d, idx_d = self._sample_batch(ds)
            d_losses = self.train_step_d(x_d)
            x_g, idx_g = self._sample_batch(ds)
            g_losses = self.train_step_g(x_g)
            row = {"iteration": self.iteration, **d_losses, **g_losses,
                   "bank_size": len(self.bank.mu_queue) if self.bank else 0,
                   "wall_clock": time.perf_counter() - start}
            self._check_finite(row, idx_d, idx_g)
            self.telemetry.append(row)
            if out_dir is not None and self.iteration % self.config.checkpoint_every == 0:
                self.save_checkpoint(out_dir / f"ckpt_{self.iteration:06d}", cfg_hash)
        if out_dir is not None:
            if final_checkpoint and self.iteration % self.config.checkpoint_every != 0:
                self.save_checkpoint(out_dir / f"ckpt_{self.iteration:06d}", cfg_hash)
            write_telemetry(out_dir / "telemetry.csv", self.telemetry, TELEMETRY_COLUMNS)
        return self.telemetry

    def _check_finite(self, row: dict, idx_d: np.ndarray, idx_g: np.ndarray):
        bad = [k for k, v in row.items()
               if isinstance(v, float) and not np.isfinite(v)]
        if bad:
            raise NumericError(
                f"non-finite telemetry {bad} at iteration {row['iteration']}; "
                f"D batch indices {idx_d.tolist()}, G batch indices {idx_g.tolist()}"
            )

    # -- persistence -----------------------------------------------------

    def save_checkpoint(self, ckpt_dir: str | Path, cfg_hash: str | None = None):
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        state = {
            "generator": self.g.state_dict(),
            "discriminator": self.d.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "bank": self.bank.state_dict() if self.bank else {},
            "torch_rng": self.op_rng.get_state(),
            "numpy_rng": numpy_rng_state(self.data_rng),
            "iteration": self.iteration,
        }
        torch.save(state, ckpt_dir / "state.pt")
        write_manifest(ckpt_dir, {
            "kind": "gan-checkpoint",
            "iteration": self.iteration,
            "seed": self.config.seed,
            "config_hash": cfg_hash or config_hash(self.config),
        })

    def load_checkpoint(self, ckpt_dir: str | Path):
        ckpt_dir = Path(ckpt_dir)
        state = torch.load(ckpt_dir / "state.pt", weights_only=True)
        self.g.load_state_dict(state["generator"])
        self.d.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        if self.bank is not None and state["bank"]:
            self.bank.load_state_dict(state["bank"])
        self.op_rng.set_state(state["torch_rng"])
        self.data_rng = restore_numpy_rng(state["numpy_rng"])
        self.iteration = int(state["iteration"])
        return read_manifest(ckpt_dir)


def load_generator_checkpoint(ckpt_dir: str | Path, generator) -> dict:
    """Load only generator weights from a checkpoint; returns the manifest."""
    ckpt_dir = Path(ckpt_dir)
    state_path = ckpt_dir / "state.pt"
    if not state_path.is_file():
        raise FileNotFoundError(
            f"no checkpoint state at {state_path}; produce one with the train-gan subcommand"
        )
    state = torch.load(state_path, weights_only=True)
    generator.load_state_dict(state["generator"])
    return read_manifest(ckpt_dir)


def synthesize_dataset(generator, ckpt_dir: str | Path, count: int, seed: int,
                       out_dir: str | Path, batch: int = 64) -> dict:
    """Generate ``count`` images from unit-Gaussian latents and write PNGs.

    No real images are involved: latents come straight from N(0, I). All
    latents are drawn in one call so the output set depends only on
    (seed, checkpoint), not on the generation batch size. Returns the
    manifest, which records the seed and the checkpoint state hash.
    """
    from fewgen.data import to_uint8  # local import to avoid a cycle at module load
    from fewgen.utils import file_hash
    from PIL import Image

    if count < 0:
        raise ValidationError("count must be >= 0")
    ckpt_manifest = load_generator_checkpoint(ckpt_dir, generator)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = torch.Generator().manual_seed(seed)
    z = torch.randn(count, generator.latent_dim, generator=rng)
    generator.eval()
    names = []
    width = max(len(str(max(count - 1, 0))), 4)
    with torch.no_grad():
        for start in range(0, count, batch):
            imgs = generator(z[start:start + batch])
            for j in range(imgs.shape[0]):
                name = f"synth_{start + j:0{width}d}.png"
                Image.fromarray(to_uint8(imgs[j, 0]), mode="L").save(out_dir / name)
                names.append(name)
    payload = {
        "kind": "synthetic-dataset",
        "count": count,
        "seed": seed,
        "checkpoint_hash": file_hash(Path(ckpt_dir) / "state.pt"),
        "checkpoint_iteration": ckpt_manifest.get("iteration"),
        "config_hash": ckpt_manifest.get("config_hash"),
        "files": names,
    }
    write_manifest(out_dir, payload)
    return payload
