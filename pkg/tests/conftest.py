"""Shared fixtures. The expensive end-to-end pipeline is built once per session."""

import time

import pytest
import torch

from fewgen.contrastive import SslConfig, ViewConfig, simclr_pretrain
from fewgen.data import make_toy_dataset
from fewgen.models import build_models
from fewgen.trainer import GanTrainer, TrainConfig


@pytest.fixture(scope="session")
def toy_pipeline():
    """Desk-scale GAN training + synthesis + contrastive pretraining.

    Shared by the end-to-end acceptance checks and the representation probe;
    everything downstream of this dict must treat it as read-only.
    """
    t0 = time.perf_counter()
    train_ds = make_toy_dataset(10, 8, 32, seed=0)
    test_ds = make_toy_dataset(10, 20, 32, seed=10007, split="test")
    torch.manual_seed(0)
    gen, disc = build_models(latent_dim=32, image_size=32, channels=1,
                             base_channels=16)
    cfg = TrainConfig(iterations=2000, batch_size=8, bank_capacity=256, seed=0)
    trainer = GanTrainer(gen, disc, cfg)
    rows = trainer.run(train_ds)
    gan_seconds = time.perf_counter() - t0

    gen.eval()
    zgen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        synth = torch.cat([gen(torch.randn(100, 32, generator=zgen))
                           for _ in range(10)])

    ssl_cfg = SslConfig(epochs=60, batch_size=32, lr=1e-3, seed=0, arch="small",
                        width=16, proj_dim=32, views=ViewConfig(crop_min=0.5))
    encoder, ssl_rows = simclr_pretrain(synth, ssl_cfg)

    return {
        "train_ds": train_ds,
        "test_ds": test_ds,
        "generator": gen,
        "telemetry": rows,
        "gan_seconds": gan_seconds,
        "synthetic": synth,
        "encoder": encoder,
        "ssl_cfg": ssl_cfg,
        "ssl_telemetry": ssl_rows,
    }
