"""Run reporting: loss curves, per-checkpoint sample grids, metric tables.

Figures are rendered headlessly to files; the metric table is tab-delimited
text next to them. Every consumed artifact carries the config hash that
produced it, and a report refuses to mix hashes unless forced.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import torch

from fewgen.errors import ValidationError
from fewgen.utils import read_manifest, read_telemetry

METRIC_COLUMNS = ["method", "k", "seed", "accuracy", "balanced_accuracy",
                  "macro_precision", "macro_recall", "macro_f1", "n_test"]


def plot_loss_curves(rows: list[dict], out_path: str | Path) -> Path:
    """Two panels: discriminator and generator loss terms over iterations."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    it = [r["iteration"] for r in rows]
    fig, (ax_d, ax_g) = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("d_gan", "d_feat", "d_prior", "d_total"):
        ax_d.plot(it, [r[key] for r in rows], label=key, linewidth=0.9)
    ax_d.set_title("discriminator terms")
    for key in ("g_gan", "g_ir", "g_ms", "g_total"):
        ax_g.plot(it, [r[key] for r in rows], label=key, linewidth=0.9)
    ax_g.set_title("generator terms")
    for ax in (ax_d, ax_g):
        ax.set_xlabel("iteration")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ssl_curve(rows: list[dict], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["epoch"] for r in rows], [r["mean_loss"] for r in rows], marker="o",
            markersize=2, linewidth=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean contrastive loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def sample_grid(images: torch.Tensor, out_path: str | Path, ncols: int = 8,
                title: str | None = None) -> Path:
    """Tile generated chips into one figure; input in [-1, 1]."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = images.shape[0]
    ncols = min(ncols, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.3 * ncols, 1.3 * nrows))
    axes = [axes] if n == 1 else list(axes.flat)
    for i, ax in enumerate(axes):
        ax.axis("off")
        if i < n:
            ax.imshow(images[i, 0].detach().numpy(), cmap="gray", vmin=-1, vmax=1)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_metrics_table(records: list[dict]) -> str:
    """Tab-delimited table, one row per (method, k, seed) plus mean rows."""
    lines = ["\t".join(METRIC_COLUMNS)]
    groups = defaultdict(list)
    for rec in records:
        groups[(rec.get("method", "?"), rec.get("k", "?"))].append(rec)
    for (method, k), group in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        for rec in sorted(group, key=lambda r: str(r.get("seed"))):
            lines.append("\t".join(_fmt(rec.get(c)) for c in METRIC_COLUMNS))
        if len(group) > 1:
            mean = {"method": method, "k": k, "seed": "mean"}
            for c in METRIC_COLUMNS[3:]:
                vals = [g[c] for g in group if isinstance(g.get(c), (int, float))]
                if vals:
                    mean[c] = sum(vals) / len(vals)
            lines.append("\t".join(_fmt(mean.get(c)) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return "" if v is None else str(v)


def collect_config_hashes(run_dir: Path) -> dict[str, str]:
    """Map artifact directory -> config hash for every manifest under run_dir."""
    hashes = {}
    for manifest in sorted(run_dir.rglob("manifest.json")):
        try:
            payload = json.loads(manifest.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"corrupt manifest {manifest}: {exc}")
        h = payload.get("config_hash")
        if h:
            hashes[str(manifest.parent.relative_to(run_dir))] = h
    return hashes


def generate_report(run_dir: str | Path, out_dir: str | Path | None = None,
                    force: bool = False, grid_n: int = 32) -> dict:
    """Render figures and tables for one pipeline run directory.

    Emits loss_curves.png, ssl_curve.png, one samples_*.png grid per
    checkpoint, and metrics.tsv, depending on which artifacts exist.
    Mixed config hashes across artifacts abort unless ``force``.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run directory {run_dir} does not exist")
    out_dir = Path(out_dir) if out_dir else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    hashes = collect_config_hashes(run_dir)
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1 and not force:
        detail = ", ".join(f"{k}={v[:12]}" for k, v in sorted(hashes.items()))
        raise ValidationError(
            f"mixed config hashes in {run_dir} ({detail}); re-run stages from one "
            "config or pass force"
        )

    produced = {"figures": [], "tables": []}
    telemetry_path = run_dir / "gan" / "telemetry.csv"
    if telemetry_path.is_file():
        rows = read_telemetry(telemetry_path)
        produced["figures"].append(str(plot_loss_curves(rows, out_dir / "loss_curves.png")))

    ssl_path = run_dir / "ssl" / "ssl_telemetry.csv"
    if ssl_path.is_file():
        rows = read_telemetry(ssl_path)
        produced["figures"].append(str(plot_ssl_curve(rows, out_dir / "ssl_curve.png")))

    ckpts = sorted((run_dir / "gan").glob("ckpt_*")) if (run_dir / "gan").is_dir() else []
    if ckpts:
        from fewgen.config import load_config
        from fewgen.models import Generator
        from fewgen.trainer import load_generator_checkpoint

        cfg_path = run_dir / "config.yaml"
        if cfg_path.is_file():
            cfg = load_config(cfg_path)
            for ckpt in ckpts:
                g = Generator(cfg.model.latent_dim, cfg.model.image_size,
                              cfg.model.channels, cfg.model.base_channels)
                manifest = load_generator_checkpoint(ckpt, g)
                g.eval()
                rng = torch.Generator().manual_seed(0)
                with torch.no_grad():
                    imgs = g(torch.randn(grid_n, cfg.model.latent_dim, generator=rng))
                fig_path = sample_grid(
                    imgs, out_dir / f"samples_{ckpt.name}.png",
                    title=f"iteration {manifest.get('iteration')}")
                produced["figures"].append(str(fig_path))

    eval_dir = run_dir / "eval"
    records = []
    if eval_dir.is_dir():
        for path in sorted(eval_dir.glob("metrics_*.json")):
            records.append(json.loads(path.read_text()))
    if records:
        table = render_metrics_table(records)
        table_path = out_dir / "metrics.tsv"
        table_path.write_text(table)
        produced["tables"].append(str(table_path))

    summary = out_dir / "report.txt"
    with open(summary, "w") as f:
        f.write(f"run: {run_dir}\n")
        f.write(f"config hashes: {distinct or ['none']}\n")
        for kind in ("figures", "tables"):
            for p in produced[kind]:
                f.write(f"{kind[:-1]}: {p}\n")
    produced["summary"] = str(summary)
    return produced
