"""Command-line pipeline driver.

Stages write their artifacts into one run directory (``--out``), each with a
manifest carrying the hash of the resolved config, so every later stage can
check it is consuming artifacts from the same configuration. Exit codes:
0 success, 1 validation/usage problems, 2 numeric failures.

Typical flow:
    fewgen make-toy-data --out runs/demo
    fewgen train-gan     --out runs/demo --set train.iterations=2000
    fewgen synthesize    --out runs/demo --count 1000
    fewgen pretrain      --out runs/demo --set ssl.epochs=30
    fewgen evaluate      --out runs/demo --k 8 --seeds 0,1,2
    fewgen report        --out runs/demo
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import torch

from fewgen.config import PipelineConfig, load_config, save_config
from fewgen.contrastive import (build_encoder, load_backbone, save_backbone,
                                simclr_pretrain, write_ssl_telemetry)
from fewgen.data import (ChipDataset, load_chip_dataset, load_flat_images,
                         make_toy_dataset, save_chip_dataset)
from fewgen.errors import NumericError, ValidationError
from fewgen.fewshot import (Classifier, evaluate_metrics, finetune,
                            mean_metrics, sample_k_shot, save_metrics_record)
from fewgen.gradcheck import run_suite
from fewgen.models import Generator, build_models, count_parameters
from fewgen.report import generate_report, render_metrics_table
from fewgen.trainer import GanTrainer, synthesize_dataset
from fewgen.utils import read_manifest, write_manifest


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/default"),
                   help="run directory holding all stage artifacts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewgen",
        description="Few-shot generative augmentation pipeline: train a "
                    "regularized GAN on few chips, synthesize a corpus, "
                    "pretrain an encoder on it, fine-tune a k-shot classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-data", help="render the procedural toy chips")
    _add_common(p)
    p.add_argument("--seed", type=int, default=None, help="override data.seed")

    p = sub.add_parser("train-gan", help="adversarial training on the train chips")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="chip folder (defaults to <out>/data/train)")
    p.add_argument("--iterations", type=int, default=None, help="override train.iterations")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--disable-fr", action="store_true",
                   help="drop the feature-cycle term (ablation)")
    p.add_argument("--disable-ms", action="store_true",
                   help="drop the diversity term (ablation)")
    p.add_argument("--use-plain-distance", action="store_true",
                   help="plain L2 feature distance instead of the alignment form (ablation)")
    p.add_argument("--negatives-mode", choices=("union", "batch", "bank"), default=None,
                   help="negative set for the feature-cycle term")

    p = sub.add_parser("synthesize", help="draw images from a trained generator")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="checkpoint directory (defaults to newest under <out>/gan)")
    p.add_argument("--count", type=int, default=None, help="override synth.count")
    p.add_argument("--seed", type=int, default=None, help="override synth.seed")

    p = sub.add_parser("pretrain", help="contrastive pretraining on the synthetic corpus")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None,
                   help="image folder (defaults to <out>/synth)")
    p.add_argument("--seed", type=int, default=None, help="override ssl.seed")

    p = sub.add_parser("finetune", help="train a k-shot classifier")
    _add_common(p)
    p.add_argument("--k", type=int, default=8, help="labeled chips per class")
    p.add_argument("--seed", type=int, default=0, help="shot sampling + training seed")
    p.add_argument("--random-init", action="store_true",
                   help="skip the pretrained backbone (baseline)")
    p.add_argument("--mode", choices=("full", "head"), default=None,
                   help="override finetune.mode")

    p = sub.add_parser("evaluate", help="fine-tune per seed and report metrics")
    _add_common(p)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seeds", type=str, default="0,1,2", help="comma-separated seeds")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--mode", choices=("full", "head"), default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("report", help="render figures and the metric table")
    _add_common(p)
    p.add_argument("--force", action="store_true",
                   help="allow artifacts from mixed config hashes")
    return parser


# -- plumbing ----------------------------------------------------------------


def _load_cfg(args) -> PipelineConfig:
    config_path = args.config
    if config_path is None:
        pinned = args.out / "config.yaml"
        if pinned.is_file():
            config_path = pinned  # later stages inherit the run's pinned config
    overrides = list(args.overrides)
    # convenience flags translate to overrides so one mechanism rules
    flag_map = {
        "make-toy-data": {"seed": "data.seed"},
        "train-gan": {"iterations": "train.iterations", "seed": "train.seed"},
        "synthesize": {"count": "synth.count", "seed": "synth.seed"},
        "pretrain": {"seed": "ssl.seed"},
    }
    for attr, key in flag_map.get(args.command, {}).items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if args.command == "train-gan":
        for attr, key in (("disable_fr", "train.disable_fr"),
                          ("disable_ms", "train.disable_ms"),
                          ("use_plain_distance", "train.use_plain_distance")):
            if getattr(args, attr):
                overrides.append(f"{key}=true")
        if args.negatives_mode:
            overrides.append(f"train.negatives_mode={args.negatives_mode}")
    if args.command in ("finetune", "evaluate") and getattr(args, "mode", None):
        overrides.append(f"finetune.mode={args.mode}")
    return load_config(config_path, overrides)


def _ensure_run_config(out: Path, cfg: PipelineConfig):
    """Persist the resolved config in the run dir; reject a conflicting one."""
    path = out / "config.yaml"
    if path.is_file():
        existing = load_config(path)
        if existing.hash != cfg.hash:
            raise ValidationError(
                f"{path} holds a different configuration (hash {existing.hash[:12]} "
                f"vs {cfg.hash[:12]}); use a fresh --out or matching settings"
            )
    else:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, path)


def _check_upstream(manifest: dict, cfg_hash: str, what: str, producer: str):
    up = manifest.get("config_hash")
    if up and up != cfg_hash:
        raise ValidationError(
            f"{what} was produced under config hash {up[:12]} but the current "
            f"config hashes to {cfg_hash[:12]}; re-run {producer} or adjust the config"
        )


def _train_chips(args, cfg) -> ChipDataset:
    root = args.data if getattr(args, "data", None) else args.out / "data" / "train"
    if not Path(root).is_dir():
        raise ValidationError(
            f"no training chips at {root}; run make-toy-data first or pass --data"
        )
    return load_chip_dataset(root, cfg.model.image_size, split="train")


# -- subcommands ---------------------------------------------------------------


def cmd_make_toy_data(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    d = cfg.data
    train = make_toy_dataset(d.classes, d.per_class, cfg.model.image_size,
                             seed=d.seed, split="train")
    test = make_toy_dataset(d.classes, d.test_per_class, cfg.model.image_size,
                            seed=d.seed + 10007, split="test")
    data_dir = args.out / "data"
    save_chip_dataset(train, data_dir / "train")
    save_chip_dataset(test, data_dir / "test")
    write_manifest(data_dir, {
        "kind": "toy-data", "config_hash": cfg.hash, "classes": d.classes,
        "train_chips": len(train), "test_chips": len(test),
        "image_size": cfg.model.image_size, "seed": d.seed,
    })
    print(f"wrote {len(train)} train / {len(test)} test chips to {data_dir}")
    return 0


def cmd_train_gan(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    ds = _train_chips(args, cfg)
    torch.manual_seed(cfg.train.seed)  # model init reproducibility
    g, d = build_models(cfg.model.latent_dim, cfg.model.image_size,
                        cfg.model.channels, cfg.model.base_channels)
    n_params = count_parameters(g, d)
    print(f"models built: {n_params / 1e6:.2f}M trainable parameters")
    trainer = GanTrainer(g, d, cfg.train)
    gan_dir = args.out / "gan"
    trainer.run(ds, gan_dir, cfg_hash=cfg.hash, final_checkpoint=True)
    write_manifest(gan_dir, {
        "kind": "gan-run", "config_hash": cfg.hash,
        "iterations": trainer.iteration, "seed": cfg.train.seed,
        "parameters": n_params,
    })
    last = trainer.telemetry[-1]
    print(f"finished {trainer.iteration} iterations; "
          f"final d_total={last['d_total']:.4f} g_total={last['g_total']:.4f}")
    print(f"telemetry: {gan_dir / 'telemetry.csv'}")
    return 0


def _latest_checkpoint(gan_dir: Path) -> Path:
    ckpts = sorted(gan_dir.glob("ckpt_*")) if gan_dir.is_dir() else []
    if not ckpts:
        raise ValidationError(
            f"no checkpoints under {gan_dir}; run train-gan first or pass --checkpoint"
        )
    return ckpts[-1]


def cmd_synthesize(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    ckpt = args.checkpoint or _latest_checkpoint(args.out / "gan")
    _check_upstream(read_manifest(ckpt), cfg.hash, f"checkpoint {ckpt}", "train-gan")
    g = Generator(cfg.model.latent_dim, cfg.model.image_size,
                  cfg.model.channels, cfg.model.base_channels)
    payload = synthesize_dataset(g, ckpt, cfg.synth.count, cfg.synth.seed,
                                 args.out / "synth", batch=cfg.synth.batch)
    print(f"synthesized {payload['count']} images into {args.out / 'synth'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    synth_dir = args.data if args.data else args.out / "synth"
    if not Path(synth_dir).is_dir():
        raise ValidationError(
            f"no synthetic corpus at {synth_dir}; run synthesize first or pass --data"
        )
    try:
        upstream = read_manifest(synth_dir)
        _check_upstream(upstream, cfg.hash, f"corpus {synth_dir}", "synthesize")
        upstream_hash = upstream.get("checkpoint_hash")
    except FileNotFoundError:
        upstream_hash = None  # external corpora are allowed without a manifest
    images = load_flat_images(synth_dir, cfg.model.image_size)
    encoder, telemetry = simclr_pretrain(images, cfg.ssl)
    ssl_dir = args.out / "ssl"
    save_backbone(encoder, ssl_dir, cfg.ssl,
                  extra={"config_hash": cfg.hash, "corpus": str(synth_dir),
                         "corpus_checkpoint_hash": upstream_hash,
                         "corpus_size": int(images.shape[0])})
    write_ssl_telemetry(ssl_dir, telemetry)
    print(f"pretrained {cfg.ssl.arch} encoder on {images.shape[0]} images "
          f"for {cfg.ssl.epochs} epochs; final mean loss "
          f"{telemetry[-1]['mean_loss']:.4f}")
    return 0


def _make_classifier(args, cfg, seed: int) -> tuple[Classifier, str]:
    train_root = args.out / "data" / "train"
    if not train_root.is_dir():
        raise ValidationError(
            f"no labeled chips at {train_root}; run make-toy-data first"
        )
    train_ds = load_chip_dataset(train_root, cfg.model.image_size, split="train")
    shots = sample_k_shot(train_ds, args.k, seed)
    ft = dataclasses.replace(cfg.finetune, seed=seed)
    if args.random_init:
        torch.manual_seed(seed)
        backbone = build_encoder(cfg.ssl.arch, cfg.model.channels, cfg.ssl.width)
        method = "random-init"
    else:
        backbone, manifest = load_backbone(args.out / "ssl")
        _check_upstream(manifest, cfg.hash, "backbone", "pretrain")
        method = "pretrained"
    clf = finetune(backbone, shots, ft, num_classes=train_ds.num_classes)
    if ft.mode == "head":
        method += "-head"
    return clf, method


def cmd_finetune(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    clf, method = _make_classifier(args, cfg, args.seed)
    clf_dir = args.out / "classifiers" / f"{method}_k{args.k}_seed{args.seed}"
    clf_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"classifier": clf.state_dict()}, clf_dir / "classifier.pt")
    write_manifest(clf_dir, {
        "kind": "classifier", "config_hash": cfg.hash, "method": method,
        "k": args.k, "seed": args.seed, "num_classes": clf.num_classes,
        "arch": cfg.ssl.arch, "width": cfg.ssl.width,
    })
    print(f"fine-tuned {method} classifier (k={args.k}, seed={args.seed}) -> {clf_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    _ensure_run_config(args.out, cfg)
    test_root = args.out / "data" / "test"
    if not test_root.is_dir():
        raise ValidationError(f"no test chips at {test_root}; run make-toy-data first")
    test_ds = load_chip_dataset(test_root, cfg.model.image_size, split="test")
    seeds = [int(s) for s in str(args.seeds).split(",") if s != ""]
    if not seeds:
        raise ValidationError("need at least one seed")
    records = []
    for seed in seeds:
        clf, method = _make_classifier(args, cfg, seed)
        rec = evaluate_metrics(clf, test_ds)
        save_metrics_record(args.out / "eval", method, args.k, seed, rec, cfg.hash)
        records.append({"method": method, "k": args.k, "seed": seed, **rec})
    mean = mean_metrics([{k: v for k, v in r.items()
                          if isinstance(v, (int, float)) and k not in ("k", "seed")}
                         for r in records])
    print(render_metrics_table(records), end="")
    print(f"mean accuracy over {len(seeds)} seed(s): {mean['accuracy']:.2f}%")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_suite(instances=args.instances, seed=args.seed, tol=args.tolerance)
    all_ok = True
    for rep in reports:
        status = "pass" if rep.passed else "FAIL"
        print(f"{status}  {rep.name:<28} max_rel_err={rep.max_rel_err:.3e} "
              f"({rep.instances} instances)")
        all_ok &= rep.passed
    if not all_ok:
        raise NumericError("gradient check failed for at least one loss")
    return 0


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    produced = generate_report(args.out, force=args.force)
    del cfg  # consistency enforced via artifact manifests, not re-hashing here
    print(f"report written: {produced['summary']}")
    for p in produced["figures"]:
        print(f"figure: {p}")
    for p in produced["tables"]:
        print(f"table: {p}")
    return 0


HANDLERS = {
    "make-toy-data": cmd_make_toy_data,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
