"""k-shot fine-tuning and evaluation.

Fine-tuning uses only real labeled chips (synthetic data never enters this
stage). Metrics are macro-averaged over classes present in the test set;
both overall and class-balanced accuracy are reported since multi-class
tables rarely say which they mean.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from fewgen.data import ChipDataset, augment_basic
from fewgen.errors import NumericError, ValidationError

FINETUNE_MODES = ("full", "head")


def sample_k_shot(ds: ChipDataset, k: int, seed: int) -> ChipDataset:
    """Pick exactly k chips per class, deterministically under the seed."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    chosen = []
    for label in range(ds.num_classes):
        pool = ds.indices_for_class(label).numpy()
        if len(pool) < k:
            raise ValidationError(
                f"class {label} has {len(pool)} chips, cannot sample k={k}"
            )
        picks = rng.choice(pool, size=k, replace=False)
        chosen.extend(sorted(int(i) for i in picks))
    return ds.subset(chosen)


@dataclass
class FinetuneConfig:
    """Schedule and mode for the downstream classifier.

    Adam at lr 0.003 with a x0.1 decay entering epochs 30 and 80, 100 epochs
    total. mode 'full' updates backbone and head; 'head' freezes the backbone
    and trains only the classification layer.
    """

    epochs: int = 100
    lr: float = 0.003
    decay_epochs: tuple = (30, 80)
    decay: float = 0.1
    batch_size: int | None = None  # None: min(32, number of shots)
    mode: str = "full"
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.decay_epochs, list):
            self.decay_epochs = tuple(self.decay_epochs)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.mode not in FINETUNE_MODES:
            raise ValidationError(f"mode must be one of {FINETUNE_MODES}")
        if not 0.0 < self.decay <= 1.0:
            raise ValidationError("decay must lie in (0, 1]")


def lr_at(epoch: int, cfg: FinetuneConfig) -> float:
    """Learning rate in force during a given 0-indexed epoch."""
    steps = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr * cfg.decay ** steps


class Classifier(nn.Module):
    """Backbone plus one affine classification head."""

    def __init__(self, backbone: nn.Module, num_classes: int):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(backbone.feature_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x))


def finetune(backbone: nn.Module, shots: ChipDataset, cfg: FinetuneConfig,
             num_classes: int | None = None) -> Classifier:
    """Train a classifier on the k-shot subset with the stated schedule."""
    if len(shots) == 0:
        raise ValidationError("empty fine-tuning subset")
    n_classes = num_classes or shots.num_classes
    torch.manual_seed(cfg.seed)
    clf = Classifier(backbone, n_classes)
    head_only = cfg.mode == "head"
    if head_only:
        for p in clf.backbone.parameters():
            p.requires_grad_(False)
        clf.backbone.eval()
        params = clf.head.parameters()
    else:
        clf.backbone.train()
        params = clf.parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    batch = cfg.batch_size or min(32, len(shots))
    ce = nn.CrossEntropyLoss()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(shots))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            x = shots.images[torch.from_numpy(idx)].clone()
            y = shots.labels[torch.from_numpy(idx)]
            if cfg.augment:
                for i in range(x.shape[0]):
                    x[i] = augment_basic(x[i], rng)
            logits = clf(x)
            loss = ce(logits, y)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    clf.eval()
    return clf


@torch.no_grad()
def predict(clf: nn.Module, images: Tensor, batch: int = 128) -> Tensor:
    clf.eval()
    outs = []
    for start in range(0, images.shape[0], batch):
        outs.append(clf(images[start:start + batch]).argmax(dim=1))
    return torch.cat(outs)


def confusion_matrix(y_true: Tensor, y_pred: Tensor, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(y_true.tolist(), y_pred.tolist()):
        cm[t, p] += 1
    return cm


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy, balanced accuracy, and macro precision/recall/F1 in percent.

    Macro terms average over classes that actually occur in the test set;
    absent classes are excluded with a warning. A class that is never
    predicted contributes precision 0 (and F1 accordingly).
    """
    total = cm.sum()
    if total == 0:
        raise ValidationError("empty confusion matrix")
    present = np.nonzero(cm.sum(axis=1) > 0)[0]
    if len(present) < cm.shape[0]:
        warnings.warn(
            f"{cm.shape[0] - len(present)} class(es) absent from the test set; "
            "macro metrics cover present classes only"
        )
    precisions, recalls, f1s = [], [], []
    for c in present:
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        prec = tp / (tp + fp) if tp + fp > 0 else 0.0
        rec = tp / (tp + fn)
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return {
        "accuracy": float(100.0 * np.trace(cm) / total),
        "balanced_accuracy": 100.0 * float(np.mean(recalls)),
        "macro_precision": 100.0 * float(np.mean(precisions)),
        "macro_recall": 100.0 * float(np.mean(recalls)),
        "macro_f1": 100.0 * float(np.mean(f1s)),
        "n_test": int(total),
    }


def evaluate_metrics(clf: nn.Module, test_ds: ChipDataset,
                     num_classes: int | None = None) -> dict:
    if len(test_ds) == 0:
        raise ValidationError("empty test set")
    n_classes = num_classes or getattr(clf, "num_classes", test_ds.num_classes)
    preds = predict(clf, test_ds.images)
    cm = confusion_matrix(test_ds.labels, preds, n_classes)
    return metrics_from_confusion(cm)


def mean_metrics(records: list[dict]) -> dict:
    """Arithmetic mean per numeric metric across seeds."""
    if not records:
        raise ValidationError("no metric records to average")
    keys = [k for k, v in records[0].items() if isinstance(v, (int, float))]
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def run_multi_seed(run_one, seeds: list[int]) -> tuple[dict, list[dict]]:
    """Evaluate ``run_one(seed) -> metrics`` per seed and average the results."""
    records = [run_one(s) for s in seeds]
    return mean_metrics(records), records


def save_metrics_record(out_dir: str | Path, method: str, k: int, seed,
                        record: dict, cfg_hash: str | None = None) -> Path:
    """One structured record per (method, k, seed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"method": method, "k": k, "seed": seed, **record}
    if cfg_hash:
        payload["config_hash"] = cfg_hash
    path = out_dir / f"metrics_{method}_k{k}_seed{seed}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
