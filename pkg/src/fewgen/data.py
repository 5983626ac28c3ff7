"""Chip datasets: folder ingestion, rotated-box crops, toy data, augmentation.

All images are single-channel squares normalized to [-1, 1]. Raw pixel
domains (uint8 files, [0, 1] scene intensities) are converted at the edges
by normalize()/denormalize() so zero-padding in the raw domain lands at -1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from fewgen.errors import DimensionError, ValidationError

RASTER_EXTS = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def normalize(x01: Tensor | np.ndarray) -> Tensor:
    """Map raw [0, 1] intensities to the [-1, 1] working range."""
    t = torch.as_tensor(x01, dtype=torch.float32)
    return t * 2.0 - 1.0


def denormalize(x: Tensor) -> Tensor:
    """Inverse of normalize(); output clamped to [0, 1]."""
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def to_uint8(x: Tensor) -> np.ndarray:
    return (denormalize(x) * 255.0).round().to(torch.uint8).numpy()


def from_uint8(a: np.ndarray) -> Tensor:
    # PIL hands out read-only buffers; copy before wrapping
    return normalize(torch.from_numpy(np.array(a, copy=True)).float() / 255.0)


@dataclass
class RotatedBox:
    """Oriented rectangle: center (cx, cy) in pixels, size (w, h), theta radians."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float
    class_id: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self) -> np.ndarray:
        """The four (x, y) corners after rotation, shape (4, 2)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        half = np.array([[-self.w, -self.h], [self.w, -self.h],
                         [self.w, self.h], [-self.w, self.h]]) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.cx, self.cy])


@dataclass
class ChipDataset:
    """Stack of normalized image chips with integer labels.

    images: (n, 1, s, s) float tensor in [-1, 1]; labels: (n,) long;
    sources: per-chip origin strings; split: train|test tag for the lot.
    """

    images: Tensor
    labels: Tensor
    sources: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 1:
            raise DimensionError(f"expected (n, 1, s, s) images, got {tuple(self.images.shape)}")
        if self.images.shape[-1] != self.images.shape[-2]:
            raise DimensionError("chips must be square")
        if self.labels.shape[0] != self.images.shape[0]:
            raise DimensionError("labels/images length mismatch")
        if self.images.numel() and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValidationError("chip values must lie in [-1, 1]")
        if not self.sources:
            self.sources = [f"chip-{i}" for i in range(len(self))]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1 if len(self) else 0

    def indices_for_class(self, label: int) -> Tensor:
        return torch.nonzero(self.labels == label, as_tuple=False).reshape(-1)

    def subset(self, idx) -> "ChipDataset":
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        return ChipDataset(
            images=self.images[idx_t].clone(),
            labels=self.labels[idx_t].clone(),
            sources=[self.sources[int(i)] for i in idx_t],
            split=self.split,
        )


def load_chip_dataset(root: str | Path, image_size: int, split: str = "train") -> ChipDataset:
    """Load a class-per-folder chip directory.

    Class folders and files are visited in sorted order so labels and chip
    ordering are stable across loads. Unreadable files are skipped with a
    warning; a class folder with no readable chips is an error.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise ValidationError(f"no class folders under {root}")
    images, labels, sources = [], [], []
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in RASTER_EXTS:
                continue
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("L"))
            except Exception as exc:  # unreadable raster: skip, keep loading
                warnings.warn(f"skipping unreadable chip {f}: {exc}")
                continue
            t = from_uint8(arr).unsqueeze(0)
            if t.shape[-1] != t.shape[-2]:
                side = min(t.shape[-1], t.shape[-2])
                r0 = (t.shape[-2] - side) // 2
                c0 = (t.shape[-1] - side) // 2
                t = t[:, r0:r0 + side, c0:c0 + side]
            if t.shape[-1] != image_size:
                t = torch.nn.functional.interpolate(
                    t.unsqueeze(0), size=(image_size, image_size),
                    mode="bilinear", align_corners=False,
                ).squeeze(0).clamp(-1.0, 1.0)
            images.append(t)
            labels.append(label)
            sources.append(str(f.relative_to(root)))
            count += 1
        if count == 0:
            raise ValidationError(f"class folder {cdir} has no readable chips")
    return ChipDataset(torch.stack(images), torch.tensor(labels, dtype=torch.long),
                       sources, split)


def load_flat_images(root: str | Path, image_size: int | None = None) -> Tensor:
    """Load an unlabeled directory of rasters as a (n, 1, s, s) batch.

    Sorted file order; used for synthetic corpora, which carry no labels.
    """
    root = Path(root)
    files = sorted(f for f in root.iterdir()
                   if f.is_file() and f.suffix.lower() in RASTER_EXTS)
    if not files:
        raise ValidationError(f"no raster files under {root}")
    chips = []
    for f in files:
        with Image.open(f) as im:
            t = from_uint8(np.asarray(im.convert("L"))).unsqueeze(0)
        if image_size is not None and t.shape[-1] != image_size:
            t = torch.nn.functional.interpolate(
                t.unsqueeze(0), size=(image_size, image_size),
                mode="bilinear", align_corners=False,
            ).squeeze(0).clamp(-1.0, 1.0)
        chips.append(t)
    return torch.stack(chips)


def save_chip_dataset(ds: ChipDataset, root: str | Path):
    """Write class-per-folder uint8 rasters readable by load_chip_dataset."""
    root = Path(root)
    width = len(str(max(len(ds) - 1, 0)))
    for i in range(len(ds)):
        label = int(ds.labels[i])
        cdir = root / f"class_{label:02d}"
        cdir.mkdir(parents=True, exist_ok=True)
        arr = to_uint8(ds.images[i, 0])
        Image.fromarray(arr, mode="L").save(cdir / f"chip_{i:0{width}d}.png")


def min_square_side(box: RotatedBox) -> int:
    """Side of the smallest pixel square covering the rotated box."""
    c, s = abs(math.cos(box.theta)), abs(math.sin(box.theta))
    extent = max(box.w * c + box.h * s, box.w * s + box.h * c)
    return int(math.ceil(extent - 1e-9))


def crop_min_square(scene: Tensor | np.ndarray, box: RotatedBox) -> Tensor:
    """Cut the minimum enclosing square around a rotated box out of a scene.

    The scene is raw [0, 1] intensity (H, W); the crop window is the side
    from min_square_side() centered at (cx, cy), zero-padded where it hangs
    off the scene, then normalized so padding maps to -1. Returns (1, s, s).
    A box that misses the scene entirely is an error.
    """
    scene_t = torch.as_tensor(scene, dtype=torch.float32)
    if scene_t.dim() == 3 and scene_t.shape[0] == 1:
        scene_t = scene_t[0]
    if scene_t.dim() != 2:
        raise DimensionError(f"expected (H, W) scene, got {tuple(scene_t.shape)}")
    h, w = scene_t.shape
    if box.cx < 0 or box.cy < 0 or box.cx >= w or box.cy >= h:
        raise ValidationError("box center outside the scene")
    side = min_square_side(box)
    r0 = int(round(box.cy - side / 2.0))
    c0 = int(round(box.cx - side / 2.0))
    out = torch.zeros(side, side)
    rs, re = max(r0, 0), min(r0 + side, h)
    cs, ce = max(c0, 0), min(c0 + side, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = scene_t[rs:re, cs:ce]
    return normalize(out).unsqueeze(0)


def load_rotated_boxes(path: str | Path) -> list[tuple[str, RotatedBox]]:
    """Parse an annotation file of rotated boxes.

    One record per line: ``scene_file cx cy w h theta_rad class_id``; blank
    lines and ``#`` comments ignored.
    """
    records = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValidationError(f"{path}:{ln}: expected 7 fields, got {len(parts)}")
        scene = parts[0]
        cx, cy, bw, bh, theta = (float(v) for v in parts[1:6])
        records.append((scene, RotatedBox(cx, cy, bw, bh, theta, int(parts[6]))))
    return records


# ---------------------------------------------------------------------------
# Procedural toy data. Ten bright target silhouettes over a dim floor, with
# per-class canonical orientation plus bounded jitter (full random rotation
# would fold several classes into each other), multiplied by exponential
# speckle and log-compressed, which is what coherent imagery looks like.

_TOY_SHAPES = ("bar", "ellipse", "cross", "chevron", "ring",
               "tee", "ell", "diamond", "blobs", "wedge")


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership mask for one silhouette on centered unit coords u, v."""
    if kind == "bar":
        return (np.abs(u) < 0.42) & (np.abs(v) < 0.10)
    if kind == "ellipse":
        return (u / 0.38) ** 2 + (v / 0.20) ** 2 < 1.0
    if kind == "cross":
        return ((np.abs(u) < 0.40) & (np.abs(v) < 0.09)) | \
               ((np.abs(v) < 0.40) & (np.abs(u) < 0.09))
    if kind == "chevron":
        band = np.abs(v - 0.8 * np.abs(u)) < 0.10
        return band & (np.abs(u) < 0.38) & (v > -0.38)
    if kind == "ring":
        r = np.sqrt(u ** 2 + v ** 2)
        return (r > 0.22) & (r < 0.38)
    if kind == "tee":
        return ((np.abs(v - 0.28) < 0.09) & (np.abs(u) < 0.36)) | \
               ((np.abs(u) < 0.09) & (v < 0.30) & (v > -0.40))
    if kind == "ell":
        return ((np.abs(u + 0.22) < 0.09) & (np.abs(v) < 0.36)) | \
               ((np.abs(v + 0.27) < 0.09) & (u > -0.28) & (u < 0.34))
    if kind == "diamond":
        return (np.abs(u) + np.abs(v)) < 0.36
    if kind == "blobs":
        d1 = (u + 0.22) ** 2 + v ** 2 < 0.030
        d2 = (u - 0.22) ** 2 + v ** 2 < 0.030
        return d1 | d2
    if kind == "wedge":
        return (u > -0.30) & (u < 0.34) & (np.abs(v) < 0.28 * (0.34 - u))
    raise ValidationError(f"unknown toy shape {kind!r}")


def _render_toy_chip(kind: str, angle: float, dx: float, dy: float,
                     scale: float, image_size: int, rng: np.random.Generator,
                     looks: int) -> np.ndarray:
    lin = (np.arange(image_size) + 0.5) / image_size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    u = ((xx - dx) * c + (yy - dy) * s) / scale
    v = (-(xx - dx) * s + (yy - dy) * c) / scale
    mask = _shape_mask(kind, u, v)
    reflect = np.where(mask, 1.0, 0.06)
    # multi-look averaging: mean of `looks` exponential draws, the usual
    # speckle reduction step, keeps the texture but tames its variance
    speckle = rng.exponential(1.0, size=(looks,) + reflect.shape).mean(axis=0)
    raw = reflect * speckle
    compressed = np.log1p(35.0 * raw) / math.log1p(35.0 * 6.0)
    return np.clip(compressed, 0.0, 1.0)


def make_toy_dataset(classes: int, per_class: int, image_size: int = 32,
                     seed: int = 0, split: str = "train",
                     looks: int = 4) -> ChipDataset:
    """Render a deterministic procedural chip dataset.

    Each class is one silhouette at a class-canonical heading with bounded
    jitter (about +/-0.35 rad), random sub-image offset and mild scale
    jitter, under multiplicative speckle (`looks`-look averaged exponential)
    and log compression.
    """
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    if per_class < 1 or image_size < 8:
        raise ValidationError("per_class must be >= 1 and image_size >= 8")
    if looks < 1:
        raise ValidationError(f"looks must be >= 1, got {looks}")
    rng = np.random.default_rng(seed)
    images, labels, sources = [], [], []
    for label in range(classes):
        kind = _TOY_SHAPES[label % len(_TOY_SHAPES)]
        canonical = (label // len(_TOY_SHAPES)) * 0.9 + label * 0.17
        for j in range(per_class):
            angle = canonical + rng.uniform(-0.35, 0.35)
            dx, dy = rng.uniform(-0.18, 0.18, size=2)
            scale = rng.uniform(0.85, 1.15)
            chip = _render_toy_chip(kind, angle, dx, dy, scale, image_size, rng,
                                    looks)
            images.append(normalize(chip).unsqueeze(0))
            labels.append(label)
            sources.append(f"toy/{kind}/{split}/{j}")
    return ChipDataset(torch.stack(images), torch.tensor(labels, dtype=torch.long),
                       sources, split)


def augment_basic(chip: Tensor, rng: np.random.Generator) -> Tensor:
    """Random quarter-turn rotation plus random horizontal flip.

    Quarter turns and flips permute pixels, so the value multiset and the
    label are untouched. Accepts (1, s, s) or a batch (n, 1, s, s).
    """
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    out = torch.rot90(chip, k, dims=(-2, -1))
    if flip:
        out = torch.flip(out, dims=(-1,))
    return out
