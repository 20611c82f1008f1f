"""Dataset discovery, stratified splitting, image loading and batching.

A dataset root holds one sub-directory per class::

    root/
      airplane/ img001.png img002.jpg ...
      beach/    ...

Class ids are assigned in lexicographic order of the directory names.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .backbone import ConfigError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp", ".ppm"}


class DatasetError(ValueError):
    pass


class ManifestItem(NamedTuple):
    path: str
    class_name: str
    class_id: int


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.class_id for it in self.items], dtype=np.int64)

    @property
    def paths(self) -> list[str]:
        return [it.path for it in self.items]

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.items[i] for i in indices], list(self.class_names))

    def write(self, path: str | Path) -> None:
        """Manifest cache: a ``# classes`` header line, then ``path<TAB>class_id`` per item."""
        lines = ["# classes\t" + "\t".join(self.class_names)]
        lines += [f"{it.path}\t{it.class_id}" for it in self.items]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# classes"):
            raise DatasetError(f"{path}: missing class header")
        names = lines[0].split("\t")[1:]
        items = []
        for line in lines[1:]:
            if line.strip():
                p, cid = line.rsplit("\t", 1)
                items.append(ManifestItem(p, names[int(cid)], int(cid)))
        return cls(items, names)


@dataclass
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def scan_dataset(root: str | Path) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class directories under {root}")
    items = []
    names = []
    for d in class_dirs:
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            logger.warning("class folder %s has no images; skipping", d)
            continue
        cid = len(names)
        names.append(d.name)
        items.extend(ManifestItem(str(f), d.name, cid) for f in files)
    if not names:
        raise DatasetError(f"no images found under {root}")
    return DatasetManifest(items, names)


def split(manifest: DatasetManifest, spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Per-class seeded shuffle; the first ceil(fraction * n_c) items of each class train."""
    rng = np.random.default_rng(spec.seed)
    labels = manifest.labels
    train_idx, test_idx = [], []
    for cid in range(len(manifest.class_names)):
        idx = np.flatnonzero(labels == cid)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DatasetError(
                f"class {manifest.class_names[cid]!r} has {idx.size} item; at least 2 are needed to split"
            )
        idx = idx[rng.permutation(idx.size)]
        n_train = min(math.ceil(round(spec.train_fraction * idx.size, 9)), idx.size - 1)
        train_idx.extend(sorted(idx[:n_train].tolist()))
        test_idx.extend(sorted(idx[n_train:].tolist()))
    return manifest.subset(sorted(train_idx)), manifest.subset(sorted(test_idx))


def preprocess(path: str | Path, image_size: int = 224) -> torch.Tensor | None:
    """Decode, coerce to RGB, bilinear-resize and scale to [0, 1] as [3, S, S] float32.

    Returns None (with a warning) when the file cannot be decoded.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        logger.warning("skipping undecodable image %s: %s", path, exc)
        return None
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def normalize(images: torch.Tensor, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> torch.Tensor:
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return (images - m) / s


class ImageStore:
    """Decodes every manifest image once and keeps them as a [n, 3, S, S] tensor.

    Undecodable files are dropped from ``manifest``.
    """

    def __init__(self, manifest: DatasetManifest, image_size: int):
        keep, tensors = [], []
        for i, item in enumerate(manifest.items):
            t = preprocess(item.path, image_size)
            if t is not None:
                keep.append(i)
                tensors.append(t)
        self.manifest = manifest.subset(keep)
        self.image_size = image_size
        if tensors:
            self.images = torch.stack(tensors)
        else:
            self.images = torch.zeros(0, 3, image_size, image_size)
        self.labels = torch.as_tensor(self.manifest.labels)

    def __len__(self) -> int:
        return len(self.manifest)


def epoch_order(n: int, shuffle_seed: int | None, epoch: int) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def batches(store: ImageStore, batch_size: int, shuffle_seed: int | None = None,
            epoch: int = 0) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)`` in an epoch-seeded order; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = torch.as_tensor(epoch_order(len(store), shuffle_seed, epoch))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield store.images[idx], store.labels[idx]


def _class_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        fx, fy = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.35 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return img


def make_synthetic(root: str | Path, num_classes: int = 4, per_class: int = 50,
                   image_size: int = 32, seed: int = 0, noise: float = 0.08) -> DatasetManifest:
    """Write a class-separable PNG dataset (one sinusoidal base pattern per class plus noise)."""
    if min(num_classes, per_class, image_size) <= 0:
        raise ConfigError("synthetic dataset sizes must be positive")
    root = Path(root)
    rng = np.random.default_rng(seed)
    width = len(str(num_classes - 1))
    for c in range(num_classes):
        base = _class_pattern(rng, image_size)
        d = root / f"class_{c:0{width}d}"
        d.mkdir(parents=True, exist_ok=True)
        for k in range(per_class):
            img = base + rng.normal(0.0, noise, size=base.shape)
            img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(d / f"img_{k:04d}.png", optimize=False)
    return scan_dataset(root)
