"""Datasets and deterministic splits.

Two datasets are registered:

``textures10``
    Procedural 32x32 RGB images in [0, 1]. Each class is a Gabor-like
    grating patch with a class-specific orientation and spatial frequency,
    placed at a random position on a smooth random-colour background, with
    a weak full-field distractor grating and pixel noise. Contrast varies
    widely between images, so (as with natural images) a small fraction of
    samples carry class evidence of the same order as a 10/255 perturbation.
    Generation is deterministic per image index and needs no download.

``cifar10``
    The standard python pickle release, read from ``root`` or the
    ``FEATREGEN_DATA_ROOT`` environment variable.

Both expose a training pool and a validation set. ``heldout_attack`` is a
seeded random subset of the training pool (the images attacks are computed
on); ``train`` is the rest of the pool.
"""

from __future__ import annotations

import math
import os
import pickle
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SPLITS = ("train", "heldout_attack", "val")
DATA_ROOT_ENV = "FEATREGEN_DATA_ROOT"

# ImageNet: 10000 held-out attack images out of 1,281,167 training images.
HELDOUT_FRACTION = 10000 / 1281167
MIN_HELDOUT = 256


@dataclass
class DatasetHandle:
    name: str
    split: str
    image_shape: tuple[int, int, int]
    value_range: tuple[float, float]
    class_count: int
    images: torch.Tensor = field(repr=False)
    labels: torch.Tensor = field(repr=False)
    indices: np.ndarray = field(repr=False)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "DatasetHandle":
        """First ``n`` samples, same split metadata."""
        return DatasetHandle(self.name, self.split, self.image_shape, self.value_range,
                             self.class_count, self.images[:n], self.labels[:n],
                             self.indices[:n], self.seed)

    def describe(self) -> dict:
        return {"name": self.name, "split": self.split, "seed": self.seed, "size": len(self),
                "image_shape": list(self.image_shape), "value_range": list(self.value_range),
                "class_count": self.class_count}


@dataclass(frozen=True)
class TextureSpec:
    pool_size: int = 12000
    val_size: int = 2000
    amplitude: tuple[float, float] = (0.08, 0.2)
    min_color: float = 0.4
    distractor: float = 0.4
    noise: float = 0.03
    content_seed: int = 2020


TEXTURES = TextureSpec()

_YY, _XX = np.mgrid[0:32, 0:32].astype(np.float64)


def _texture_image(rng: np.random.Generator, label: int, spec: TextureSpec) -> np.ndarray:
    low = rng.uniform(0.25, 0.75, (1, 3, 4, 4))
    bg = F.interpolate(torch.from_numpy(low), size=(32, 32), mode="bilinear",
                       align_corners=True)[0].numpy()
    theta = math.pi * (label % 5) / 5
    freq = 0.11 if label < 5 else 0.22
    cx, cy = rng.uniform(8, 24, 2)
    sigma = rng.uniform(5, 9)
    envelope = np.exp(-((_XX - cx) ** 2 + (_YY - cy) ** 2) / (2 * sigma ** 2))
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.cos(2 * math.pi * freq * (math.cos(theta) * _XX + math.sin(theta) * _YY) + phase)
    color = rng.uniform(spec.min_color, 1.0, 3)
    amp = rng.uniform(*spec.amplitude)
    img = bg + amp * color[:, None, None] * (wave * envelope)
    theta2 = rng.uniform(0, math.pi)
    freq2 = rng.choice([0.11, 0.22])
    strength = spec.distractor * amp * rng.uniform(0, 1)
    img = img + strength * np.cos(
        2 * math.pi * freq2 * (math.cos(theta2) * _XX + math.sin(theta2) * _YY) + rng.uniform(0, 2 * math.pi))
    img = img + rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


@lru_cache(maxsize=4)
def _texture_stream(stream: int, n: int, spec: TextureSpec) -> tuple[torch.Tensor, torch.Tensor]:
    images = np.empty((n, 3, 32, 32), np.float32)
    labels = np.empty(n, np.int64)
    for i in range(n):
        rng = np.random.default_rng([spec.content_seed, stream, i])
        labels[i] = rng.integers(0, 10)
        images[i] = _texture_image(rng, int(labels[i]), spec)
    return torch.from_numpy(images), torch.from_numpy(labels)


def _load_textures(spec: TextureSpec = TEXTURES):
    pool = _texture_stream(1, spec.pool_size, spec)
    val = _texture_stream(2, spec.val_size, spec)
    return pool, val, (3, 32, 32), (0.0, 1.0), 10


def _cifar_root(root) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise LookupError(f"cifar10 needs a data root (argument or ${DATA_ROOT_ENV})")
    root = Path(root)
    return root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").is_dir() else root


def _read_cifar(files):
    xs, ys = [], []
    for f in files:
        with open(f, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(d[b"data"], np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d[b"labels"], np.int64))
    x = torch.from_numpy(np.concatenate(xs).astype(np.float32) / 255.0)
    return x, torch.from_numpy(np.concatenate(ys))


@lru_cache(maxsize=1)
def _load_cifar(root):
    base = _cifar_root(root)
    pool = _read_cifar([base / f"data_batch_{i}" for i in range(1, 6)])
    val = _read_cifar([base / "test_batch"])
    return pool, val, (3, 32, 32), (0.0, 1.0), 10


_REGISTRY = {
    "textures10": lambda root: _load_textures(),
    "cifar10": _load_cifar,
}


def registered_datasets() -> list[str]:
    return sorted(_REGISTRY)


def default_heldout_size(pool_size: int) -> int:
    return min(pool_size // 2, max(MIN_HELDOUT, math.ceil(pool_size * HELDOUT_FRACTION)))


def split_indices(pool_size: int, seed: int, heldout_size: int | None = None) -> dict[str, np.ndarray]:
    """Deterministic train / heldout_attack partition of the training pool."""
    heldout_size = default_heldout_size(pool_size) if heldout_size is None else heldout_size
    if not 0 < heldout_size < pool_size:
        raise ValueError(f"heldout size must be in (0, {pool_size}), got {heldout_size}")
    rng = np.random.default_rng(seed)
    heldout = np.sort(rng.choice(pool_size, size=heldout_size, replace=False))
    mask = np.ones(pool_size, bool)
    mask[heldout] = False
    return {"heldout_attack": heldout, "train": np.flatnonzero(mask)}


def load_dataset(name: str, split: str, seed: int = 0, heldout_size: int | None = None,
                 root: str | None = None) -> DatasetHandle:
    if name not in _REGISTRY:
        raise LookupError(f"unknown dataset {name!r}; registered: {registered_datasets()}")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    (px, py), (vx, vy), shape, value_range, classes = _REGISTRY[name](root)
    if split == "val":
        idx = np.arange(len(vy))
        x, y = vx, vy
    else:
        idx = split_indices(len(py), seed, heldout_size)[split]
        t = torch.from_numpy(idx)
        x, y = px[t], py[t]
    return DatasetHandle(name, split, shape, value_range, classes, x, y, idx, seed)
