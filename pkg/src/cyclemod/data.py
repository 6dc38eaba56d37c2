"""Dataset layout, deterministic loading and augmentation, synthetic toy domains.

A dataset root holds four folders: trainA, trainB, testA, testB. Files are
always enumerated in sorted order; train-time shuffling is a pure function
of (seed, domain, epoch) so an interrupted run resumed from a checkpoint
sees exactly the samples an uninterrupted run would have seen.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DataConfig

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "test")
DOMAINS = ("a", "b")


def split_dir(root: str | Path, split: str, domain: str) -> Path:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if domain.lower() not in DOMAINS:
        raise ValueError(f"domain must be 'a' or 'b', got {domain!r}")
    return Path(root) / f"{split}{domain.upper()}"


def list_images(root: str | Path, split: str, domain: str) -> list[Path]:
    """Sorted image paths for one split/domain; empty or missing dirs are errors."""
    directory = split_dir(root, split, domain)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset folder missing: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise FileNotFoundError(f"no images under {directory}")
    return paths


def parse_resize_spec(spec: str):
    """'' -> None, 'smaller:N' -> ('smaller', N), 'WxH' -> ('exact', (W, H))."""
    from .config import ConfigError

    if not spec:
        return None
    if spec.startswith("smaller:"):
        try:
            target = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad resize spec {spec!r}") from None
        if target < 1:
            raise ConfigError(f"bad resize spec {spec!r}")
        return ("smaller", target)
    if "x" in spec:
        parts = spec.split("x")
        if len(parts) == 2:
            try:
                w, h = int(parts[0]), int(parts[1])
            except ValueError:
                raise ConfigError(f"bad resize spec {spec!r}") from None
            if w >= 1 and h >= 1:
                return ("exact", (w, h))
    raise ConfigError(f"bad resize spec {spec!r}; use '', 'smaller:N' or 'WxH'")


def resize_smaller_side(img: Image.Image, target: int, resample=Image.BICUBIC) -> Image.Image:
    """Scale so the shorter side equals target; the longer side floors."""
    w, h = img.size
    if min(w, h) == target:
        return img
    if w <= h:
        return img.resize((target, int(target * h / w)), resample)
    return img.resize((int(target * w / h), target), resample)


def apply_resize(img: Image.Image, spec: str) -> Image.Image:
    parsed = parse_resize_spec(spec)
    if parsed is None:
        return img
    if parsed[0] == "smaller":
        return resize_smaller_side(img, parsed[1])
    return img.resize(parsed[1], Image.BICUBIC)


def to_tensor(img: Image.Image) -> torch.Tensor:
    """uint8 RGB image to a float tensor [C, H, W] in [-1, 1]."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0


def tensor_to_image(t: torch.Tensor) -> Image.Image:
    """Float tensor [C, H, W] in [-1, 1] back to a uint8 RGB image."""
    arr = ((t.detach().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(arr.permute(1, 2, 0).cpu().numpy())


def augment_image(img: Image.Image, cfg: DataConfig, train: bool) -> Image.Image:
    """Resize, crop and maybe flip one image; randomness comes from the torch RNG."""
    img = apply_resize(img, cfg.resize)
    if cfg.crop_size > 0:
        w, h = img.size
        c = cfg.crop_size
        if w < c or h < c:
            raise ValueError(f"image {w}x{h} smaller than crop {c}")
        if train:
            left = int(torch.randint(0, w - c + 1, ()).item())
            top = int(torch.randint(0, h - c + 1, ()).item())
        else:
            left, top = (w - c) // 2, (h - c) // 2
        img = img.crop((left, top, left + c, top + c))
    if train and cfg.hflip and torch.rand(()).item() < 0.5:
        img = img.transpose(Image.FLIP_LEFT_RIGHT)
    return img


def load_batch(
    cfg: DataConfig,
    root: str | Path,
    split: str,
    domain: str,
    indices: list[int] | None = None,
) -> torch.Tensor:
    """Stack of [-1, 1] tensors for the given indices (all images when None).

    The train split applies random crop/flip augmentation drawn from the
    torch global generator; the test split is deterministic: sorted file
    order, center crops, no flips.
    """
    paths = list_images(root, split, domain)
    if indices is None:
        indices = list(range(len(paths)))
    train = split == "train"
    images = []
    for idx in indices:
        with Image.open(paths[idx % len(paths)]) as img:
            images.append(to_tensor(augment_image(img.convert("RGB"), cfg, train)))
    return torch.stack(images)


def epoch_order(seed: int, domain: str, epoch: int, count: int) -> np.ndarray:
    """Shuffled index order for one epoch, independent per domain."""
    domain_id = DOMAINS.index(domain.lower())
    rng = np.random.default_rng([seed, domain_id, epoch])
    return rng.permutation(count)


class DomainLoader:
    """Deterministic epoch-shuffled batches for one train-split domain."""

    def __init__(self, cfg: DataConfig, root: str | Path, domain: str, seed: int):
        self.cfg = cfg
        self.root = root
        self.domain = domain
        self.seed = seed
        self.paths = list_images(root, "train", domain)
        self._orders: dict[int, np.ndarray] = {}

    def _order(self, epoch: int) -> np.ndarray:
        if epoch not in self._orders:
            self._orders.clear()  # keep only the active epoch
            self._orders[epoch] = epoch_order(self.seed, self.domain, epoch, len(self.paths))
        return self._orders[epoch]

    def batch(self, iteration: int, batch_size: int) -> torch.Tensor:
        n = len(self.paths)
        indices = []
        for k in range(batch_size):
            position = iteration * batch_size + k
            order = self._order(position // n)
            indices.append(int(order[position % n]))
        return load_batch(self.cfg, self.root, "train", self.domain, indices)


@dataclass
class ToyDomainSpec:
    """Two synthetic shape domains differing by a red/green channel swap."""

    image_size: int = 32
    train_count: int = 200
    test_count: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError("toy image_size must be at least 8")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("toy split counts must be at least 1")


def _toy_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Grayscale scene in [0, 1]: dark background with random bright shapes."""
    g = np.full((size, size), 0.1, dtype=np.float64)
    ys, xs = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 5))):
        value = rng.uniform(0.5, 1.0)
        if rng.random() < 0.5:
            cx, cy = rng.uniform(0, size, 2)
            radius = rng.uniform(size * 0.1, size * 0.3)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 < radius**2
        else:
            x0, y0 = rng.integers(0, size, 2)
            w, h = rng.integers(size // 8, size // 2, 2)
            mask = np.zeros((size, size), dtype=bool)
            mask[y0 : y0 + h, x0 : x0 + w] = True
        g[mask] = value
    return g


def _toy_image(rng: np.random.Generator, size: int, domain: str) -> np.ndarray:
    g = _toy_scene(rng, size)
    strong = 0.5 + 0.5 * g
    weak = 0.25 * g
    if domain == "a":
        channels = [strong, weak, weak]
    else:
        channels = [weak, strong, weak]
    rgb = np.stack(channels, axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def make_toy_dataset(root: str | Path, spec: ToyDomainSpec | None = None) -> Path:
    """Write the toy dataset folders; byte-deterministic for a given spec.

    Domain A images are red-dominant, domain B is the same kind of scene
    with red and green swapped, so translation must shift channel balance
    while preserving shape structure.
    """
    spec = spec or ToyDomainSpec()
    spec.validate()
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    for split, count in (("train", spec.train_count), ("test", spec.test_count)):
        for domain in DOMAINS:
            directory = split_dir(root, split, domain)
            os.makedirs(directory, exist_ok=True)
            for i in range(count):
                arr = _toy_image(rng, spec.image_size, domain)
                Image.fromarray(arr).save(directory / f"{i:04d}.png")
    return root
