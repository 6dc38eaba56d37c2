"""Patch discriminator with a cross-sample statistics head fed from feature caches.

The body is four stride-2 convolutions producing a score map 16x smaller
than the input. At batch size 1 the head would otherwise see a single
sample, so recent feature maps from previous iterations are cached per
stream (real/fake x domain A/B) and concatenated with the current batch
before the batch statistic is computed. Cached entries are detached: they
shape the statistics but receive no gradient.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .config import DiscriminatorConfig
from .spectral import SpectralConv2d


class FeatureCache:
    """Fixed-capacity FIFO of detached feature maps [C, H, W]."""

    def __init__(self, capacity: int = 3):
        if capacity < 0:
            raise ValueError("capacity cannot be negative")
        self.capacity = capacity
        self.entries: list[torch.Tensor] = []

    def push(self, features: torch.Tensor) -> None:
        if features.ndim != 3:
            raise ValueError(f"expected a single feature map [C, H, W], got {tuple(features.shape)}")
        if self.entries and features.shape != self.entries[0].shape:
            raise ValueError(
                f"feature shape {tuple(features.shape)} does not match cached {tuple(self.entries[0].shape)}"
            )
        self.entries.append(features.detach().clone())
        if len(self.entries) > self.capacity:
            del self.entries[: len(self.entries) - self.capacity]

    def push_batch(self, batch: torch.Tensor) -> None:
        if batch.ndim != 4:
            raise ValueError(f"expected a feature batch [N, C, H, W], got {tuple(batch.shape)}")
        for row in batch:
            self.push(row)

    def stacked(self) -> torch.Tensor | None:
        if not self.entries:
            return None
        return torch.stack(self.entries)

    def clear(self) -> None:
        self.entries = []

    def __len__(self) -> int:
        return len(self.entries)


class CacheBank:
    """Four caches keyed by stream: real/fake features from each domain."""

    KEYS = ("real_a", "real_b", "fake_a", "fake_b")

    def __init__(self, capacity: int = 3):
        self.caches = {key: FeatureCache(capacity) for key in self.KEYS}

    def __getitem__(self, key: str) -> FeatureCache:
        if key not in self.caches:
            raise ValueError(f"unknown cache stream {key!r}; expected one of {self.KEYS}")
        return self.caches[key]

    def clear(self) -> None:
        for cache in self.caches.values():
            cache.clear()


def batch_stddev(features: torch.Tensor) -> torch.Tensor:
    """Append one constant channel holding the mean cross-batch deviation.

    The population standard deviation is taken per (channel, y, x) position
    across the batch, averaged into a single number, and broadcast as an
    extra channel on every sample. Needs at least two samples.
    """
    if features.ndim != 4:
        raise ValueError(f"expected features [N, C, H, W], got {tuple(features.shape)}")
    n, _, h, w = features.shape
    if n < 2:
        raise ValueError("batch standard deviation needs at least two samples")
    std = features.var(dim=0, correction=0).sqrt()
    stat = std.mean()
    channel = stat.expand(n, 1, h, w)
    return torch.cat([features, channel], dim=1)


def assemble_rows(features: torch.Tensor, cache: FeatureCache) -> torch.Tensor:
    """Current batch followed by all cached entries, oldest first."""
    cached = cache.stacked()
    if cached is None:
        return features
    return torch.cat([features, cached], dim=0)


class BatchHead(nn.Module):
    """Scores features through a batch statistic and two 1x1 convolutions.

    With 'bsd' the statistic is the appended stddev channel (all zeros when
    only one sample is visible); with 'bn' it is batch normalization without
    running statistics, which falls back to per-sample normalization on a
    single sample. Only scores for the current batch rows are returned.
    """

    def __init__(self, channels: int, stat_kind: str, spectral: bool = True):
        super().__init__()
        if stat_kind not in ("bsd", "bn"):
            raise ValueError(f"unknown stat kind {stat_kind!r}")
        self.stat_kind = stat_kind
        in_channels = channels + 1 if stat_kind == "bsd" else channels
        if stat_kind == "bn":
            self.norm = nn.BatchNorm2d(channels, track_running_stats=False)
        self.conv1 = SpectralConv2d(in_channels, channels, 1, enabled=spectral)
        self.act = nn.LeakyReLU(0.2)
        self.conv2 = SpectralConv2d(channels, 1, 1, enabled=spectral)

    def forward(self, features: torch.Tensor, cache: FeatureCache) -> torch.Tensor:
        rows = assemble_rows(features, cache)
        if self.stat_kind == "bsd":
            if rows.shape[0] >= 2:
                rows = batch_stddev(rows)
            else:
                n, _, h, w = rows.shape
                rows = torch.cat([rows, rows.new_zeros(n, 1, h, w)], dim=1)
        else:
            rows = self.norm(rows)
        scores = self.conv2(self.act(self.conv1(rows)))
        return scores[: features.shape[0]]


class Discriminator(nn.Module):
    """Four stride-2 convolutions scoring 16x-downsampled patches.

    With the batch head enabled, forward needs a cache bank and a stream
    selector; scoring happens against current plus cached features, and the
    current features are appended to the cache afterwards when
    ``update_cache`` is set. Without it, a plain 1x1 convolution scores
    each sample independently and caches are ignored.
    """

    def __init__(self, cfg: DiscriminatorConfig, in_channels: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f1, f2, f3, f4 = cfg.features
        sn = cfg.spectral_norm
        self.body = nn.Sequential(
            SpectralConv2d(in_channels, f1, 4, stride=2, padding=1, enabled=sn),
            nn.LeakyReLU(0.2),
            SpectralConv2d(f1, f2, 4, stride=2, padding=1, enabled=sn),
            nn.LeakyReLU(0.2),
            SpectralConv2d(f2, f3, 4, stride=2, padding=1, enabled=sn),
            nn.LeakyReLU(0.2),
            SpectralConv2d(f3, f4, 4, stride=2, padding=1, enabled=sn),
            nn.LeakyReLU(0.2),
        )
        if cfg.batch_head:
            self.head = BatchHead(f4, cfg.stat_kind, spectral=sn)
        else:
            self.final = SpectralConv2d(f4, 1, 1, enabled=sn)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        return self.body(image)

    def forward(
        self,
        image: torch.Tensor,
        bank: CacheBank | None = None,
        which: str | None = None,
        update_cache: bool = False,
    ) -> torch.Tensor:
        feats = self.body(image)
        if not self.cfg.batch_head:
            return self.final(feats)
        if bank is None or which is None:
            raise ValueError("batch-head scoring needs a cache bank and a stream selector")
        cache = bank[which]
        scores = self.head(feats, cache)
        if update_cache:
            cache.push_batch(feats)
        return scores

    def cache_features(self, image: torch.Tensor, bank: CacheBank, which: str) -> None:
        """Push this image's body features without scoring."""
        with torch.no_grad():
            bank[which].push_batch(self.body(image))
