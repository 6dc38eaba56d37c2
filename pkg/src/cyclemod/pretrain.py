"""Self-supervised inpainting pretraining for the translation generator.

The image is cut into a grid of square patches; each patch is blanked
independently with a fixed probability and the generator reconstructs the
whole image under a mean absolute error loss. AdamW drives the updates
under a cosine schedule with warm restarts.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .checkpoint import tensor_to_array, write_archive
from .config import ExperimentConfig, PretrainConfig, config_hash, format_config, generator_hash
from .data import augment_image, list_images, to_tensor
from .generator import TranslationGenerator
from .trainer import deterministic_mode


def mask_patches(
    images: torch.Tensor,
    patch_size: int,
    prob: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Blank square patches independently with probability ``prob``.

    Returns the masked images and the boolean decision grid
    [N, H/patch, W/patch] (True marks a blanked patch). Image sides must be
    divisible by the patch size.
    """
    if images.ndim != 4:
        raise ValueError(f"expected images [N, C, H, W], got {tuple(images.shape)}")
    n, _, h, w = images.shape
    if patch_size < 1 or h % patch_size != 0 or w % patch_size != 0:
        raise ValueError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    grid = torch.rand(n, h // patch_size, w // patch_size, generator=generator) < prob
    pixel_mask = grid.repeat_interleave(patch_size, dim=1).repeat_interleave(patch_size, dim=2)
    masked = images * (~pixel_mask).unsqueeze(1).to(images.dtype)
    return masked, grid


def cosine_restart_lr(step: int, total_steps: int, cycles: int, base_lr: float) -> float:
    """Cosine decay restarting from ``base_lr`` at the top of each cycle."""
    if total_steps < 1 or cycles < 1:
        raise ValueError("total_steps and cycles must be at least 1")
    if step < 0:
        raise ValueError("step cannot be negative")
    position = (step * cycles / total_steps) % 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * position))


def augment_batch(
    images: torch.Tensor, cfg: PretrainConfig, generator: torch.Generator
) -> torch.Tensor:
    """Rotation, flip and color jitter with parameters drawn from ``generator``."""

    def uniform(lo: float, hi: float) -> float:
        return lo + (hi - lo) * torch.rand((), generator=generator).item()

    out = []
    for img in images:
        x = (img + 1.0) / 2.0
        if cfg.rotate_degrees > 0:
            angle = uniform(-cfg.rotate_degrees, cfg.rotate_degrees)
            x = TF.rotate(x, angle, interpolation=InterpolationMode.BILINEAR)
        if cfg.hflip_prob > 0 and uniform(0.0, 1.0) < cfg.hflip_prob:
            x = TF.hflip(x)
        if cfg.jitter > 0:
            j = cfg.jitter
            x = TF.adjust_brightness(x, uniform(1.0 - j, 1.0 + j))
            x = TF.adjust_contrast(x, uniform(1.0 - j, 1.0 + j))
            x = TF.adjust_saturation(x, uniform(1.0 - j, 1.0 + j))
            x = TF.adjust_hue(x, uniform(-j, j))
        out.append(x.clamp(0.0, 1.0) * 2.0 - 1.0)
    return torch.stack(out)


def pretrain_step(
    gen: TranslationGenerator,
    opt: torch.optim.Optimizer,
    batch: torch.Tensor,
    cfg: PretrainConfig,
    generator: torch.Generator | None = None,
) -> float:
    """Mask, reconstruct, and take one AdamW step; returns the loss value."""
    masked, _ = mask_patches(batch, cfg.patch_size, cfg.mask_prob, generator)
    recon = gen(masked)
    loss = (recon - batch).abs().mean()
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.item())


def save_generator_checkpoint(
    gen: TranslationGenerator, cfg: ExperimentConfig, path: str | Path, iteration: int
) -> Path:
    arrays = {f"gen/{name}": tensor_to_array(t) for name, t in gen.state_dict().items()}
    meta = {
        "kind": "generator",
        "iteration": iteration,
        "config_text": format_config(cfg),
        "config_hash": config_hash(cfg),
        "generator_hash": generator_hash(cfg),
    }
    return write_archive(path, meta, arrays)


def run_pretraining(
    cfg: ExperimentConfig, data_root: str | Path, out_dir: str | Path
) -> dict[str, Path]:
    """Pretrain one generator on both training domains combined.

    Writes metrics.jsonl and pretrained.ckpt; the checkpoint initializes
    both translation generators.
    """
    cfg.validate()
    pre = cfg.pretrain
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zero_seconds = deterministic_mode()

    torch.manual_seed(pre.seed)
    gen = TranslationGenerator(cfg.generator)
    opt = torch.optim.AdamW(
        gen.parameters(), lr=pre.resolved_lr(), weight_decay=pre.weight_decay
    )
    draw = torch.Generator().manual_seed(pre.seed)

    paths = list_images(data_root, "train", "a") + list_images(data_root, "train", "b")
    n = len(paths)
    per_epoch = n if pre.samples_per_epoch == 0 else min(n, pre.samples_per_epoch)
    steps_per_epoch = math.ceil(per_epoch / pre.batch_size)
    total_steps = pre.epochs * steps_per_epoch
    base_lr = pre.resolved_lr()

    (out / "config.cfg").write_text(format_config(cfg))
    metrics_path = out / "metrics.jsonl"
    checkpoint_path = out / "pretrained.ckpt"
    step = 0
    with open(metrics_path, "w") as mf:
        for epoch in range(pre.epochs):
            order = np.random.default_rng([pre.seed, 2, epoch]).permutation(n)[:per_epoch]
            for start in range(0, per_epoch, pre.batch_size):
                chunk = order[start : start + pre.batch_size]
                t0 = time.perf_counter()
                images = []
                for idx in chunk:
                    with Image.open(paths[int(idx)]) as img:
                        images.append(to_tensor(augment_image(img.convert("RGB"), cfg.data, True)))
                batch = augment_batch(torch.stack(images), pre, draw)
                lr = cosine_restart_lr(step, total_steps, pre.lr_cycles, base_lr)
                for group in opt.param_groups:
                    group["lr"] = lr
                loss = pretrain_step(gen, opt, batch, pre, draw)
                metrics = {
                    "iter": step,
                    "epoch": epoch,
                    "loss_recon": loss,
                    "lr": lr,
                    "seconds": 0.0 if zero_seconds else round(time.perf_counter() - t0, 6),
                }
                if not math.isfinite(loss):
                    raise RuntimeError(f"non-finite pretraining loss at step {step}")
                mf.write(json.dumps(metrics) + "\n")
                step += 1
    save_generator_checkpoint(gen, cfg, checkpoint_path, step)
    return {"checkpoint": checkpoint_path, "metrics": metrics_path}
