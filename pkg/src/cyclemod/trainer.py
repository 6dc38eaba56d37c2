"""Alternating adversarial training with weight averaging and exact resume.

Each iteration updates the discriminators on detached fakes (plus the
gradient penalty on reals), refreshes the feature caches once, updates the
generators through the frozen discriminators, and finally folds the live
generator weights into their averaged copies. Sampling order is a pure
function of seed and iteration, and checkpoints restore modules, optimizer
state and the torch RNG, so a resumed run replays an uninterrupted one.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .checkpoint import array_to_tensor, read_archive, tensor_to_array, write_archive
from .config import (
    ConfigMismatchError,
    ExperimentConfig,
    TrainConfig,
    config_hash,
    format_config,
    generator_hash,
    parse_config_text,
)
from .data import DomainLoader
from .discriminator import CacheBank, Discriminator
from .generator import TranslationGenerator
from .losses import (
    GeneratorLossParts,
    consistency_loss,
    cycle_loss,
    gan_loss,
    gradient_penalty,
    identity_loss,
    legacy_gradient_penalty,
    total_generator_loss,
)

ABLATION_TOGGLES = ("no_style_mod", "no_batch_head", "legacy_training")

_MODULE_KEYS = ("gen_ab", "gen_ba", "disc_a", "disc_b", "ema_ab", "ema_ba")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the last metrics snapshot."""

    def __init__(self, message: str, metrics: dict):
        super().__init__(message)
        self.metrics = metrics


def deterministic_mode() -> bool:
    return os.environ.get("CYCLEMOD_DETERMINISTIC", "") not in ("", "0")


def ema_update(avg: torch.Tensor, live: torch.Tensor, momentum: float) -> torch.Tensor:
    """In place: avg <- momentum * avg + (1 - momentum) * live."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if avg.shape != live.shape:
        raise ValueError(f"shape mismatch {tuple(avg.shape)} vs {tuple(live.shape)}")
    return avg.mul_(momentum).add_(live, alpha=1.0 - momentum)


def ema_update_module(avg: torch.nn.Module, live: torch.nn.Module, momentum: float) -> None:
    """Average all parameters; buffers are copied verbatim."""
    with torch.no_grad():
        live_params = dict(live.named_parameters())
        for name, p in avg.named_parameters():
            ema_update(p, live_params[name], momentum)
        live_buffers = dict(live.named_buffers())
        for name, b in avg.named_buffers():
            b.copy_(live_buffers[name])


def lr_at(iteration: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rates for one iteration: constant, or linear decay over the second half."""
    if iteration < 0:
        raise ValueError("iteration cannot be negative")
    if cfg.scheduler == "constant":
        factor = 1.0
    else:
        half = cfg.total_iters / 2.0
        factor = max(0.0, 1.0 - max(0.0, iteration - half) / half)
    return cfg.lr_gen * factor, cfg.lr_disc * factor


@dataclass
class TrainState:
    config: ExperimentConfig
    gen_ab: TranslationGenerator
    gen_ba: TranslationGenerator
    disc_a: Discriminator
    disc_b: Discriminator
    ema_ab: TranslationGenerator
    ema_ba: TranslationGenerator
    opt_gen: torch.optim.Adam
    opt_disc: torch.optim.Adam
    bank: CacheBank
    iteration: int = 0


def build_train_state(cfg: ExperimentConfig) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    gen_ab = TranslationGenerator(cfg.generator)
    gen_ba = TranslationGenerator(cfg.generator)
    in_channels = cfg.generator.in_channels
    disc_a = Discriminator(cfg.disc, in_channels)
    disc_b = Discriminator(cfg.disc, in_channels)
    ema_ab = _averaged_copy(gen_ab)
    ema_ba = _averaged_copy(gen_ba)
    betas = (cfg.train.adam_beta1, cfg.train.adam_beta2)
    opt_gen = torch.optim.Adam(
        list(gen_ab.parameters()) + list(gen_ba.parameters()),
        lr=cfg.train.lr_gen,
        betas=betas,
        weight_decay=0.0,
    )
    opt_disc = torch.optim.Adam(
        list(disc_a.parameters()) + list(disc_b.parameters()),
        lr=cfg.train.lr_disc,
        betas=betas,
        weight_decay=0.0,
    )
    bank = CacheBank(cfg.train.cache_capacity)
    return TrainState(cfg, gen_ab, gen_ba, disc_a, disc_b, ema_ab, ema_ba, opt_gen, opt_disc, bank)


def _averaged_copy(gen: TranslationGenerator) -> TranslationGenerator:
    avg = copy.deepcopy(gen)
    for p in avg.parameters():
        p.requires_grad_(False)
    avg.eval()
    return avg


def _set_requires_grad(modules: Iterable[torch.nn.Module], flag: bool) -> None:
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


def train_step(state: TrainState, batch_a: torch.Tensor, batch_b: torch.Tensor) -> dict:
    """One alternating update; returns scalar metrics for logging."""
    cfg = state.config
    w = cfg.loss
    it = state.iteration
    lr_gen, lr_disc = lr_at(it, cfg.train)
    for group in state.opt_gen.param_groups:
        group["lr"] = lr_gen
    for group in state.opt_disc.param_groups:
        group["lr"] = lr_disc

    gen_ab, gen_ba = state.gen_ab, state.gen_ba
    disc_a, disc_b = state.disc_a, state.disc_b
    bank = state.bank

    # discriminator step; fakes detached so generators receive no gradient
    with torch.no_grad():
        fake_b = gen_ab(batch_a)
        fake_a = gen_ba(batch_b)
    score_real_a = disc_a(batch_a, bank, "real_a")
    score_fake_a = disc_a(fake_a, bank, "fake_a")
    score_real_b = disc_b(batch_b, bank, "real_b")
    score_fake_b = disc_b(fake_b, bank, "fake_b")
    loss_disc_adv = (
        gan_loss(score_fake_a, 0.0)
        + gan_loss(score_real_a, 1.0)
        + gan_loss(score_fake_b, 0.0)
        + gan_loss(score_real_b, 1.0)
    )
    if w.lambda_gp > 0:
        critic_a = lambda x: disc_a(x, bank, "real_a")
        critic_b = lambda x: disc_b(x, bank, "real_b")
        if w.gp_mode == "r1":
            loss_gp = gradient_penalty(critic_a, batch_a, w.lambda_gp) + gradient_penalty(
                critic_b, batch_b, w.lambda_gp
            )
        else:
            loss_gp = legacy_gradient_penalty(
                critic_a, batch_a, w.lambda_gp, w.legacy_gp_gamma
            ) + legacy_gradient_penalty(critic_b, batch_b, w.lambda_gp, w.legacy_gp_gamma)
    else:
        loss_gp = torch.zeros(())
    loss_disc = loss_disc_adv + loss_gp
    state.opt_disc.zero_grad(set_to_none=True)
    loss_disc.backward()
    state.opt_disc.step()

    # caches refresh once per iteration, after the discriminator step
    if cfg.disc.batch_head:
        disc_a.cache_features(batch_a, bank, "real_a")
        disc_a.cache_features(fake_a, bank, "fake_a")
        disc_b.cache_features(batch_b, bank, "real_b")
        disc_b.cache_features(fake_b, bank, "fake_b")

    # generator step through frozen discriminators
    _set_requires_grad((disc_a, disc_b), False)
    fake_b = gen_ab(batch_a)
    fake_a = gen_ba(batch_b)
    parts = GeneratorLossParts(
        gan_a=gan_loss(disc_b(fake_b, bank, "fake_b"), 1.0),
        gan_b=gan_loss(disc_a(fake_a, bank, "fake_a"), 1.0),
        cyc_a=cycle_loss(batch_a, gen_ba(fake_b)),
        cyc_b=cycle_loss(batch_b, gen_ab(fake_a)),
    )
    if w.lambda_idt > 0:
        parts.idt_a = identity_loss(batch_a, gen_ba(batch_a))
        parts.idt_b = identity_loss(batch_b, gen_ab(batch_b))
    if w.lambda_consist > 0:
        parts.consist_a = consistency_loss(batch_a, fake_b, w.consist_size)
        parts.consist_b = consistency_loss(batch_b, fake_a, w.consist_size)
    loss_gen = total_generator_loss(parts, w)
    state.opt_gen.zero_grad(set_to_none=True)
    loss_gen.backward()
    state.opt_gen.step()
    _set_requires_grad((disc_a, disc_b), True)

    ema_update_module(state.ema_ab, gen_ab, cfg.train.ema_momentum)
    ema_update_module(state.ema_ba, gen_ba, cfg.train.ema_momentum)
    state.iteration += 1

    metrics = {
        "iter": it,
        "loss_disc": float(loss_disc.item()),
        "loss_gp": float(loss_gp.item()),
        "loss_gen": float(loss_gen.item()),
        "loss_gan": float((parts.gan_a + parts.gan_b).item()),
        "loss_cyc": float((parts.cyc_a + parts.cyc_b).item()),
        "loss_idt": float((parts.idt_a + parts.idt_b).item()) if parts.idt_a is not None else 0.0,
        "loss_consist": (
            float((parts.consist_a + parts.consist_b).item()) if parts.consist_a is not None else 0.0
        ),
        "lr_gen": lr_gen,
        "lr_disc": lr_disc,
    }
    bad = [k for k, v in metrics.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite metrics {bad} at iteration {it}", metrics)
    return metrics


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Full training state except the feature caches, which re-warm on resume."""
    arrays: dict[str, np.ndarray] = {}
    for key in _MODULE_KEYS:
        module = getattr(state, key)
        for name, tensor in module.state_dict().items():
            arrays[f"{key}/{name}"] = tensor_to_array(tensor)
    for opt_key, opt in (("opt_gen", state.opt_gen), ("opt_disc", state.opt_disc)):
        for idx, entry in opt.state_dict()["state"].items():
            for fname, value in entry.items():
                if not isinstance(value, torch.Tensor):
                    value = torch.tensor(value)
                arrays[f"{opt_key}/{idx}/{fname}"] = tensor_to_array(value)
    arrays["rng/torch_cpu"] = torch.get_rng_state().numpy()
    meta = {
        "kind": "train",
        "iteration": state.iteration,
        "config_text": format_config(state.config),
        "config_hash": config_hash(state.config),
        "caches_included": False,
    }
    return write_archive(path, meta, arrays)


def _load_optimizer(opt: torch.optim.Optimizer, opt_key: str, arrays: dict) -> None:
    entries: dict[int, dict[str, torch.Tensor]] = {}
    prefix = f"{opt_key}/"
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        _, idx, fname = name.split("/", 2)
        entries.setdefault(int(idx), {})[fname] = array_to_tensor(arr)
    if not entries:
        return
    sd = opt.state_dict()
    sd["state"] = entries
    opt.load_state_dict(sd)


def load_checkpoint(path: str | Path, expected_config: ExperimentConfig | None = None) -> TrainState:
    """Rebuild a TrainState; raises ConfigMismatchError under a different config."""
    meta, arrays = read_archive(path)
    if meta.get("kind") != "train":
        raise ConfigMismatchError(f"{path} is not a training checkpoint")
    cfg = parse_config_text(meta["config_text"])
    if expected_config is not None and config_hash(expected_config) != meta["config_hash"]:
        raise ConfigMismatchError(
            "checkpoint was written under a different configuration "
            f"({meta['config_hash'][:12]} vs {config_hash(expected_config)[:12]})"
        )
    state = build_train_state(cfg)
    for key in _MODULE_KEYS:
        module = getattr(state, key)
        loaded = {
            name: array_to_tensor(arrays[f"{key}/{name}"]).to(tensor.dtype)
            for name, tensor in module.state_dict().items()
        }
        module.load_state_dict(loaded)
    _load_optimizer(state.opt_gen, "opt_gen", arrays)
    _load_optimizer(state.opt_disc, "opt_disc", arrays)
    torch.set_rng_state(array_to_tensor(arrays["rng/torch_cpu"]).to(torch.uint8))
    state.iteration = int(meta["iteration"])
    return state


def load_pretrained_generator(state: TrainState, path: str | Path) -> None:
    """Initialize both generators (and their averages) from inpainting weights."""
    meta, arrays = read_archive(path)
    if meta.get("kind") != "generator":
        raise ConfigMismatchError(f"{path} is not a generator checkpoint")
    if meta.get("generator_hash") != generator_hash(state.config):
        raise ConfigMismatchError("pretrained weights use a different generator configuration")
    for module in (state.gen_ab, state.gen_ba, state.ema_ab, state.ema_ba):
        loaded = {
            name: array_to_tensor(arrays[f"gen/{name}"]).to(tensor.dtype)
            for name, tensor in module.state_dict().items()
        }
        module.load_state_dict(loaded)


def ablation_variant(cfg: ExperimentConfig, toggle: str) -> ExperimentConfig:
    """Config with one component switched to its plain form."""
    variant = cfg.copy()
    if toggle == "no_style_mod":
        variant.generator.style_modulation = False
    elif toggle == "no_batch_head":
        variant.disc.batch_head = False
    elif toggle == "legacy_training":
        variant.train.scheduler = "linear"
        variant.loss.gp_mode = "legacy"
        variant.train.ema_momentum = 0.0
    else:
        raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATION_TOGGLES}")
    variant.validate()
    return variant


def run_training(
    cfg: ExperimentConfig,
    data_root: str | Path,
    out_dir: str | Path,
    pretrained: str | Path | None = None,
    resume: str | Path | None = None,
) -> dict[str, Path]:
    """Train to ``cfg.train.total_iters``; writes metrics.jsonl and checkpoint.ckpt."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zero_seconds = deterministic_mode()
    if resume is not None:
        state = load_checkpoint(resume, expected_config=cfg)
        metrics_mode = "a"
    else:
        state = build_train_state(cfg)
        if pretrained is not None:
            load_pretrained_generator(state, pretrained)
        metrics_mode = "w"
    (out / "config.cfg").write_text(format_config(cfg))
    loader_a = DomainLoader(cfg.data, data_root, "a", cfg.train.seed)
    loader_b = DomainLoader(cfg.data, data_root, "b", cfg.train.seed)
    metrics_path = out / "metrics.jsonl"
    checkpoint_path = out / "checkpoint.ckpt"
    total = cfg.train.total_iters
    bs = cfg.train.batch_size
    with open(metrics_path, metrics_mode) as mf:
        for it in range(state.iteration, total):
            t0 = time.perf_counter()
            batch_a = loader_a.batch(it, bs)
            batch_b = loader_b.batch(it, bs)
            metrics = train_step(state, batch_a, batch_b)
            metrics["seconds"] = 0.0 if zero_seconds else round(time.perf_counter() - t0, 6)
            if (it + 1) % cfg.train.log_every == 0 or it + 1 == total:
                mf.write(json.dumps(metrics) + "\n")
            if (
                cfg.train.checkpoint_every
                and (it + 1) % cfg.train.checkpoint_every == 0
                and it + 1 < total
            ):
                save_checkpoint(state, out / f"checkpoint_{it + 1:08d}.ckpt")
    save_checkpoint(state, checkpoint_path)
    return {"checkpoint": checkpoint_path, "metrics": metrics_path}


def load_generator_for_inference(
    path: str | Path, direction: str = "ab", use_ema: bool = True
) -> tuple[TranslationGenerator, ExperimentConfig]:
    """Pick one generator out of a training checkpoint, in eval mode.

    The averaged weights are the default since they are what the method
    evaluates; ``use_ema=False`` selects the live weights instead.
    """
    if direction not in ("ab", "ba"):
        raise ValueError("direction must be 'ab' or 'ba'")
    state = load_checkpoint(path)
    key = ("ema_" if use_ema else "gen_") + direction
    gen = getattr(state, key)
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen, state.config
