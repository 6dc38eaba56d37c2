"""Experiment configuration.

All knobs live in small dataclass sections gathered into ExperimentConfig.
Configs round-trip through a flat ``section.key=value`` text format; the
canonical serialization of that text is hashed so checkpoints can verify
they are being resumed under the setup that produced them.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any, get_args, get_origin


class ConfigError(ValueError):
    """Malformed config text, unknown key, or invalid value."""


class ConfigMismatchError(ConfigError):
    """Checkpoint was produced under a different configuration."""


@dataclass
class GeneratorConfig:
    image_size: int = 256
    in_channels: int = 3
    out_channels: int = 3
    unet_features: tuple[int, ...] = (48, 96, 192, 384)
    token_dim: int = 384
    n_transformer_blocks: int = 12
    n_heads: int = 0        # 0 picks token_dim // 64, at least 1
    style_dim: int = 0      # 0 matches token_dim
    activation: str = "leakyrelu"
    norm: str = "instance"
    style_modulation: bool = True

    def validate(self) -> None:
        if self.image_size <= 0 or self.image_size % 16 != 0:
            raise ConfigError("generator.image_size must be a positive multiple of 16")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("generator channel counts must be at least 1")
        if len(self.unet_features) != 4 or any(f < 1 for f in self.unet_features):
            raise ConfigError("generator.unet_features needs exactly 4 positive widths")
        if self.token_dim < 1 or self.n_transformer_blocks < 1:
            raise ConfigError("generator transformer sizes must be at least 1")
        if self.n_heads < 0 or self.style_dim < 0:
            raise ConfigError("generator.n_heads and generator.style_dim cannot be negative")
        if self.resolved_heads < 1 or self.token_dim % self.resolved_heads != 0:
            raise ConfigError("generator.token_dim must divide evenly into attention heads")
        if self.activation not in ("leakyrelu", "gelu"):
            raise ConfigError("generator.activation must be 'leakyrelu' or 'gelu'")
        if self.norm not in ("instance", "none"):
            raise ConfigError("generator.norm must be 'instance' or 'none'")

    @property
    def resolved_heads(self) -> int:
        return self.n_heads if self.n_heads > 0 else max(1, self.token_dim // 64)

    @property
    def resolved_style_dim(self) -> int:
        return self.style_dim if self.style_dim > 0 else self.token_dim

    @property
    def token_grid(self) -> int:
        return self.image_size // 16


@dataclass
class DiscriminatorConfig:
    features: tuple[int, ...] = (64, 128, 256, 512)
    stat_kind: str = "bsd"  # 'bsd' (batch stddev channel) or 'bn' (batch norm)
    batch_head: bool = True
    spectral_norm: bool = True

    def validate(self) -> None:
        if len(self.features) != 4 or any(f < 1 for f in self.features):
            raise ConfigError("disc.features needs exactly 4 positive widths")
        if self.stat_kind not in ("bsd", "bn"):
            raise ConfigError("disc.stat_kind must be 'bsd' or 'bn'")


@dataclass
class LossConfig:
    lambda_cyc: float = 10.0
    lambda_idt: float = 0.0
    lambda_consist: float = 0.0
    lambda_gp: float = 1.0
    gp_mode: str = "r1"     # 'r1' (zero-centered) or 'legacy' (norm pulled toward gamma)
    legacy_gp_gamma: float = 100.0
    consist_size: int = 32  # side of the downsized images compared by the consistency term

    def validate(self) -> None:
        for name in ("lambda_cyc", "lambda_idt", "lambda_consist", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} cannot be negative")
        if self.gp_mode not in ("r1", "legacy"):
            raise ConfigError("loss.gp_mode must be 'r1' or 'legacy'")
        if self.legacy_gp_gamma <= 0:
            raise ConfigError("loss.legacy_gp_gamma must be positive")
        if self.consist_size < 1:
            raise ConfigError("loss.consist_size must be at least 1")


@dataclass
class TrainConfig:
    total_iters: int = 1000000
    batch_size: int = 1
    lr_gen: float = 1e-4
    lr_disc: float = 1e-4
    scheduler: str = "constant"  # 'constant' or 'linear' (decay over the second half)
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    ema_momentum: float = 0.9999
    cache_capacity: int = 3
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0    # 0 writes only the final checkpoint

    def validate(self) -> None:
        if self.total_iters < 1 or self.batch_size < 1:
            raise ConfigError("train.total_iters and train.batch_size must be at least 1")
        if self.lr_gen <= 0 or self.lr_disc <= 0:
            raise ConfigError("train learning rates must be positive")
        if self.scheduler not in ("constant", "linear"):
            raise ConfigError("train.scheduler must be 'constant' or 'linear'")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("train.ema_momentum must lie in [0, 1)")
        if self.cache_capacity < 0:
            raise ConfigError("train.cache_capacity cannot be negative")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("train.log_every must be >= 1 and train.checkpoint_every >= 0")


@dataclass
class PretrainConfig:
    patch_size: int = 32
    mask_prob: float = 0.4
    epochs: int = 500
    samples_per_epoch: int = 0   # 0 uses the full training set each epoch
    batch_size: int = 64
    base_lr: float = 0.0         # 0 scales automatically: 5e-3 * batch_size / 512
    weight_decay: float = 0.05
    lr_cycles: int = 5
    rotate_degrees: float = 10.0
    hflip_prob: float = 0.5
    jitter: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError("pretrain.patch_size must be at least 1")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("pretrain.mask_prob must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_cycles < 1:
            raise ConfigError("pretrain.epochs, batch_size and lr_cycles must be at least 1")
        if self.samples_per_epoch < 0 or self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("pretrain sizes, lr and weight decay cannot be negative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("pretrain.hflip_prob must lie in [0, 1]")
        if not 0.0 <= self.jitter <= 0.5:
            raise ConfigError("pretrain.jitter must lie in [0, 0.5]")

    def resolved_lr(self) -> float:
        return self.base_lr if self.base_lr > 0 else 5e-3 * self.batch_size / 512


@dataclass
class DataConfig:
    resize: str = ""        # '' keeps size, 'smaller:N' scales min side, 'WxH' is exact
    crop_size: int = 0      # 0 disables cropping (random in train, center in test)
    hflip: bool = True      # train split only

    def validate(self) -> None:
        from .data import parse_resize_spec

        parse_resize_spec(self.resize)
        if self.crop_size < 0:
            raise ConfigError("data.crop_size cannot be negative")


@dataclass
class EvalConfig:
    kind: str = "consistent"   # 'lq_legacy', 'hq_adhoc' or 'consistent'
    image_size: int = 256
    kid_subset_size: int = 0   # 0 picks the protocol default (lq_legacy 1000, else 100)
    kid_subsets: int = 100
    extractor: str = "stub"    # 'stub' or 'inception:<weights path>'

    def validate(self) -> None:
        if self.kind not in ("lq_legacy", "hq_adhoc", "consistent"):
            raise ConfigError("eval.kind must be 'lq_legacy', 'hq_adhoc' or 'consistent'")
        if self.image_size < 1:
            raise ConfigError("eval.image_size must be at least 1")
        if self.kid_subset_size < 0 or self.kid_subsets < 1:
            raise ConfigError("eval.kid_subset_size >= 0 and eval.kid_subsets >= 1 required")
        if self.extractor != "stub" and not self.extractor.startswith("inception:"):
            raise ConfigError("eval.extractor must be 'stub' or 'inception:<weights path>'")

    def resolved_kid_subset(self) -> int:
        if self.kid_subset_size > 0:
            return self.kid_subset_size
        return 1000 if self.kind == "lq_legacy" else 100


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for f in fields(self):
            getattr(self, f.name).validate()

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


_SECTIONS = ("generator", "disc", "loss", "train", "pretrain", "data", "eval")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, annotation: Any, key: str) -> Any:
    text = text.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        if get_origin(annotation) is tuple and get_args(annotation)[0] is int:
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {err}") from None
    raise ConfigError(f"unsupported config field type for {key}")


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical flat text form, one ``section.key=value`` line per field."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name}={_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse flat key=value lines on top of ``base`` (defaults when omitted).

    Blank lines and '#' comments are ignored. Unknown keys are an error, and
    the assembled config is validated before being returned.
    """
    cfg = base.copy() if base is not None else ExperimentConfig()
    assignments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        assignments.append((lineno, key.strip(), value))
    unknown = []
    for lineno, key, value in assignments:
        if "." not in key:
            unknown.append(key)
            continue
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            unknown.append(key)
            continue
        obj = getattr(cfg, section)
        matching = [f for f in fields(obj) if f.name == name]
        if not matching:
            unknown.append(key)
            continue
        setattr(obj, name, _parse_value(value, _annotation_of(obj, name), key))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(set(unknown))))
    cfg.validate()
    return cfg


def _annotation_of(obj: Any, name: str) -> Any:
    import typing

    hints = typing.get_type_hints(type(obj))
    return hints[name]


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` override strings on top of an existing config."""
    return parse_config_text("\n".join(overrides), base=cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


def generator_hash(cfg: ExperimentConfig) -> str:
    """Hash of the generator section only, for pretrained-weight compatibility."""
    lines = []
    obj = cfg.generator
    for f in fields(obj):
        lines.append(f"generator.{f.name}={_format_value(getattr(obj, f.name))}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def toy_preset() -> ExperimentConfig:
    """Small 32x32 two-domain setup tuned to train in minutes on one CPU core."""
    cfg = ExperimentConfig()
    cfg.generator = GeneratorConfig(
        image_size=32,
        unet_features=(16, 32, 64, 128),
        token_dim=64,
        n_transformer_blocks=2,
        n_heads=2,
    )
    cfg.disc = DiscriminatorConfig(features=(16, 32, 64, 128))
    cfg.loss = LossConfig(lambda_cyc=10.0, lambda_gp=0.01)
    cfg.train = TrainConfig(
        total_iters=2000,
        lr_gen=2e-4,
        lr_disc=2e-4,
        ema_momentum=0.995,
        log_every=1,
    )
    cfg.pretrain = PretrainConfig(
        patch_size=8,
        epochs=10,
        batch_size=16,
        base_lr=1e-3,
        lr_cycles=2,
        rotate_degrees=0.0,
        jitter=0.1,
    )
    cfg.eval = EvalConfig(kind="consistent", image_size=32, kid_subset_size=20, kid_subsets=50)
    cfg.validate()
    return cfg


def full_preset() -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.validate()
    return cfg


PRESETS = {"toy": toy_preset, "full": full_preset}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


CONFIG_DOCS: dict[str, str] = {
    "generator.image_size": "Square input/output side; must be divisible by 16.",
    "generator.in_channels": "Channels of source images.",
    "generator.out_channels": "Channels of translated images.",
    "generator.unet_features": "Widths of the four encoder/decoder levels.",
    "generator.token_dim": "Transformer feature width in the bottleneck.",
    "generator.n_transformer_blocks": "Number of transformer blocks in the bottleneck.",
    "generator.n_heads": "Attention heads; 0 derives token_dim // 64 (at least 1).",
    "generator.style_dim": "Length of the inferred style code; 0 matches token_dim.",
    "generator.activation": "Convolutional activation: 'leakyrelu' or 'gelu'.",
    "generator.norm": "Encoder normalization: 'instance' or 'none'.",
    "generator.style_modulation": "When false the decoder runs with all-ones styles.",
    "disc.features": "Widths of the four stride-2 body convolutions.",
    "disc.stat_kind": "Batch statistic in the head: 'bsd' stddev channel or 'bn' batch norm.",
    "disc.batch_head": "When false the discriminator scores without cross-sample statistics.",
    "disc.spectral_norm": "Divide discriminator conv weights by their top singular value.",
    "loss.lambda_cyc": "Weight of the cycle reconstruction term.",
    "loss.lambda_idt": "Weight of the identity term.",
    "loss.lambda_consist": "Weight of the low-frequency consistency term.",
    "loss.lambda_gp": "Weight of the gradient penalty on real samples.",
    "loss.gp_mode": "'r1' zero-centered penalty or 'legacy' norm-targeting penalty.",
    "loss.legacy_gp_gamma": "Target gradient norm of the legacy penalty.",
    "loss.consist_size": "Side of the area-downsized images compared by the consistency term.",
    "train.total_iters": "Total optimization iterations.",
    "train.batch_size": "Images per domain per iteration.",
    "train.lr_gen": "Generator Adam learning rate.",
    "train.lr_disc": "Discriminator Adam learning rate.",
    "train.scheduler": "'constant', or 'linear' decay to 0 over the second half.",
    "train.adam_beta1": "Adam beta1 for both optimizers.",
    "train.adam_beta2": "Adam beta2 for both optimizers.",
    "train.ema_momentum": "Weight-averaging momentum; 0 tracks the live weights exactly.",
    "train.cache_capacity": "Stored feature maps per discriminator cache.",
    "train.seed": "Seed for weights, sampling order and augmentation.",
    "train.log_every": "Write a metrics line every N iterations.",
    "train.checkpoint_every": "Periodic checkpoint interval; 0 keeps only the final one.",
    "pretrain.patch_size": "Side of the square patches blanked during inpainting.",
    "pretrain.mask_prob": "Independent blanking probability per patch.",
    "pretrain.epochs": "Pretraining epochs.",
    "pretrain.samples_per_epoch": "Cap on images per epoch; 0 uses the full set.",
    "pretrain.batch_size": "Images per pretraining step.",
    "pretrain.base_lr": "Peak AdamW learning rate; 0 scales 5e-3 * batch_size / 512.",
    "pretrain.weight_decay": "AdamW weight decay.",
    "pretrain.lr_cycles": "Cosine schedule restarts across the run.",
    "pretrain.rotate_degrees": "Max absolute random rotation.",
    "pretrain.hflip_prob": "Horizontal flip probability.",
    "pretrain.jitter": "Max absolute shift of brightness/contrast/saturation/hue.",
    "pretrain.seed": "Seed for pretraining weights, masking and augmentation.",
    "data.resize": "'' keeps size, 'smaller:N' scales the shorter side, 'WxH' is exact.",
    "data.crop_size": "Crop side after resize; random in train, centered in test; 0 skips.",
    "data.hflip": "Random horizontal flips on the train split.",
    "eval.kind": "Evaluation protocol: 'lq_legacy', 'hq_adhoc' or 'consistent'.",
    "eval.image_size": "Side images are brought to before computing metrics.",
    "eval.kid_subset_size": "Samples per KID subset; 0 uses the protocol default.",
    "eval.kid_subsets": "Number of KID subsets averaged.",
    "eval.extractor": "'stub' or 'inception:<path to torchvision inception_v3 weights>'.",
}


def config_reference() -> str:
    """Human-readable list of every key with its default and description."""
    defaults = ExperimentConfig()
    lines = []
    for section in _SECTIONS:
        obj = getattr(defaults, section)
        for f in fields(obj):
            key = f"{section}.{f.name}"
            lines.append(f"{key}={_format_value(getattr(obj, f.name))}")
            lines.append(f"    {CONFIG_DOCS[key]}")
    return "\n".join(lines) + "\n"
