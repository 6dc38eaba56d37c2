"""Unpaired image-to-image translation toolkit.

Generators pair a convolutional U-Net with a transformer bottleneck that
infers a per-image style modulating the decoder kernels; discriminators
score patches through cross-sample batch statistics backed by feature
caches. Training, inpainting pretraining, deterministic checkpoints and
the evaluation protocols live in their own modules.
"""

from .config import (
    ConfigError,
    ConfigMismatchError,
    DataConfig,
    DiscriminatorConfig,
    EvalConfig,
    ExperimentConfig,
    GeneratorConfig,
    LossConfig,
    PretrainConfig,
    TrainConfig,
    apply_overrides,
    config_hash,
    format_config,
    parse_config_text,
    preset,
    toy_preset,
)
from .data import ToyDomainSpec, load_batch, make_toy_dataset
from .discriminator import (
    BatchHead,
    CacheBank,
    Discriminator,
    FeatureCache,
    batch_stddev,
)
from .evaluation import (
    EvalReport,
    StubFeatureExtractor,
    diversity,
    evaluate,
    fid,
    i_l2,
    kid,
    lm_l2,
    mmd2_unbiased,
    pixel_metrics,
    preprocess,
    psnr,
    ssim,
)
from .generator import (
    ExtendedViT,
    StyleModulatedConv2d,
    TranslationGenerator,
    demodulate,
    modulate,
    modulated_conv2d,
)
from .losses import (
    consistency_loss,
    cycle_loss,
    disc_loss,
    gan_loss,
    gradient_penalty,
    identity_loss,
    legacy_gradient_penalty,
    total_generator_loss,
)
from .pretrain import cosine_restart_lr, mask_patches, pretrain_step, run_pretraining
from .spectral import SpectralConv2d, spectral_normalize, spectral_sigma
from .trainer import (
    TrainingDiverged,
    TrainState,
    ablation_variant,
    build_train_state,
    ema_update,
    load_checkpoint,
    lr_at,
    run_training,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
