import pytest
import torch

from cyclemod.config import (
    DataConfig,
    DiscriminatorConfig,
    EvalConfig,
    ExperimentConfig,
    GeneratorConfig,
    LossConfig,
    PretrainConfig,
    TrainConfig,
)
from cyclemod.data import ToyDomainSpec, make_toy_dataset


def tiny_experiment(**train_overrides) -> ExperimentConfig:
    """Smallest valid setup (16px, narrow widths) for fast unit tests."""
    train = dict(
        total_iters=8,
        batch_size=1,
        lr_gen=1e-3,
        lr_disc=1e-3,
        ema_momentum=0.9,
        cache_capacity=2,
        seed=3,
        log_every=1,
    )
    train.update(train_overrides)
    cfg = ExperimentConfig(
        generator=GeneratorConfig(
            image_size=16,
            unet_features=(4, 6, 8, 10),
            token_dim=16,
            n_transformer_blocks=1,
            n_heads=2,
        ),
        disc=DiscriminatorConfig(features=(4, 6, 8, 10)),
        loss=LossConfig(lambda_cyc=10.0, lambda_gp=0.01),
        train=TrainConfig(**train),
        pretrain=PretrainConfig(
            patch_size=4, epochs=1, batch_size=4, base_lr=1e-3, lr_cycles=1, rotate_degrees=0.0
        ),
        data=DataConfig(resize="16x16"),
        eval=EvalConfig(image_size=16, kid_subset_size=3, kid_subsets=10),
    )
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return tiny_experiment()


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Full-size synthetic dataset: 200 train / 50 test images per domain."""
    root = tmp_path_factory.mktemp("toy_data")
    make_toy_dataset(root, ToyDomainSpec())
    return root


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Cut-down synthetic dataset for quick pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    make_toy_dataset(root, ToyDomainSpec(train_count=12, test_count=4, seed=5))
    return root


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
