import json

import pytest
import torch

from cyclemod.config import ConfigMismatchError, TrainConfig
from cyclemod.pretrain import save_generator_checkpoint
from cyclemod.trainer import (
    ABLATION_TOGGLES,
    TrainingDiverged,
    ablation_variant,
    build_train_state,
    ema_update,
    ema_update_module,
    load_checkpoint,
    load_generator_for_inference,
    load_pretrained_generator,
    lr_at,
    run_training,
    save_checkpoint,
    train_step,
)

from conftest import tiny_experiment


def toy_batches(seed: int = 0, size: int = 16) -> tuple[torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, size, size, generator=g) * 2 - 1
    b = torch.rand(1, 3, size, size, generator=g) * 2 - 1
    return a, b


def test_ema_update_hand_value():
    avg = torch.tensor([0.0, 10.0])
    live = torch.tensor([1.0, 0.0])
    ema_update(avg, live, 0.9)
    assert torch.allclose(avg, torch.tensor([0.1, 9.0]))


def test_ema_update_closed_form_over_many_steps():
    # constant live weight w: avg_k = m^k avg_0 + (1 - m^k) w
    m, k = 0.97, 200
    avg = torch.tensor([2.0], dtype=torch.float64)
    live = torch.tensor([5.0], dtype=torch.float64)
    for _ in range(k):
        ema_update(avg, live, m)
    expected = (m**k) * 2.0 + (1 - m**k) * 5.0
    assert avg.item() == pytest.approx(expected, rel=1e-12)


def test_ema_update_validation():
    with pytest.raises(ValueError):
        ema_update(torch.zeros(2), torch.zeros(2), 1.0)
    with pytest.raises(ValueError):
        ema_update(torch.zeros(2), torch.zeros(2), -0.1)
    with pytest.raises(ValueError):
        ema_update(torch.zeros(2), torch.zeros(3), 0.5)


def test_ema_module_momentum_zero_copies_live():
    torch.manual_seed(0)
    live = torch.nn.Linear(4, 4)
    avg = torch.nn.Linear(4, 4)
    ema_update_module(avg, live, 0.0)
    assert torch.equal(avg.weight, live.weight)
    assert torch.equal(avg.bias, live.bias)


def test_lr_schedule():
    cfg = TrainConfig(total_iters=1000, lr_gen=2e-4, lr_disc=1e-4, scheduler="linear")
    assert lr_at(0, cfg) == (2e-4, 1e-4)
    assert lr_at(499, cfg)[0] == 2e-4
    assert lr_at(500, cfg)[0] == 2e-4
    assert lr_at(750, cfg)[0] == pytest.approx(1e-4)
    assert lr_at(1000, cfg)[0] == 0.0
    assert lr_at(5000, cfg)[0] == 0.0  # clamped, never negative
    const = TrainConfig(total_iters=1000, lr_gen=2e-4, lr_disc=1e-4, scheduler="constant")
    assert lr_at(900, const) == (2e-4, 1e-4)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_build_state_is_seeded(tiny_cfg):
    s1 = build_train_state(tiny_cfg)
    s2 = build_train_state(tiny_cfg)
    for p1, p2 in zip(s1.gen_ab.parameters(), s2.gen_ab.parameters()):
        assert torch.equal(p1, p2)
    # the averaged copies start identical to the live generators
    for p_live, p_avg in zip(s1.gen_ab.parameters(), s1.ema_ab.parameters()):
        assert torch.equal(p_live, p_avg)
        assert not p_avg.requires_grad


def test_train_step_updates_everything(tiny_cfg):
    state = build_train_state(tiny_cfg)
    gen_before = [p.detach().clone() for p in state.gen_ab.parameters()]
    disc_before = [p.detach().clone() for p in state.disc_a.parameters()]
    ema_before = [p.detach().clone() for p in state.ema_ab.parameters()]
    a, b = toy_batches()
    metrics = train_step(state, a, b)
    assert state.iteration == 1
    assert any(not torch.equal(p0, p1) for p0, p1 in zip(gen_before, state.gen_ab.parameters()))
    assert any(not torch.equal(p0, p1) for p0, p1 in zip(disc_before, state.disc_a.parameters()))
    assert any(not torch.equal(p0, p1) for p0, p1 in zip(ema_before, state.ema_ab.parameters()))
    for key in ("loss_disc", "loss_gp", "loss_gen", "loss_gan", "loss_cyc", "lr_gen"):
        assert key in metrics
    # discriminators end the step trainable again
    assert all(p.requires_grad for p in state.disc_a.parameters())
    # caches were refreshed once for all four streams
    for which in ("real_a", "real_b", "fake_a", "fake_b"):
        assert len(state.bank[which]) == 1


def test_train_step_optional_terms(tiny_cfg):
    tiny_cfg.loss.lambda_idt = 0.5
    tiny_cfg.loss.lambda_consist = 0.5
    tiny_cfg.loss.consist_size = 8
    state = build_train_state(tiny_cfg)
    a, b = toy_batches()
    metrics = train_step(state, a, b)
    assert metrics["loss_idt"] > 0
    assert metrics["loss_consist"] >= 0


def test_train_step_rejects_nan_input(tiny_cfg):
    state = build_train_state(tiny_cfg)
    a, b = toy_batches()
    a[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as exc:
        train_step(state, a, b)
    assert isinstance(exc.value.metrics, dict)


def test_checkpoint_roundtrip_is_byte_stable(tiny_cfg, tmp_path):
    state = build_train_state(tiny_cfg)
    a, b = toy_batches()
    train_step(state, a, b)
    train_step(state, a, b)
    p1 = tmp_path / "one.ckpt"
    save_checkpoint(state, p1)
    loaded = load_checkpoint(p1, expected_config=tiny_cfg)
    assert loaded.iteration == 2
    for key in ("gen_ab", "disc_b", "ema_ba"):
        orig = getattr(state, key).state_dict()
        got = getattr(loaded, key).state_dict()
        for name in orig:
            assert torch.equal(orig[name], got[name]), name
    p2 = tmp_path / "two.ckpt"
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_config_mismatch(tiny_cfg, tmp_path):
    state = build_train_state(tiny_cfg)
    path = save_checkpoint(state, tmp_path / "ck.ckpt")
    other = tiny_experiment(seed=99)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=other)
    # and a generator checkpoint is not accepted as a training one
    gpath = save_generator_checkpoint(state.gen_ab, tiny_cfg, tmp_path / "g.ckpt", 0)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(gpath)


def test_resumed_run_replays_uninterrupted_run(tiny_root, tmp_path):
    # caches are not checkpointed, so exact resume holds with them disabled
    cfg = tiny_experiment(total_iters=8, checkpoint_every=4, cache_capacity=0)
    full_dir = tmp_path / "full"
    paths = run_training(cfg, tiny_root, full_dir)
    mid = full_dir / "checkpoint_00000004.ckpt"
    assert mid.exists()

    resumed = run_training(cfg, tiny_root, tmp_path / "resumed", resume=mid)
    assert paths["checkpoint"].read_bytes() == resumed["checkpoint"].read_bytes()

    full_lines = paths["metrics"].read_text().splitlines()
    resumed_lines = resumed["metrics"].read_text().splitlines()
    strip = lambda line: {k: v for k, v in json.loads(line).items() if k != "seconds"}
    assert [strip(l) for l in full_lines[4:]] == [strip(l) for l in resumed_lines]


def test_pretrained_weights_seed_all_four_generators(tiny_cfg, tmp_path):
    donor = build_train_state(tiny_cfg)
    a, b = toy_batches()
    train_step(donor, a, b)  # move donor weights off the shared init
    path = save_generator_checkpoint(donor.gen_ab, tiny_cfg, tmp_path / "pre.ckpt", 7)
    state = build_train_state(tiny_cfg)
    load_pretrained_generator(state, path)
    donor_sd = donor.gen_ab.state_dict()
    for module in (state.gen_ab, state.gen_ba, state.ema_ab, state.ema_ba):
        sd = module.state_dict()
        for name in donor_sd:
            assert torch.equal(sd[name], donor_sd[name])


def test_pretrained_weights_reject_other_architectures(tiny_cfg, tmp_path):
    other = tiny_experiment()
    other.generator.token_dim = 32
    other.validate()
    donor = build_train_state(other)
    path = save_generator_checkpoint(donor.gen_ab, other, tmp_path / "pre.ckpt", 0)
    state = build_train_state(tiny_cfg)
    with pytest.raises(ConfigMismatchError):
        load_pretrained_generator(state, path)


def test_ablation_variants(tiny_cfg):
    no_style = ablation_variant(tiny_cfg, "no_style_mod")
    assert no_style.generator.style_modulation is False
    no_head = ablation_variant(tiny_cfg, "no_batch_head")
    assert no_head.disc.batch_head is False
    legacy = ablation_variant(tiny_cfg, "legacy_training")
    assert legacy.train.scheduler == "linear"
    assert legacy.loss.gp_mode == "legacy"
    assert legacy.train.ema_momentum == 0.0
    # the source config is untouched
    assert tiny_cfg.generator.style_modulation is True
    assert tiny_cfg.disc.batch_head is True
    assert tiny_cfg.train.scheduler == "constant"
    with pytest.raises(ValueError):
        ablation_variant(tiny_cfg, "no_lunch")
    assert set(ABLATION_TOGGLES) == {"no_style_mod", "no_batch_head", "legacy_training"}


def test_run_training_writes_artifacts(tiny_root, tmp_path):
    cfg = tiny_experiment(total_iters=3)
    out = tmp_path / "run"
    paths = run_training(cfg, tiny_root, out)
    assert paths["checkpoint"].exists()
    assert (out / "config.cfg").exists()
    lines = [json.loads(l) for l in paths["metrics"].read_text().splitlines()]
    assert [m["iter"] for m in lines] == [0, 1, 2]
    assert all("seconds" in m for m in lines)


def test_inference_loader_picks_requested_weights(tiny_root, tmp_path):
    cfg = tiny_experiment(total_iters=2)
    paths = run_training(cfg, tiny_root, tmp_path / "run")
    ema_gen, cfg_back = load_generator_for_inference(paths["checkpoint"], "ab", use_ema=True)
    live_gen, _ = load_generator_for_inference(paths["checkpoint"], "ab", use_ema=False)
    assert cfg_back.generator.image_size == 16
    assert not ema_gen.training
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    with torch.no_grad():
        out_ema = ema_gen(x)
        out_live = live_gen(x)
    assert out_ema.shape == x.shape
    # after two updates the averaged weights lag the live ones
    assert not torch.equal(out_ema, out_live)
    with pytest.raises(ValueError):
        load_generator_for_inference(paths["checkpoint"], "sideways")
