import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclemod.config import GeneratorConfig
from cyclemod.generator import (
    ExtendedViT,
    StyleModulatedConv2d,
    StyleProjector,
    TranslationGenerator,
    demodulate,
    modulate,
    modulated_conv2d,
)


def small_gen_config(**overrides) -> GeneratorConfig:
    base = dict(
        image_size=16,
        unet_features=(4, 6, 8, 10),
        token_dim=16,
        n_transformer_blocks=1,
        n_heads=2,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def test_modulate_hand_case():
    w = torch.tensor([[[[1.0]], [[2.0]]], [[[3.0]], [[4.0]]]])  # (2 out, 2 in, 1, 1)
    s = torch.tensor([10.0, 100.0])
    out = modulate(w, s)
    expected = torch.tensor([[[[10.0]], [[200.0]]], [[[30.0]], [[400.0]]]])
    assert torch.equal(out, expected)


def test_modulate_shape_errors():
    w = torch.randn(2, 3, 3, 3)
    with pytest.raises(ValueError):
        modulate(w, torch.randn(4))
    with pytest.raises(ValueError):
        modulate(torch.randn(2, 3, 3), torch.randn(3))
    with pytest.raises(ValueError):
        modulate(w, torch.randn(2, 3))


@settings(max_examples=30, deadline=None)
@given(
    out_ch=st.integers(1, 6),
    in_ch=st.integers(1, 6),
    k=st.sampled_from([1, 3, 5]),
    seed=st.integers(0, 10_000),
)
def test_demodulate_unit_norm_property(out_ch, in_ch, k, seed):
    rng = np.random.default_rng(seed)
    w = torch.from_numpy(rng.standard_normal((out_ch, in_ch, k, k)).astype(np.float32))
    s = torch.from_numpy((rng.standard_normal(in_ch) ** 2 + 0.1).astype(np.float32))
    modulated = modulate(w, s)
    norms = demodulate(modulated).pow(2).sum(dim=(1, 2, 3)).sqrt()
    # eps in the denominator keeps norms just below 1: sqrt(S / (S + 1e-8))
    sq = modulated.pow(2).sum(dim=(1, 2, 3))
    expected = (sq / (sq + 1e-8)).sqrt()
    assert torch.all(norms <= 1.0 + 1e-7)
    assert torch.allclose(norms, expected, rtol=1e-5, atol=0.0)


def test_demodulate_zero_channel_stays_zero():
    w = torch.randn(3, 2, 3, 3)
    w[1] = 0.0
    d = demodulate(w)
    assert torch.all(d[1] == 0.0)
    assert torch.all(torch.isfinite(d))


def test_demodulate_eps_validation():
    with pytest.raises(ValueError):
        demodulate(torch.randn(2, 2, 3, 3), eps=0.0)


def test_modulated_conv_identity_kernel():
    c = 3
    w = torch.zeros(c, c, 3, 3)
    for i in range(c):
        w[i, i, 1, 1] = 1.0
    x = torch.randn(2, c, 8, 8)
    out = modulated_conv2d(x, w, torch.ones(c))
    assert torch.allclose(out, x, atol=1e-5)


def test_modulated_conv_rejects_even_kernels():
    with pytest.raises(ValueError):
        modulated_conv2d(torch.randn(1, 2, 8, 8), torch.randn(3, 2, 4, 4), torch.ones(2))


def test_modulated_conv_magnitude_preservation_quick():
    torch.manual_seed(0)
    hits = 0
    for _ in range(20):
        w = torch.randn(8, 8, 3, 3)
        s = torch.rand(8) * 2 + 0.1
        x = torch.randn(4, 8, 16, 16)
        std = modulated_conv2d(x, w, s).std().item()
        hits += 0.8 <= std <= 1.2
    assert hits >= 19


def test_layer_matches_functional_per_sample():
    torch.manual_seed(1)
    layer = StyleModulatedConv2d(4, 5, 3)
    x = torch.randn(3, 4, 8, 8)
    styles = torch.rand(3, 4) + 0.2
    out = layer(x, styles)
    for i in range(3):
        ref = modulated_conv2d(x[i : i + 1], layer.weight, styles[i]) + layer.bias.view(1, -1, 1, 1)
        assert torch.allclose(out[i : i + 1], ref, atol=1e-6)


def test_layer_style_shape_validation():
    layer = StyleModulatedConv2d(4, 5, 3)
    with pytest.raises(ValueError):
        layer(torch.randn(2, 4, 8, 8), torch.randn(2, 3))
    with pytest.raises(ValueError):
        StyleModulatedConv2d(4, 5, kernel_size=2)


def test_style_projector_starts_at_one():
    proj = StyleProjector(16, 12)
    code = torch.randn(5, 16)
    assert torch.all(proj(code) == 1.0)


def test_evit_shapes_and_token_count():
    torch.manual_seed(0)
    evit = ExtendedViT(n_tokens=4, in_dim=10, token_dim=16, style_dim=16, n_blocks=1, n_heads=2)
    tokens = torch.randn(2, 4, 10)
    out, style = evit(tokens)
    assert out.shape == (2, 4, 10)
    assert style.shape == (2, 16)
    with pytest.raises(ValueError):
        evit(torch.randn(2, 5, 10))
    with pytest.raises(ValueError):
        evit(torch.randn(2, 4, 11))


def test_evit_styles_differ_between_inputs():
    torch.manual_seed(0)
    evit = ExtendedViT(n_tokens=4, in_dim=10, token_dim=16, style_dim=16, n_blocks=1, n_heads=2)
    _, s1 = evit(torch.randn(1, 4, 10))
    _, s2 = evit(torch.randn(1, 4, 10))
    assert not torch.allclose(s1, s2)


def test_generator_forward_contract():
    torch.manual_seed(0)
    gen = TranslationGenerator(small_gen_config())
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    y = gen(x)
    assert y.shape == x.shape
    assert y.min() >= -1.0 and y.max() <= 1.0
    assert gen.evit.n_tokens == (16 // 16) ** 2
    with pytest.raises(ValueError):
        gen(torch.randn(2, 3, 32, 32))
    with pytest.raises(ValueError):
        gen(torch.randn(2, 1, 16, 16))


def test_generator_token_grid_scales_with_image_size():
    gen = TranslationGenerator(small_gen_config(image_size=32))
    assert gen.evit.n_tokens == (32 // 16) ** 2


def test_generator_deterministic_under_seed():
    torch.manual_seed(11)
    g1 = TranslationGenerator(small_gen_config())
    torch.manual_seed(11)
    g2 = TranslationGenerator(small_gen_config())
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(g1(x), g2(x))


def test_generator_batch_equivariance():
    torch.manual_seed(2)
    gen = TranslationGenerator(small_gen_config()).eval()
    x1, x2 = torch.randn(1, 3, 16, 16), torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        joint = gen(torch.cat([x1, x2]))
        split = torch.cat([gen(x1), gen(x2)])
    assert (joint - split).abs().max().item() <= 1e-6


def test_project_style_levels_and_widths():
    gen = TranslationGenerator(small_gen_config())
    code = torch.randn(2, 16)
    widths = gen.decoder_in_channels()
    assert widths == (8, 12, 16, 20)
    for level in (1, 2, 3, 4):
        assert gen.project_style(code, level).shape == (2, widths[level - 1])
    with pytest.raises(ValueError):
        gen.project_style(code, 5)


def test_decoder_widths_match_convention():
    # a (32, 64, 128, 256) feature ladder concatenates into (64, 128, 256, 512)
    gen = TranslationGenerator(
        GeneratorConfig(
            image_size=16,
            unet_features=(32, 64, 128, 256),
            token_dim=32,
            n_transformer_blocks=1,
            n_heads=2,
        )
    )
    assert gen.decoder_in_channels() == (64, 128, 256, 512)


def test_style_path_receives_gradient():
    torch.manual_seed(4)
    gen = TranslationGenerator(small_gen_config())
    x = torch.randn(1, 3, 16, 16)
    loss = (gen(x) * torch.randn(1, 3, 16, 16)).sum()
    loss.backward()
    for block in (gen.dec1, gen.dec2, gen.dec3, gen.dec4):
        assert block.project.linear.weight.grad is not None
        assert block.project.linear.weight.grad.abs().max() > 0
        assert block.project.linear.bias.grad.abs().max() > 0


def test_style_modulation_toggle_disconnects_projectors():
    torch.manual_seed(5)
    gen = TranslationGenerator(small_gen_config(style_modulation=False)).eval()
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        before = gen(x)
        for block in (gen.dec1, gen.dec2, gen.dec3, gen.dec4):
            block.project.linear.weight.fill_(123.0)
            block.project.linear.bias.fill_(-7.0)
        after = gen(x)
    assert torch.equal(before, after)
