"""Style-modulated hybrid U-Net / transformer translation generator.

The encoder is a four-level convolutional U-Net half. Its bottleneck is a
small vision transformer that carries one extra learnable token; the output
state of that token is projected into a style code describing the source
image. Each decoder level scales its convolution kernel per input channel
by an affine function of that code, then renormalizes every output channel
of the scaled kernel to unit L2 norm so the modulation redistributes
relative channel weights without inflating activation magnitudes.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .config import GeneratorConfig


def modulate(weight: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Scale kernel input channels: out[j, i, x, y] = style[i] * weight[j, i, x, y]."""
    if weight.ndim != 4:
        raise ValueError(f"expected a conv kernel [out, in, kh, kw], got shape {tuple(weight.shape)}")
    if style.ndim != 1 or style.shape[0] != weight.shape[1]:
        raise ValueError(
            f"style length {tuple(style.shape)} does not match kernel input channels {weight.shape[1]}"
        )
    return weight * style.view(1, -1, 1, 1)


def demodulate(weight: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Rescale each output channel of a kernel to unit L2 norm.

    The norm runs over input channels and both kernel axes. An all-zero
    channel stays zero; eps keeps the division finite.
    """
    if weight.ndim != 4:
        raise ValueError(f"expected a conv kernel [out, in, kh, kw], got shape {tuple(weight.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = torch.rsqrt(weight.pow(2).sum(dim=(1, 2, 3), keepdim=True) + eps)
    return weight * norm


def modulated_conv2d(
    x: torch.Tensor, weight: torch.Tensor, style: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Same-padding conv2d with a modulated then demodulated kernel.

    One style vector is shared by the whole batch; the batched layer below
    handles per-sample styles.
    """
    kh, kw = weight.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("modulated convolutions require odd kernel sizes")
    w = demodulate(modulate(weight, style), eps)
    return F.conv2d(x, w, padding=(kh // 2, kw // 2))


class StyleModulatedConv2d(nn.Module):
    """Conv layer whose kernel is scaled per input channel by a per-sample style."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, eps: float = 1e-8):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.eps = eps
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.normal_(self.weight, 0.0, 0.02)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        n, c, h, w_sp = x.shape
        if style.shape != (n, self.in_channels):
            raise ValueError(
                f"style shape {tuple(style.shape)} does not match batch {n} x channels {self.in_channels}"
            )
        w = self.weight.unsqueeze(0) * style[:, None, :, None, None]  # (N, out, in, k, k)
        w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
        k = w.shape[-1]
        # grouped conv runs each sample against its own demodulated kernel
        out = F.conv2d(
            x.reshape(1, n * c, h, w_sp),
            w.reshape(n * self.out_channels, c, k, k),
            padding=k // 2,
            groups=n,
        )
        return out.reshape(n, self.out_channels, h, w_sp) + self.bias.view(1, -1, 1, 1)


class StyleProjector(nn.Module):
    """Affine map from the shared style code to one decoder level's channel scales.

    Starts at weight 0 / bias 1 so every scale is exactly one and training
    begins from an unmodulated network.
    """

    def __init__(self, style_dim: int, width: int):
        super().__init__()
        self.linear = nn.Linear(style_dim, width)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.zeros_(self.linear.weight)
        nn.init.ones_(self.linear.bias)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        return self.linear(code)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        attended, _ = self.attn(h, h, h, need_weights=False)
        x = x + attended
        return x + self.mlp(self.norm2(x))


class ExtendedViT(nn.Module):
    """Transformer bottleneck carrying one extra learnable style token.

    Positional embeddings are concatenated to the incoming tokens along the
    feature axis before the input projection (rather than added after it).
    The style token is appended along the token axis; its output state is
    projected to the style code and returned next to the image tokens.
    """

    def __init__(
        self,
        n_tokens: int,
        in_dim: int,
        token_dim: int,
        style_dim: int,
        n_blocks: int,
        n_heads: int,
    ):
        super().__init__()
        self.n_tokens = n_tokens
        self.in_dim = in_dim
        self.pos_embedding = nn.Parameter(torch.randn(n_tokens, token_dim) * 0.02)
        self.style_token = nn.Parameter(torch.randn(token_dim) * 0.02)
        self.input_proj = nn.Linear(in_dim + token_dim, token_dim)
        self.blocks = nn.ModuleList(TransformerBlock(token_dim, n_heads) for _ in range(n_blocks))
        self.final_norm = nn.LayerNorm(token_dim)
        self.output_proj = nn.Linear(token_dim, in_dim)
        self.style_head = nn.Linear(token_dim, style_dim)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tokens.ndim != 3 or tokens.shape[1] != self.n_tokens or tokens.shape[2] != self.in_dim:
            raise ValueError(
                f"expected tokens [N, {self.n_tokens}, {self.in_dim}], got {tuple(tokens.shape)}"
            )
        n = tokens.shape[0]
        pos = self.pos_embedding.unsqueeze(0).expand(n, -1, -1)
        x = self.input_proj(torch.cat([tokens, pos], dim=-1))
        x = torch.cat([x, self.style_token.expand(n, 1, -1)], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        image_tokens, style_state = x[:, : self.n_tokens], x[:, self.n_tokens]
        return self.output_proj(image_tokens), self.style_head(style_state)


def _make_activation(name: str) -> nn.Module:
    return nn.LeakyReLU(0.2) if name == "leakyrelu" else nn.GELU()


def _make_norm(name: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True) if name == "instance" else nn.Identity()


class EncoderBlock(nn.Module):
    """Two same-size 3x3 convolutions with normalization and activation."""

    def __init__(self, in_channels: int, out_channels: int, norm: str, activation: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            _make_norm(norm, out_channels),
            _make_activation(activation),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            _make_norm(norm, out_channels),
            _make_activation(activation),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Downsample(nn.Module):
    """Stride-2 3x3 convolution, channel count preserved."""

    def __init__(self, channels: int, activation: str):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            _make_activation(activation),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Upsample(nn.Module):
    """Nearest-neighbor doubling followed by a 3x3 convolution.

    The interpolate-then-convolve order avoids the checkerboard pattern of
    transposed convolutions.
    """

    def __init__(self, in_channels: int, out_channels: int, activation: str):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.act = _make_activation(activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.act(self.conv(x))


class ModulatedDecoderBlock(nn.Module):
    """Decoder level: style-modulated convolution over the skip concatenation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        style_dim: int,
        activation: str,
        use_style: bool = True,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.use_style = use_style
        self.project = StyleProjector(style_dim, in_channels)
        self.conv = StyleModulatedConv2d(in_channels, out_channels)
        self.act = _make_activation(activation)

    def forward(self, x: torch.Tensor, style_code: torch.Tensor) -> torch.Tensor:
        if self.use_style:
            style = self.project(style_code)
        else:
            style = x.new_ones(x.shape[0], self.in_channels)
        return self.act(self.conv(x, style))


class TranslationGenerator(nn.Module):
    """U-Net translator whose bottleneck infers a per-image style for the decoder.

    Input and output are [-1, 1] images of the configured square size. The
    bottleneck sees one token per 16x16 input patch.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        f1, f2, f3, f4 = cfg.unet_features
        act, norm = cfg.activation, cfg.norm
        style_dim = cfg.resolved_style_dim

        self.enc1 = EncoderBlock(cfg.in_channels, f1, norm, act)
        self.down1 = Downsample(f1, act)
        self.enc2 = EncoderBlock(f1, f2, norm, act)
        self.down2 = Downsample(f2, act)
        self.enc3 = EncoderBlock(f2, f3, norm, act)
        self.down3 = Downsample(f3, act)
        self.enc4 = EncoderBlock(f3, f4, norm, act)
        self.down4 = Downsample(f4, act)

        grid = cfg.token_grid
        self.evit = ExtendedViT(
            n_tokens=grid * grid,
            in_dim=f4,
            token_dim=cfg.token_dim,
            style_dim=style_dim,
            n_blocks=cfg.n_transformer_blocks,
            n_heads=cfg.resolved_heads,
        )

        self.up4 = Upsample(f4, f4, act)
        self.dec4 = ModulatedDecoderBlock(2 * f4, f4, style_dim, act, cfg.style_modulation)
        self.up3 = Upsample(f4, f3, act)
        self.dec3 = ModulatedDecoderBlock(2 * f3, f3, style_dim, act, cfg.style_modulation)
        self.up2 = Upsample(f3, f2, act)
        self.dec2 = ModulatedDecoderBlock(2 * f2, f2, style_dim, act, cfg.style_modulation)
        self.up1 = Upsample(f2, f1, act)
        self.dec1 = ModulatedDecoderBlock(2 * f1, f1, style_dim, act, cfg.style_modulation)
        self.output = nn.Conv2d(f1, cfg.out_channels, 3, padding=1)

        self.apply(_init_conv_linear)
        for block in (self.dec1, self.dec2, self.dec3, self.dec4):
            block.project.reset_parameters()

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        s1 = self.enc1(x)
        s2 = self.enc2(self.down1(s1))
        s3 = self.enc3(self.down2(s2))
        s4 = self.enc4(self.down3(s3))
        return self.down4(s4), [s1, s2, s3, s4]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != (size, size):
            raise ValueError(
                f"expected input [N, {self.cfg.in_channels}, {size}, {size}], got {tuple(x.shape)}"
            )
        z, skips = self.encode(x)
        n, f4, grid, _ = z.shape
        tokens = z.flatten(2).transpose(1, 2)  # (N, grid*grid, f4)
        tokens, style_code = self.evit(tokens)
        z = tokens.transpose(1, 2).reshape(n, f4, grid, grid)

        d = self.dec4(torch.cat([skips[3], self.up4(z)], dim=1), style_code)
        d = self.dec3(torch.cat([skips[2], self.up3(d)], dim=1), style_code)
        d = self.dec2(torch.cat([skips[1], self.up2(d)], dim=1), style_code)
        d = self.dec1(torch.cat([skips[0], self.up1(d)], dim=1), style_code)
        return torch.tanh(self.output(d))

    def infer_style(self, x: torch.Tensor) -> torch.Tensor:
        """Style code only, without running the decoder."""
        z, _ = self.encode(x)
        _, style_code = self.evit(z.flatten(2).transpose(1, 2))
        return style_code

    def project_style(self, style_code: torch.Tensor, level: int) -> torch.Tensor:
        """Per-channel scales for decoder level 1..4 (1 is the finest)."""
        blocks = {1: self.dec1, 2: self.dec2, 3: self.dec3, 4: self.dec4}
        if level not in blocks:
            raise ValueError(f"decoder level must be 1..4, got {level}")
        return blocks[level].project(style_code)

    def decoder_in_channels(self) -> tuple[int, int, int, int]:
        f1, f2, f3, f4 = self.cfg.unet_features
        return (2 * f1, 2 * f2, 2 * f3, 2 * f4)


def _init_conv_linear(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
