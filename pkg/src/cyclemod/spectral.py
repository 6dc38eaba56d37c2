"""Spectral weight normalization through persistent power iteration."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


def _l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / (v.norm() + eps)


def spectral_sigma(
    weight: torch.Tensor, u: torch.Tensor, n_steps: int = 1, update: bool = True
) -> torch.Tensor:
    """Top-singular-value estimate of ``weight`` flattened to [out, -1].

    ``u`` is the persistent left singular vector estimate, refined in place
    by ``n_steps`` power iterations when ``update`` is set. The returned
    sigma keeps gradient with respect to ``weight`` only; the iteration
    vectors are treated as constants.
    """
    if n_steps < 0:
        raise ValueError("n_steps cannot be negative")
    if weight.dim() < 2:
        raise ValueError("weight needs at least 2 dimensions to flatten to a matrix")
    if u.dim() != 1 or u.numel() != weight.shape[0]:
        raise ValueError("u must be a vector of length weight.shape[0]")
    w = weight.flatten(1)
    with torch.no_grad():
        u_est = u
        v_est = None
        for _ in range(n_steps):
            v_est = _l2_normalize(w.t() @ u_est)
            u_est = _l2_normalize(w @ v_est)
        if v_est is None:
            v_est = _l2_normalize(w.t() @ u_est)
        if update:
            u.copy_(u_est)
    return torch.dot(u_est, w @ v_est)


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_steps: int = 1, update: bool = True
) -> torch.Tensor:
    """``weight`` divided by its estimated top singular value."""
    return weight / spectral_sigma(weight, u, n_steps=n_steps, update=update)


class SpectralConv2d(nn.Module):
    """Conv2d dividing its weight by a running top-singular-value estimate.

    Training-mode forwards run one power iteration step each; eval reuses
    the stored estimate without mutating it. With ``enabled=False`` the
    layer is a plain convolution.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        enabled: bool = True,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.enabled = enabled
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.normal_(self.weight, 0.0, 0.02)
        self.register_buffer("u", _l2_normalize(torch.randn(out_channels)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.weight
        if self.enabled:
            w = spectral_normalize(w, self.u, n_steps=1, update=self.training)
        return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)
