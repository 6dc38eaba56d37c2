"""Adversarial, reconstruction, consistency and gradient-penalty losses.

The adversarial criterion is least squares against 0/1 labels; all
reconstruction-style terms are mean absolute error. Critics are passed as
callables so the same penalty code serves the full discriminator (with its
cache bank bound in a closure) and small analytic probes in tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch.nn import functional as F

from .config import LossConfig

Critic = Callable[[torch.Tensor], torch.Tensor]


def gan_loss(scores: torch.Tensor, label: float) -> torch.Tensor:
    """Mean squared deviation of the score map from a constant label."""
    return (scores - label).pow(2).mean()


def disc_loss(critic: Critic, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Push real scores toward 1 and fake scores toward 0.

    ``fake`` should already be detached from the generator graph.
    """
    return gan_loss(critic(fake), 0.0) + gan_loss(critic(real), 1.0)


def reconstruction_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def cycle_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute error of the round-trip reconstruction."""
    return reconstruction_loss(original, reconstructed)


def identity_loss(original: torch.Tensor, mapped: torch.Tensor) -> torch.Tensor:
    """Mean absolute error when feeding a generator its own target domain."""
    return reconstruction_loss(original, mapped)


def consistency_loss(source: torch.Tensor, translated: torch.Tensor, size: int = 32) -> torch.Tensor:
    """Mean absolute error between area-averaged downsizings of both images.

    Area averaging makes the term blind to zero-mean high-frequency detail
    whose period divides the pooling window, so it constrains only the
    low-frequency content the translation should preserve.
    """
    if source.shape != translated.shape:
        raise ValueError(f"shape mismatch {tuple(source.shape)} vs {tuple(translated.shape)}")
    a = F.adaptive_avg_pool2d(source, size)
    b = F.adaptive_avg_pool2d(translated, size)
    return (a - b).abs().mean()


def _input_gradients(critic: Critic, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    scores = critic(x)
    grads = torch.autograd.grad(scores.sum(), x, create_graph=True)[0]
    return grads.flatten(1)


def gradient_penalty(critic: Critic, real: torch.Tensor, weight: float) -> torch.Tensor:
    """Zero-centered penalty: weight/2 times the mean squared input-gradient norm.

    Evaluated on real samples only. The graph is kept so the penalty can be
    backpropagated into the critic parameters.
    """
    grads = _input_gradients(critic, real)
    return 0.5 * weight * grads.pow(2).sum(dim=1).mean()


def legacy_gradient_penalty(
    critic: Critic, real: torch.Tensor, weight: float, gamma: float
) -> torch.Tensor:
    """Penalty pulling the input-gradient norm toward a target gamma."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    norms = _input_gradients(critic, real).norm(2, dim=1)
    return weight * ((norms - gamma).pow(2) / gamma**2).mean()


@dataclass
class GeneratorLossParts:
    """Unweighted generator loss terms; identity and consistency may be absent."""

    gan_a: torch.Tensor
    gan_b: torch.Tensor
    cyc_a: torch.Tensor
    cyc_b: torch.Tensor
    idt_a: torch.Tensor | None = None
    idt_b: torch.Tensor | None = None
    consist_a: torch.Tensor | None = None
    consist_b: torch.Tensor | None = None


def total_generator_loss(parts: GeneratorLossParts, weights: LossConfig) -> torch.Tensor:
    """Weighted sum of the generator terms; absent optional terms count as 0."""
    total = parts.gan_a + parts.gan_b + weights.lambda_cyc * (parts.cyc_a + parts.cyc_b)
    if weights.lambda_idt > 0:
        if parts.idt_a is None or parts.idt_b is None:
            raise ValueError("identity terms required when lambda_idt > 0")
        total = total + weights.lambda_idt * (parts.idt_a + parts.idt_b)
    if weights.lambda_consist > 0:
        if parts.consist_a is None or parts.consist_b is None:
            raise ValueError("consistency terms required when lambda_consist > 0")
        total = total + weights.lambda_consist * (parts.consist_a + parts.consist_b)
    return total
