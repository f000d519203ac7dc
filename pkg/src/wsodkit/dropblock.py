"""Concrete DropBlock: a learned, adversarial structured dropout on RoI features.

A small residual network predicts a per-cell drop probability for every RoI,
clamped at ``tau``. Drop centres are sampled with a two-way Gumbel-Softmax
(hard in the forward pass, soft gradient in the backward pass), grown into
``block_size`` squares, and the surviving features are rescaled by
``area / surviving area``. The network's parameters are trained to *increase*
the detection loss; see :func:`flip_gradients` and :func:`minmax_step`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

DEFAULT_TAU = 0.3
DEFAULT_BLOCK_SIZE = 3
DEFAULT_TEMPERATURE = 0.5

# log(0) stand-in: larger in magnitude than any difference of two Gumbel draws
# from float32/float64 uniforms, so p == 0 can never be sampled as "drop".
_LOG_ZERO_CLAMP = 1e-20


class DegenerateMask(RuntimeError):
    """Every cell of an RoI was dropped."""


@dataclass
class DropState:
    prob_map: Tensor  # (N, H, W) clamped drop probabilities
    hard_mask: Tensor  # (N, H, W), 1 = keep, 0 = dropped centre
    expanded_mask: Tensor  # (N, H, W) after block expansion
    norm_factor: Tensor  # (N,)
    degenerate: Tensor  # (N,) bool, all cells dropped


class ProbabilityNet(nn.Module):
    """Residual block mapping RoI features ``(N, C, H, W)`` to a one-channel map.

    The skip path is a 1x1 convolution straight to one channel; the residual
    path is conv3x3 -> ReLU -> conv3x3 with its last layer zero-initialised, so
    at init the output is ``sigmoid(skip(x))``.
    """

    def __init__(self, in_channels: int, width: int = 64, init_prob: float = 0.05):
        super().__init__()
        self.skip = nn.Conv2d(in_channels, 1, kernel_size=1)
        self.conv1 = nn.Conv2d(in_channels, width, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(width, 1, kernel_size=3, padding=1)
        nn.init.normal_(self.skip.weight, std=0.01)
        nn.init.constant_(self.skip.bias, math.log(init_prob / (1.0 - init_prob)))
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: Tensor) -> Tensor:
        out = self.skip(x) + self.conv2(F.relu(self.conv1(x)))
        return torch.sigmoid(out).squeeze(1)


def prob_map(net: nn.Module, roi_features: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Clamped drop-probability map ``min(net(x), tau)``, shape ``(N, H, W)``."""
    return torch.clamp(net(roi_features), max=tau)


def center_rate(p: Tensor, block_size: int) -> Tensor:
    """Per-cell centre probability giving an expected dropped area of about ``p``.

    Each centre removes ``block_size**2`` cells, so centres are sampled at
    ``p / block_size**2`` (the DropBlock gamma, without its border correction).
    """
    return p / float(block_size * block_size)


def sample_gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    """Two independent Gumbel(0, 1) draws per cell, shape ``(*shape, 2)``."""
    u = torch.rand(*shape, 2, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u.clamp_min(tiny)))


def gumbel_hard_mask(
    prob: Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
    noise: Tensor | None = None,
    generator: torch.Generator | None = None,
    hard: bool = True,
) -> Tensor:
    """Sample a keep-mask (1 = keep, 0 = drop) from independent per-cell Bernoullis.

    ``prob`` is the drop probability per cell. With ``hard=True`` the forward
    value is exactly binary and gradients come from the relaxed sample
    (straight-through); ``hard=False`` returns the relaxed mask itself.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = sample_gumbel_noise(prob.shape, generator=generator, dtype=prob.dtype)
    noise = noise.to(prob.dtype)
    logit_drop = torch.log(prob.clamp_min(_LOG_ZERO_CLAMP)) + noise[..., 0]
    logit_keep = torch.log1p(-prob.clamp(max=1.0 - 1e-7)) + noise[..., 1]
    soft_drop = torch.sigmoid((logit_drop - logit_keep) / temperature)
    if not hard:
        return 1.0 - soft_drop
    hard_drop = (logit_drop > logit_keep).to(prob.dtype)
    # soft - soft.detach() is exactly zero, so the forward value stays binary
    drop = hard_drop + (soft_drop - soft_drop.detach())
    return 1.0 - drop


def expand_and_normalize(hard_mask: Tensor, block_size: int = DEFAULT_BLOCK_SIZE, strict: bool = False):
    """Grow every dropped centre into a ``block_size`` square (clipped at borders).

    Returns ``(expanded_mask, norm_factor, degenerate)`` where ``norm_factor`` is
    ``H*W / surviving cells`` per RoI. An all-dropped RoI gets the capped factor
    ``H*W`` and is flagged; with ``strict=True`` it raises :class:`DegenerateMask`.
    """
    if block_size < 1 or block_size % 2 == 0:
        raise ValueError(f"block_size must be a positive odd integer, got {block_size}")
    squeeze = hard_mask.dim() == 2
    mask = hard_mask.unsqueeze(0) if squeeze else hard_mask
    h, w = mask.shape[-2:]
    if block_size > min(h, w):
        raise ValueError(f"block_size {block_size} exceeds map size {h}x{w}")
    dropped = 1.0 - mask
    if block_size > 1:
        dropped = F.max_pool2d(dropped.unsqueeze(1), block_size, stride=1, padding=block_size // 2).squeeze(1)
    expanded = 1.0 - dropped
    kept = expanded.sum(dim=(-2, -1))
    degenerate = kept.detach() <= 0.5
    if strict and bool(degenerate.any()):
        raise DegenerateMask(f"{int(degenerate.sum())} RoI(s) fully dropped")
    norm = (h * w) / torch.where(degenerate, torch.ones_like(kept), kept)
    if squeeze:
        return expanded[0], norm[0], degenerate[0]
    return expanded, norm, degenerate


def apply(roi_features: Tensor, expanded_mask: Tensor, norm_factor: Tensor, training: bool = True) -> Tensor:
    """Mask ``(N, C, H, W)`` features across channels and rescale; identity at inference."""
    if not training:
        return roi_features
    return roi_features * expanded_mask.unsqueeze(1) * norm_factor.view(-1, 1, 1, 1)


class ConcreteDropBlock(nn.Module):
    def __init__(
        self,
        in_channels: int,
        tau: float = DEFAULT_TAU,
        block_size: int = DEFAULT_BLOCK_SIZE,
        temperature: float = DEFAULT_TEMPERATURE,
        width: int = 64,
        init_prob: float = 0.05,
    ):
        super().__init__()
        self.tau = tau
        self.block_size = block_size
        self.temperature = temperature
        self.net = ProbabilityNet(in_channels, width=width, init_prob=init_prob)
        self.last_state: DropState | None = None

    def forward(self, x: Tensor, noise: Tensor | None = None, generator: torch.Generator | None = None) -> Tensor:
        if not self.training:
            return x
        p = prob_map(self.net, x, self.tau)
        mask = gumbel_hard_mask(center_rate(p, self.block_size), self.temperature, noise=noise, generator=generator)
        expanded, norm, degenerate = expand_and_normalize(mask, self.block_size)
        self.last_state = DropState(p.detach(), mask.detach(), expanded.detach(), norm.detach(), degenerate)
        return apply(x, expanded, norm, training=True)


class FixedDropBlock(nn.Module):
    """Non-parametric DropBlock with a constant drop probability (ablation reference)."""

    def __init__(self, rate: float = DEFAULT_TAU, block_size: int = DEFAULT_BLOCK_SIZE):
        super().__init__()
        self.rate = rate
        self.block_size = block_size
        self.last_state: DropState | None = None

    def forward(self, x: Tensor, noise: Tensor | None = None, generator: torch.Generator | None = None) -> Tensor:
        if not self.training:
            return x
        n, _, h, w = x.shape
        p = torch.full((n, h, w), self.rate, dtype=x.dtype, device=x.device)
        if noise is None:
            noise = sample_gumbel_noise((n, h, w), generator=generator, dtype=x.dtype)
        keep = (noise[..., 0] + torch.log(center_rate(p, self.block_size))
                <= noise[..., 1] + torch.log1p(-center_rate(p, self.block_size))).to(x.dtype)
        expanded, norm, degenerate = expand_and_normalize(keep, self.block_size)
        self.last_state = DropState(p, keep, expanded, norm, degenerate)
        return apply(x, expanded, norm, training=True)


def flip_gradients(params: Iterable[Tensor]) -> None:
    """Negate accumulated gradients so a descent optimizer performs ascent."""
    for prm in params:
        if prm.grad is not None:
            prm.grad.neg_()


def minmax_step(loss: Tensor, optimizer: torch.optim.Optimizer, theta_params: Iterable[Tensor]) -> None:
    """One joint step: descend on every parameter except ``theta_params``, ascend on those."""
    optimizer.zero_grad()
    loss.backward()
    flip_gradients(theta_params)
    optimizer.step()
