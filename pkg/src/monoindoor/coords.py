"""Coordinate channels for the pose-network input."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn


class CoordChannels(NamedTuple):
    i_channel: torch.Tensor  # row index scaled to [-1, 1]
    j_channel: torch.Tensor  # column index scaled to [-1, 1]

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.i_channel, self.j_channel])


def make_coord_channels(height: int, width: int, dtype=torch.float32) -> CoordChannels:
    if height < 2 or width < 2:
        raise ValueError(f"coordinate channels need height, width >= 2, got {height}x{width}")
    rows = torch.arange(height, dtype=torch.float64) * (2.0 / (height - 1)) - 1.0
    cols = torch.arange(width, dtype=torch.float64) * (2.0 / (width - 1)) - 1.0
    i = rows[:, None].expand(height, width).to(dtype)
    j = cols[None, :].expand(height, width).to(dtype)
    return CoordChannels(i.contiguous(), j.contiguous())


def coord_batch(x: torch.Tensor) -> torch.Tensor:
    """``(B,2,H,W)`` coordinate channels matching ``x``."""
    b, _, h, w = x.shape
    return make_coord_channels(h, w, x.dtype).stacked().expand(b, 2, h, w)


def build_pose_input(target: torch.Tensor, source: torch.Tensor, use_coords: bool) -> torch.Tensor:
    """Channels ``(r1,g1,b1,r2,g2,b2[,i,j])``."""
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(source.shape)}")
    parts = [target, source]
    if use_coords:
        parts.append(coord_batch(target))
    return torch.cat(parts, dim=1)


def widen_first_conv(weights: torch.Tensor, extra_channels: int, policy: str = "zeros",
                     seed: int | None = None) -> torch.Tensor:
    """Append ``extra_channels`` input kernels to a conv weight ``(O, I, kh, kw)``.

    The original kernels are copied verbatim. New kernels are zero (``zeros``)
    or drawn from a seeded Kaiming-uniform distribution (``random``).
    """
    if extra_channels < 0:
        raise ValueError("extra_channels must be >= 0")
    if extra_channels == 0:
        return weights.clone()
    o, _, kh, kw = weights.shape
    if policy == "zeros":
        extra = torch.zeros(o, extra_channels, kh, kw, dtype=weights.dtype)
    elif policy == "random":
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        bound = 1.0 / (weights.shape[1] * kh * kw) ** 0.5
        extra = (torch.rand(o, extra_channels, kh, kw, generator=gen, dtype=weights.dtype) * 2 - 1) * bound
    else:
        raise ValueError(f"unknown init policy {policy!r}")
    return torch.cat([weights.detach(), extra], dim=1)


def widened_conv(conv: nn.Conv2d, extra_channels: int, policy: str = "zeros",
                 seed: int | None = None) -> nn.Conv2d:
    """A copy of ``conv`` accepting ``extra_channels`` more inputs."""
    new = nn.Conv2d(conv.in_channels + extra_channels, conv.out_channels, conv.kernel_size,
                    conv.stride, conv.padding, bias=conv.bias is not None,
                    padding_mode=conv.padding_mode)
    with torch.no_grad():
        new.weight.copy_(widen_first_conv(conv.weight, extra_channels, policy, seed))
        if conv.bias is not None:
            new.bias.copy_(conv.bias)
    return new
