"""Transformer building blocks shared by the encoder and decoder."""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

SCALE_NORM_EPS = 1e-12


def scale_norm(h: Tensor, g: Tensor | float) -> Tensor:
    """Scale the last dim to norm |g|: g * h / max(||h||, eps)."""
    norm = h.norm(dim=-1, keepdim=True).clamp_min(SCALE_NORM_EPS)
    return g * h / norm


class ScaleNorm(nn.Module):
    """Single-scalar norm layer; init g = sqrt(dim) as in the source method."""

    def __init__(self, dim: int):
        super().__init__()
        self.g = nn.Parameter(torch.tensor(math.sqrt(dim)))

    def forward(self, h: Tensor) -> Tensor:
        return scale_norm(h, self.g)


class PatchEmbed(nn.Module):
    """Overlapping patch embedding: Conv1d over time, [B, T, C_in] -> [B, T', C_out].

    With padding floor(kernel/2) the output length is
    floor((T + 2*floor(kernel/2) - kernel) / stride) + 1.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        if kernel_size < stride or stride < 1:
            raise ValueError("need kernel_size >= stride >= 1")
        self.conv = nn.Conv1d(
            in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2
        )

    @staticmethod
    def out_len(t: int, kernel_size: int, stride: int) -> int:
        return (t + 2 * (kernel_size // 2) - kernel_size) // stride + 1

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class ConvPosEnc(nn.Module):
    """Conditional positional encoding: depthwise temporal conv added residually."""

    def __init__(self, dim: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(x.transpose(1, 2)).transpose(1, 2)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * expansion),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(dim * expansion, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class TransformerLayer(nn.Module):
    """Positional conv, then pre-norm attention and feed-forward residual blocks:

        x = conv_pe(x)               (residual add inside)
        x = x + MHSA(ScaleNorm(x))
        x = x + FFD(ScaleNorm(x))
    """

    def __init__(self, dim: int, heads: int, expansion: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.pos_enc = ConvPosEnc(dim)
        self.norm_attn = ScaleNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm_ffd = ScaleNorm(dim)
        self.ffd = FeedForward(dim, expansion, dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.pos_enc(x)
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.ffd(self.norm_ffd(x))
        return x
