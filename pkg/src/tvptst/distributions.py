"""Latent-variable building blocks with externalized randomness.

Sampling functions take noise as an explicit argument so training code can
seed and replay draws; nothing here touches a global RNG.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

LOG_STD_MIN = -10.0
LOG_STD_MAX = 10.0
_SIMPLEX_ATOL = 1e-6


@dataclass
class GaussianParams:
    """Diagonal Gaussian q(z) with mean and log standard deviation.

    log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX] at construction; the
    clamp participates in autograd (zero gradient outside the range).
    """

    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != log_std shape {tuple(self.log_std.shape)}"
            )
        if not torch.isfinite(self.mean).all():
            raise ValueError("mean must be finite")
        if not torch.isfinite(self.log_std).all():
            raise ValueError("log_std must be finite")
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()


def sample_gaussian(params: GaussianParams, eps: Tensor) -> Tensor:
    """Reparameterized draw mean + exp(log_std) * eps."""
    if eps.shape != params.mean.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != mean shape {tuple(params.mean.shape)}")
    return params.mean + params.std * eps


def sample_concrete(logits: Tensor, temperature: float, gumbel: Tensor) -> Tensor:
    """Relaxed one-hot sample softmax((logits + gumbel) / temperature).

    Rows of the result lie on the simplex; lower temperatures sharpen them.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if gumbel.shape != logits.shape:
        raise ValueError(
            f"gumbel shape {tuple(gumbel.shape)} != logits shape {tuple(logits.shape)}"
        )
    return torch.softmax((logits + gumbel) / temperature, dim=-1)


def gumbel_max(logits: Tensor, gumbel: Tensor) -> Tensor:
    """Hard categorical sample argmax(logits + gumbel); ties pick the lowest index."""
    if gumbel.shape != logits.shape:
        raise ValueError(
            f"gumbel shape {tuple(gumbel.shape)} != logits shape {tuple(logits.shape)}"
        )
    return torch.argmax(logits + gumbel, dim=-1)


def gumbel_from_uniform(u: Tensor) -> Tensor:
    """Map Uniform(0, 1) draws to standard Gumbel noise -log(-log(u))."""
    return -torch.log(-torch.log(u.clamp(1e-20, 1.0 - 1e-7)))


def draw_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return gumbel_from_uniform(u)


def kl_gaussian_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last dim."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError("q and p must share the event dimension")
    var_q = (2.0 * q.log_std).exp()
    var_p = (2.0 * p.log_std).exp()
    term = (p.log_std - q.log_std) + 0.5 * (var_q + (q.mean - p.mean) ** 2) / var_p - 0.5
    return term.sum(dim=-1)


def kl_categorical(q_probs: Tensor, p_probs: Tensor) -> Tensor:
    """KL(q || p) over the last dim with 0*log(0) := 0 and +inf on support violation."""
    _check_simplex(q_probs, "q_probs")
    _check_simplex(p_probs, "p_probs")
    log_ratio = torch.where(
        q_probs > 0,
        torch.log(q_probs.clamp_min(1e-300)) - torch.log(p_probs.clamp_min(0.0)),
        torch.zeros_like(q_probs),
    )
    return (q_probs * log_ratio).sum(dim=-1)


def _check_simplex(probs: Tensor, name: str) -> None:
    if probs.min() < -_SIMPLEX_ATOL:
        raise ValueError(f"{name} has negative entries")
    sums = probs.sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=_SIMPLEX_ATOL):
        raise ValueError(f"{name} rows must sum to 1 within {_SIMPLEX_ATOL}")
