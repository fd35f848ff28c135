"""Pyramid time-series transformer encoder, conditional decoder, and latent heads.

The encoder shrinks the time axis stage by stage (overlapping patch embedding,
stride 2 by default) while widening channels, then mean-pools the final tokens
for classification. The generative extension adds label-conditioned Gaussian
latent heads, a transformer decoder that reconstructs the input series from
(z, y), an auxiliary classifier on z, and per-class latent centers scored by
cosine similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .distributions import GaussianParams, sample_concrete, sample_gaussian
from .layers import PatchEmbed, ScaleNorm, TransformerLayer


@dataclass(frozen=True)
class StageConfig:
    """One pyramid stage: patch conv geometry plus transformer layer shape."""

    kernel_size: int = 3
    stride: int = 2
    channels: int = 32
    depth: int = 1
    heads: int = 2
    ffn_expansion: int = 1

    def __post_init__(self):
        if self.stride < 1 or self.kernel_size < self.stride:
            raise ValueError("need kernel_size >= stride >= 1")
        if self.channels % self.heads != 0:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.depth < 1 or self.ffn_expansion < 1:
            raise ValueError("depth and ffn_expansion must be >= 1")


def default_stages() -> tuple[StageConfig, ...]:
    return (
        StageConfig(channels=32, heads=2),
        StageConfig(channels=64, heads=4),
        StageConfig(channels=128, heads=8),
        StageConfig(channels=256, heads=16),
    )


@dataclass(frozen=True)
class DecoderConfig:
    channels: int = 128
    depth: int = 4
    heads: int = 8
    ffn_expansion: int = 1
    max_len: int = 512
    length_divisor: int = 1  # decode ceil(T / divisor) tokens, nearest-upsample to T

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError("decoder channels not divisible by heads")
        if self.length_divisor < 1:
            raise ValueError("length_divisor must be >= 1")


@dataclass
class ModelConfig:
    """Full network hyperparameters (encoder pyramid plus generative parts)."""

    input_dim: int
    num_classes: int
    stages: tuple[StageConfig, ...] = field(default_factory=default_stages)
    latent_dim: int = 256
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    centers_mode: str = "learnable"  # "learnable" | "fixed_orthonormal"
    centers_seed: int = 0
    isotropic_gaussian: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if not self.stages:
            raise ValueError("need at least one stage")
        self.stages = tuple(
            StageConfig(**s) if isinstance(s, dict) else s for s in self.stages
        )
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.centers_mode not in ("learnable", "fixed_orthonormal"):
            raise ValueError(f"unknown centers_mode {self.centers_mode!r}")
        if self.centers_mode == "fixed_orthonormal" and self.latent_dim < self.num_classes:
            raise ValueError(
                "fixed_orthonormal centers need latent_dim >= num_classes "
                f"({self.latent_dim} < {self.num_classes})"
            )

    @property
    def encoder_dim(self) -> int:
        return self.stages[-1].channels


class PTSTEncoder(nn.Module):
    """Pyramid encoder with a linear recognition head on mean-pooled tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stages_cfg = cfg.stages
        stages = []
        in_ch = cfg.input_dim
        for s in cfg.stages:
            blocks: list[nn.Module] = [PatchEmbed(in_ch, s.channels, s.kernel_size, s.stride)]
            blocks += [
                TransformerLayer(s.channels, s.heads, s.ffn_expansion, cfg.dropout)
                for _ in range(s.depth)
            ]
            blocks.append(ScaleNorm(s.channels))
            stages.append(nn.Sequential(*blocks))
            in_ch = s.channels
        self.stages = nn.ModuleList(stages)
        self.recognition = nn.Linear(in_ch, cfg.num_classes)

    def stage_lengths(self, t: int) -> list[int]:
        """Token count after each stage for an input of length t."""
        lengths = []
        for s in self.stages_cfg:
            t = PatchEmbed.out_len(t, s.kernel_size, s.stride)
            lengths.append(t)
        return lengths

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """[B, T, F] -> (pooled [B, C_last], y_logits [B, K])."""
        if x.ndim != 3:
            raise ValueError(f"expected [B, T, F], got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("encoder input must be finite")
        for i, s in enumerate(self.stages_cfg):
            if PatchEmbed.out_len(x.shape[1], s.kernel_size, s.stride) < 1:
                raise ValueError(f"series too short: stage {i} would produce zero tokens")
            x = self.stages[i](x)
        pooled = x.mean(dim=1)
        return pooled, self.recognition(pooled)


class LatentHeads(nn.Module):
    """q(z | x, y): linear mean / log-std heads on [pooled, embed(y)]."""

    def __init__(self, encoder_dim: int, num_classes: int, latent_dim: int, isotropic: bool):
        super().__init__()
        self.latent_dim = latent_dim
        self.isotropic = isotropic
        self.embed_y = nn.Linear(num_classes, encoder_dim)
        self.mean = nn.Linear(2 * encoder_dim, latent_dim)
        self.log_std = nn.Linear(2 * encoder_dim, 1 if isotropic else latent_dim)

    def forward(self, pooled: Tensor, y_cond: Tensor) -> GaussianParams:
        h = torch.cat([pooled, self.embed_y(y_cond)], dim=-1)
        log_std = self.log_std(h)
        if self.isotropic:
            log_std = log_std.expand(-1, self.latent_dim)
        return GaussianParams(self.mean(h), log_std)


class AuxClassifier(nn.Module):
    """Two-layer MLP classifier on the latent sample."""

    def __init__(self, latent_dim: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, latent_dim),
            nn.GELU(),
            nn.Linear(latent_dim, num_classes),
        )

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


class ClassCenters(nn.Module):
    """Per-class latent centers, either frozen orthonormal rows or learnable."""

    def __init__(self, num_classes: int, latent_dim: int, mode: str, seed: int = 0):
        super().__init__()
        self.mode = mode
        gen = torch.Generator().manual_seed(seed)
        if mode == "fixed_orthonormal":
            if latent_dim < num_classes:
                raise ValueError("orthonormal centers need latent_dim >= num_classes")
            raw = torch.randn(latent_dim, num_classes, generator=gen, dtype=torch.float64)
            q, _ = torch.linalg.qr(raw)
            self.centers = nn.Parameter(q.T.contiguous().float(), requires_grad=False)
        elif mode == "learnable":
            raw = torch.randn(num_classes, latent_dim, generator=gen)
            self.centers = nn.Parameter(F.normalize(raw, dim=-1))
        else:
            raise ValueError(f"unknown centers mode {mode!r}")

    def forward(self, z: Tensor) -> Tensor:
        return cosine_scores(z, self.centers)


def cosine_scores(z: Tensor, centers: Tensor) -> Tensor:
    """cos(z_b, c_k) for all pairs, eps-guarded against zero norms: [B, K]."""
    z_norm = z / z.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    c_norm = centers / centers.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return z_norm @ c_norm.T


class TransformerDecoder(nn.Module):
    """Reconstruct [B, T, F] from (z, y): per-step tokens proj(z) + proj(y) + pos."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.decoder
        self.cfg = d
        self.proj_z = nn.Linear(cfg.latent_dim, d.channels)
        self.proj_y = nn.Linear(cfg.num_classes, d.channels)
        self.pos = nn.Parameter(torch.randn(d.max_len, d.channels) * 0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(d.channels, d.heads, d.ffn_expansion, cfg.dropout)
            for _ in range(d.depth)
        )
        self.out_norm = ScaleNorm(d.channels)
        self.out = nn.Linear(d.channels, cfg.input_dim)

    def forward(self, z: Tensor, y_cond: Tensor, t: int) -> Tensor:
        t_dec = math.ceil(t / self.cfg.length_divisor)
        if t_dec > self.cfg.max_len:
            raise ValueError(
                f"requested length {t} (decoded {t_dec}) exceeds max_len {self.cfg.max_len}"
            )
        tok = (self.proj_z(z) + self.proj_y(y_cond))[:, None, :] + self.pos[None, :t_dec, :]
        for layer in self.layers:
            tok = layer(tok)
        x_hat = self.out(self.out_norm(tok))
        if t_dec != t:
            x_hat = F.interpolate(x_hat.transpose(1, 2), size=t, mode="nearest").transpose(1, 2)
        return x_hat


@dataclass
class ModelOutputs:
    """Everything one forward pass produces; generative fields are None in ptst mode."""

    y_logits: Tensor
    pooled: Tensor
    y_cond: Optional[Tensor] = None
    gauss: Optional[GaussianParams] = None
    z: Optional[Tensor] = None
    z_logits: Optional[Tensor] = None
    cos_scores: Optional[Tensor] = None
    x_hat: Optional[Tensor] = None
    class_gauss: Optional[GaussianParams] = None  # [B, K, D] when requested
    cos_temperature: Optional[Tensor] = None
    centers: Optional[Tensor] = None


class TVPTSTNetwork(nn.Module):
    """Encoder-only classifier (mode "ptst") or the full generative model ("tvae")."""

    def __init__(self, cfg: ModelConfig, mode: str = "tvae"):
        super().__init__()
        if mode not in ("ptst", "tvae"):
            raise ValueError(f"unknown mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.encoder = PTSTEncoder(cfg)
        if mode == "tvae":
            self.latent_heads = LatentHeads(
                cfg.encoder_dim, cfg.num_classes, cfg.latent_dim, cfg.isotropic_gaussian
            )
            self.decoder = TransformerDecoder(cfg)
            self.aux_classifier = AuxClassifier(cfg.latent_dim, cfg.num_classes)
            self.centers = ClassCenters(
                cfg.num_classes, cfg.latent_dim, cfg.centers_mode, cfg.centers_seed
            )
            # softmax temperature over cosine scores, used by one ablation toggle
            self.cos_temperature = nn.Parameter(torch.tensor(10.0))

    def forward(
        self,
        x: Tensor,
        y_onehot: Optional[Tensor] = None,
        label_mask: Optional[Tensor] = None,
        eps: Optional[Tensor] = None,
        gumbel: Optional[Tensor] = None,
        temperature: float = 1.0,
        decode: bool = True,
        per_class_posteriors: bool = False,
    ) -> ModelOutputs:
        pooled, y_logits = self.encoder(x)
        if self.mode == "ptst":
            return ModelOutputs(y_logits=y_logits, pooled=pooled)

        b, k = y_logits.shape
        if label_mask is None:
            label_mask = torch.zeros(b, dtype=torch.bool, device=x.device)
        if label_mask.any() and y_onehot is None:
            raise ValueError("labelled records need y_onehot")
        if not label_mask.all():
            if gumbel is None:
                raise ValueError("unlabelled records need gumbel noise for the relaxed sample")
            y_sample = sample_concrete(y_logits, temperature, gumbel)
        else:
            y_sample = None

        if label_mask.all():
            y_cond = y_onehot.to(y_logits.dtype)
        elif not label_mask.any():
            y_cond = y_sample
        else:
            y_cond = torch.where(label_mask[:, None], y_onehot.to(y_logits.dtype), y_sample)

        gauss = self.latent_heads(pooled, y_cond)
        if eps is None:
            raise ValueError("forward needs explicit eps noise for the latent sample")
        z = sample_gaussian(gauss, eps)
        outputs = ModelOutputs(
            y_logits=y_logits,
            pooled=pooled,
            y_cond=y_cond,
            gauss=gauss,
            z=z,
            z_logits=self.aux_classifier(z),
            cos_scores=self.centers(z),
            cos_temperature=self.cos_temperature,
            centers=self.centers.centers,
        )
        if decode:
            outputs.x_hat = self.decoder(z, y_cond, x.shape[1])
        if per_class_posteriors:
            outputs.class_gauss = self.per_class_posteriors(pooled)
        return outputs

    def per_class_posteriors(self, pooled: Tensor) -> GaussianParams:
        """q(z | x, y=k) for every class: GaussianParams with [B, K, D] fields."""
        k = self.cfg.num_classes
        eye = torch.eye(k, dtype=pooled.dtype, device=pooled.device)
        means, log_stds = [], []
        for c in range(k):
            y = eye[c].expand(pooled.shape[0], k)
            g = self.latent_heads(pooled, y)
            means.append(g.mean)
            log_stds.append(g.log_std)
        return GaussianParams(torch.stack(means, dim=1), torch.stack(log_stds, dim=1))

    @torch.no_grad()
    def infer(self, x: Tensor) -> ModelOutputs:
        """Deterministic inference, posterior means only (no sampling).

        z and the Z head condition on the argmax of the recognition logits.
        The cosine head instead scores the latent conditioned on the uniform
        simplex: a label-agnostic posterior mean varies only through the
        encoder features, so this head reports whether the latent space itself
        separates the classes rather than echoing the recognition argmax back
        through the class embedding.
        """
        pooled, y_logits = self.encoder(x)
        if self.mode == "ptst":
            return ModelOutputs(y_logits=y_logits, pooled=pooled)
        k = self.cfg.num_classes
        y_cond = F.one_hot(y_logits.argmax(dim=-1), k).to(y_logits.dtype)
        gauss = self.latent_heads(pooled, y_cond)
        z = gauss.mean
        neutral = torch.full_like(y_cond, 1.0 / k)
        z_neutral = self.latent_heads(pooled, neutral).mean
        return ModelOutputs(
            y_logits=y_logits,
            pooled=pooled,
            y_cond=y_cond,
            gauss=gauss,
            z=z,
            z_logits=self.aux_classifier(z),
            cos_scores=self.centers(z_neutral),
            cos_temperature=self.cos_temperature,
            centers=self.centers.centers,
        )


def build_network(cfg: ModelConfig, mode: str = "tvae", seed: int = 0) -> TVPTSTNetwork:
    """Construct a network with seeded initialization."""
    torch.manual_seed(seed)
    return TVPTSTNetwork(cfg, mode=mode)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
