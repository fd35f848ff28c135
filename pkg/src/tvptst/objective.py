"""Training objectives: discriminative CE, the cosine-alignment generative
objective, and the Gaussian-KL baseline variant, with ablation toggles.

The generative objective combines, per minibatch:

    recon                  mean squared reconstruction error
    cos_term               per-class cosine alignment of z to class centers
    gauss_kl               (baseline variant) KL(q(z|x,y) || N(c_y, I)),
                           expectation over q(y|x) or the ground-truth label
    ce_recognition         CE of the recognition head, labelled records only
    ce_latent              CE of the auxiliary latent classifier, labelled only
    kl_latent_recognition  KL(softmax(z_logits) || softmax(y_logits))
    kl_cos_recognition     KL(softmax(tau * cos_scores) || softmax(y_logits))
    kl_prior               KL(softmax(y_logits) || p(y))

    total = recon + cos_term + anneal * gauss_kl
          + gamma1 * (ce_recognition + ce_latent)
          + gamma2(step) * (kl_latent_recognition + kl_cos_recognition)
          + kl_prior

Breakdown fields hold the unweighted component values; `loss_weights` exposes
the per-step weights so the sum can be recomputed and audited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor

from .distributions import kl_categorical
from .model import ModelOutputs


@dataclass
class Batch:
    """Minibatch view: features, training-visible labels, and the visibility mask.

    `labels` entries at rows where `label_mask` is False must never influence
    any loss value; they exist only so evaluation code can reuse the type.
    """

    x: Tensor
    labels: Tensor
    label_mask: Tensor

    def __post_init__(self):
        if self.labels.shape[0] != self.x.shape[0] or self.label_mask.shape[0] != self.x.shape[0]:
            raise ValueError("labels and label_mask must match the batch dimension")


@dataclass
class ObjectiveConfig:
    """Loss-term toggles and weights; presets configure published variants."""

    gamma1: float = 0.1
    gamma2_mode: str = "cosine"  # "off" | "constant" | "cosine"
    gamma2_constant: float = 1.0
    margin: float = 0.0
    ce_recognition: bool = True
    ce_on_z: bool = True
    cos_with_ground_truth: bool = True
    learnable_centers: bool = True
    kl_cos_recognition: bool = False
    categorical_prior_kl: bool = True
    use_gaussian_kl: bool = False  # replace cos_term with the Gaussian-KL baseline
    kl_anneal: str = "none"  # "none" | "linear_third", applies to gauss_kl
    temperature_start: float = 1.0
    temperature_end: float = 0.5
    prior_probs: Optional[tuple[float, ...]] = None  # None = uniform p(y)

    def __post_init__(self):
        if self.gamma1 < 0:
            raise ValueError("gamma1 must be >= 0")
        if self.gamma2_mode not in ("off", "constant", "cosine"):
            raise ValueError(f"unknown gamma2_mode {self.gamma2_mode!r}")
        if self.kl_anneal not in ("none", "linear_third"):
            raise ValueError(f"unknown kl_anneal {self.kl_anneal!r}")
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [-1, 1]")
        if self.temperature_start <= 0 or self.temperature_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.prior_probs is not None:
            self.prior_probs = tuple(float(p) for p in self.prior_probs)
            if min(self.prior_probs) <= 0:
                raise ValueError("prior_probs must be positive")

    @property
    def centers_mode(self) -> str:
        return "learnable" if self.learnable_centers else "fixed_orthonormal"


COMPONENT_NAMES = (
    "recon",
    "cos_term",
    "gauss_kl",
    "ce_recognition",
    "ce_latent",
    "kl_latent_recognition",
    "kl_cos_recognition",
    "kl_prior",
)


@dataclass
class LossBreakdown:
    """Unweighted loss components plus the weighted total used for backprop."""

    recon: Tensor
    cos_term: Tensor
    gauss_kl: Tensor
    ce_recognition: Tensor
    ce_latent: Tensor
    kl_latent_recognition: Tensor
    kl_cos_recognition: Tensor
    kl_prior: Tensor
    total: Tensor
    n_labelled: int = 0
    n_unlabelled: int = 0

    def to_floats(self) -> dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in COMPONENT_NAMES}
        out["total"] = float(self.total.detach())
        return out


def gamma2_schedule(step: int, total_steps: int, mode: str = "cosine",
                    constant: float = 1.0) -> float:
    """Weight of the latent-recognition KL terms at `step`.

    Cosine mode ramps 0 -> 1 over training; degenerate horizons return the
    end value.
    """
    if mode == "off":
        return 0.0
    if mode == "constant":
        return constant
    if mode != "cosine":
        raise ValueError(f"unknown gamma2 mode {mode!r}")
    if total_steps <= 0 or step >= total_steps:
        return 1.0
    return 0.5 * (1.0 - math.cos(math.pi * step / total_steps))


def kl_anneal_schedule(step: int, total_steps: int, mode: str = "none") -> float:
    """Gaussian-KL annealing weight: linear 0 -> 1 over the first third."""
    if mode == "none":
        return 1.0
    if mode != "linear_third":
        raise ValueError(f"unknown kl_anneal mode {mode!r}")
    ramp = total_steps / 3.0
    if total_steps <= 0 or step >= ramp:
        return 1.0
    return step / ramp


def concrete_temperature(step: int, total_steps: int, start: float = 1.0,
                         end: float = 0.5) -> float:
    """Exponential decay of the relaxed-categorical temperature, start -> end."""
    if start <= 0 or end <= 0:
        raise ValueError("temperatures must be positive")
    if total_steps <= 0 or step >= total_steps:
        return end
    return start * (end / start) ** (step / total_steps)


def loss_weights(cfg: ObjectiveConfig, step: int, total_steps: int,
                 mode: str = "tvae") -> dict[str, float]:
    """Per-component weights so that total = sum(weight * component)."""
    if mode == "ptst":
        weights = {name: 0.0 for name in COMPONENT_NAMES}
        weights["ce_recognition"] = 1.0
        return weights
    g2 = gamma2_schedule(step, total_steps, cfg.gamma2_mode, cfg.gamma2_constant)
    return {
        "recon": 1.0,
        "cos_term": 0.0 if cfg.use_gaussian_kl else 1.0,
        "gauss_kl": kl_anneal_schedule(step, total_steps, cfg.kl_anneal)
        if cfg.use_gaussian_kl else 0.0,
        "ce_recognition": cfg.gamma1 if cfg.ce_recognition else 0.0,
        "ce_latent": cfg.gamma1 if cfg.ce_on_z else 0.0,
        "kl_latent_recognition": g2,
        "kl_cos_recognition": g2 if cfg.kl_cos_recognition else 0.0,
        "kl_prior": 1.0 if cfg.categorical_prior_kl else 0.0,
    }


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Mean squared error over every entry (unit-variance Gaussian likelihood)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs x_hat {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x)


def cosine_loss(z: Tensor, centers: Tensor, y: Tensor, margin: float = 0.0) -> Tensor:
    """Per-record center alignment: pull toward c_y, push others below `margin`.

    Returns [B] with (1 - cos(z, c_y)) + mean over k != y of
    max(0, cos(z, c_k) - margin).
    """
    from .model import cosine_scores

    cos = cosine_scores(z, centers)
    per_class = _cosine_loss_matrix(cos, margin)
    return per_class.gather(1, y[:, None]).squeeze(1)


def _cosine_loss_matrix(cos: Tensor, margin: float) -> Tensor:
    """[B, K] loss assuming each class in turn is the target."""
    k = cos.shape[-1]
    hinge = F.relu(cos - margin)
    neg = (hinge.sum(dim=-1, keepdim=True) - hinge) / max(k - 1, 1)
    return (1.0 - cos) + neg


def _condition_weights(batch: Batch, y_probs: Tensor, use_ground_truth: bool,
                       num_classes: int) -> Tensor:
    """[B, K] mixing weights: one-hot labels where visible (if enabled), else q(y|x)."""
    if not use_ground_truth or not batch.label_mask.any():
        return y_probs
    onehot = F.one_hot(batch.labels.clamp_min(0), num_classes).to(y_probs.dtype)
    return torch.where(batch.label_mask[:, None], onehot, y_probs)


def _labelled_ce(logits: Tensor, batch: Batch) -> Tensor:
    if not batch.label_mask.any():
        return logits.new_zeros(())
    return F.cross_entropy(logits[batch.label_mask], batch.labels[batch.label_mask])


def _prior_probs(cfg: ObjectiveConfig, k: int, like: Tensor) -> Tensor:
    if cfg.prior_probs is None:
        return torch.full((k,), 1.0 / k, dtype=like.dtype, device=like.device)
    if len(cfg.prior_probs) != k:
        raise ValueError(f"prior_probs has {len(cfg.prior_probs)} entries, expected {k}")
    p = torch.tensor(cfg.prior_probs, dtype=like.dtype, device=like.device)
    return p / p.sum()


def _generative_breakdown(batch: Batch, outputs: ModelOutputs, cfg: ObjectiveConfig,
                          step: int, total_steps: int) -> LossBreakdown:
    y_logits = outputs.y_logits
    k = y_logits.shape[-1]
    y_probs = torch.softmax(y_logits, dim=-1)
    zero = y_logits.new_zeros(())
    weights = loss_weights(cfg, step, total_steps)

    recon = recon_loss(batch.x, outputs.x_hat) if outputs.x_hat is not None else zero

    cond = _condition_weights(batch, y_probs, cfg.cos_with_ground_truth, k)
    if cfg.use_gaussian_kl:
        cos_term = zero
        gauss_kl = (cond * _per_class_gauss_kl(outputs)).sum(dim=-1).mean()
    else:
        per_class = _cosine_loss_matrix(outputs.cos_scores, cfg.margin)
        cos_term = (cond * per_class).sum(dim=-1).mean()
        gauss_kl = zero

    ce_recognition = _labelled_ce(y_logits, batch) if cfg.ce_recognition else zero
    ce_latent = _labelled_ce(outputs.z_logits, batch) if cfg.ce_on_z else zero

    if cfg.gamma2_mode != "off":
        z_probs = torch.softmax(outputs.z_logits, dim=-1)
        kl_latent_recognition = kl_categorical(z_probs, y_probs).mean()
    else:
        kl_latent_recognition = zero

    if cfg.kl_cos_recognition:
        cos_probs = torch.softmax(outputs.cos_temperature * outputs.cos_scores, dim=-1)
        kl_cos_recognition = kl_categorical(cos_probs, y_probs).mean()
    else:
        kl_cos_recognition = zero

    if cfg.categorical_prior_kl:
        prior = _prior_probs(cfg, k, y_logits).expand_as(y_probs)
        kl_prior = kl_categorical(y_probs, prior).mean()
    else:
        kl_prior = zero

    components = {
        "recon": recon,
        "cos_term": cos_term,
        "gauss_kl": gauss_kl,
        "ce_recognition": ce_recognition,
        "ce_latent": ce_latent,
        "kl_latent_recognition": kl_latent_recognition,
        "kl_cos_recognition": kl_cos_recognition,
        "kl_prior": kl_prior,
    }
    total = sum(weights[name] * components[name] for name in COMPONENT_NAMES)
    n_labelled = int(batch.label_mask.sum())
    return LossBreakdown(
        total=total,
        n_labelled=n_labelled,
        n_unlabelled=int(batch.label_mask.numel()) - n_labelled,
        **components,
    )


def _per_class_gauss_kl(outputs: ModelOutputs) -> Tensor:
    """[B, K]: KL(q(z|x, y=k) || N(c_k, I)) from per-class posteriors."""
    if outputs.class_gauss is None:
        raise ValueError("Gaussian-KL objective needs per_class_posteriors outputs")
    if outputs.centers is None:
        raise ValueError("Gaussian-KL objective needs centers in the outputs")
    mean = outputs.class_gauss.mean  # [B, K, D]
    log_std = outputs.class_gauss.log_std
    centers = outputs.centers[None, :, :].to(mean.dtype)
    var = (2.0 * log_std).exp()
    return 0.5 * (var + (mean - centers) ** 2 - 1.0 - 2.0 * log_std).sum(dim=-1)


def tampered_objective(batch: Batch, outputs: ModelOutputs, cfg: ObjectiveConfig,
                       step: int, total_steps: int) -> LossBreakdown:
    """Cosine-alignment generative objective (the main training loss)."""
    if cfg.use_gaussian_kl:
        raise ValueError("cfg requests the Gaussian-KL baseline; use baseline_objective")
    return _generative_breakdown(batch, outputs, cfg, step, total_steps)


def baseline_objective(batch: Batch, outputs: ModelOutputs, cfg: ObjectiveConfig,
                       step: int, total_steps: int) -> LossBreakdown:
    """Variant with KL(q(z|x,y) || N(c_y, I)) in place of the cosine term."""
    if not cfg.use_gaussian_kl:
        raise ValueError("cfg requests the cosine objective; use tampered_objective")
    return _generative_breakdown(batch, outputs, cfg, step, total_steps)


def discriminative_objective(batch: Batch, outputs: ModelOutputs) -> LossBreakdown:
    """Plain cross-entropy for the encoder-only classifier."""
    ce = _labelled_ce(outputs.y_logits, batch)
    zero = outputs.y_logits.new_zeros(())
    n_labelled = int(batch.label_mask.sum())
    return LossBreakdown(
        recon=zero, cos_term=zero, gauss_kl=zero, ce_recognition=ce, ce_latent=zero,
        kl_latent_recognition=zero, kl_cos_recognition=zero, kl_prior=zero, total=ce,
        n_labelled=n_labelled,
        n_unlabelled=int(batch.label_mask.numel()) - n_labelled,
    )


def compute_objective(batch: Batch, outputs: ModelOutputs, cfg: ObjectiveConfig,
                      step: int, total_steps: int, mode: str = "tvae") -> LossBreakdown:
    if mode == "ptst":
        return discriminative_objective(batch, outputs)
    if cfg.use_gaussian_kl:
        return baseline_objective(batch, outputs, cfg, step, total_steps)
    return tampered_objective(batch, outputs, cfg, step, total_steps)


def _roman_preset(**kwargs) -> ObjectiveConfig:
    base = dict(
        gamma1=0.1,
        ce_recognition=True,
        categorical_prior_kl=True,
        cos_with_ground_truth=True,
        learnable_centers=True,
    )
    base.update(kwargs)
    return ObjectiveConfig(**base)


_PRESETS: dict[str, ObjectiveConfig] = {
    # ablation ladder over the cosine objective
    "I": _roman_preset(ce_on_z=False, gamma2_mode="off"),
    "II": _roman_preset(ce_on_z=True, gamma2_mode="off"),
    "III": _roman_preset(ce_on_z=True, gamma2_mode="constant", gamma2_constant=1.0),
    "IV": _roman_preset(ce_on_z=True, gamma2_mode="cosine", cos_with_ground_truth=False),
    "V": _roman_preset(ce_on_z=True, gamma2_mode="cosine", learnable_centers=False),
    "VI": _roman_preset(ce_on_z=True, gamma2_mode="cosine", kl_cos_recognition=True),
    "VII": _roman_preset(ce_on_z=True, gamma2_mode="cosine"),
    # prior-family comparison: {cos, dkl} x {fixed, learnable} x {part, full}
    "cos-learnable-part": _roman_preset(ce_on_z=False, gamma2_mode="off"),
    "cos-fixed-part": _roman_preset(ce_on_z=False, gamma2_mode="off", learnable_centers=False),
    "cos-learnable-full": _roman_preset(ce_on_z=True, gamma2_mode="cosine"),
    "cos-fixed-full": _roman_preset(ce_on_z=True, gamma2_mode="cosine", learnable_centers=False),
    "dkl-learnable-part": _roman_preset(
        ce_on_z=False, gamma2_mode="off", use_gaussian_kl=True, kl_anneal="linear_third"
    ),
    "dkl-fixed-part": _roman_preset(
        ce_on_z=False, gamma2_mode="off", use_gaussian_kl=True, learnable_centers=False
    ),
    "dkl-learnable-full": _roman_preset(
        ce_on_z=True, gamma2_mode="cosine", use_gaussian_kl=True, kl_anneal="linear_third"
    ),
    "dkl-fixed-full": _roman_preset(
        ce_on_z=True, gamma2_mode="cosine", use_gaussian_kl=True, learnable_centers=False
    ),
}

_ALIASES = {
    "cos-learnable": "cos-learnable-part",
    "cos-fixed": "cos-fixed-part",
    "dkl-learnable": "dkl-learnable-part",
    "dkl-fixed": "dkl-fixed-part",
}

PRESET_NAMES = tuple(_PRESETS) + tuple(_ALIASES)


def preset(name: str) -> ObjectiveConfig:
    """Look up a named objective preset; unknown names raise ValueError."""
    key = _ALIASES.get(name, name)
    if key not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_NAMES)}")
    return replace(_PRESETS[key])
