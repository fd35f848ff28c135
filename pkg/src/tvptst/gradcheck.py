"""Finite-difference gradient verification for deterministic loss closures.

The loss closure must be a pure function of the module parameters: fix all
noise draws and data up front, then compare autograd gradients against central
differences coordinate by coordinate. Intended for small double-precision
models; float32 does not leave enough headroom for tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch
from torch import Tensor, nn


@dataclass
class GradCheckResult:
    """Worst observed relative error per parameter tensor."""

    max_rel_error: float
    per_param: dict[str, float]
    checked_coords: int

    def failing(self, rtol: float) -> dict[str, float]:
        return {name: err for name, err in self.per_param.items() if err > rtol}


def _pick_coords(numel: int, max_coords: int) -> np.ndarray:
    if numel <= max_coords:
        return np.arange(numel)
    return np.unique(np.round(np.linspace(0, numel - 1, max_coords)).astype(np.int64))


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|), treating both-tiny pairs as exact."""
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor],
    named_params: Iterable[tuple[str, nn.Parameter]],
    coords_per_param: int = 3,
    h: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Compare autograd gradients of `loss_fn()` against central differences.

    Checks up to `coords_per_param` evenly spaced coordinates of every
    parameter tensor. Parameters should be float64 for meaningful tolerances.
    """
    params = [(name, p) for name, p in named_params if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to check")

    for _, p in params:
        p.grad = None
    loss = loss_fn()
    if loss.ndim != 0:
        raise ValueError("loss_fn must return a scalar")
    loss.backward()

    per_param: dict[str, float] = {}
    checked = 0
    for name, p in params:
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = p.data.view(-1)
        worst = 0.0
        for idx in _pick_coords(flat.numel(), coords_per_param):
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + h
                loss_plus = float(loss_fn())
                flat[idx] = original - h
                loss_minus = float(loss_fn())
                flat[idx] = original
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = grad.view(-1)[idx].item()
            worst = max(worst, relative_error(analytic, numeric, floor))
            checked += 1
        per_param[name] = worst
    return GradCheckResult(
        max_rel_error=max(per_param.values()),
        per_param=per_param,
        checked_coords=checked,
    )
