"""Reconstruction losses for the static and dynamic stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..core import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lpips: float = 0.01
    sds: float = 1.0

    def __post_init__(self):
        if self.lpips < 0 or self.sds < 0:
            raise ValueError("loss weights must be non-negative")


class PerceptualMetric(Protocol):
    def __call__(self, target: np.ndarray, rendered: np.ndarray) -> float: ...

    def grad(self, target: np.ndarray, rendered: np.ndarray) -> np.ndarray: ...


class NullPerceptual:
    """Perceptual term switched off: always zero."""

    def __call__(self, target, rendered):
        return 0.0

    def grad(self, target, rendered):
        return np.zeros(np.shape(rendered))


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_source: np.ndarray
    grad_future: np.ndarray
    terms: dict


def l2_term(target, rendered):
    """Per-pixel mean squared error and its gradient w.r.t. ``rendered``."""
    target = np.asarray(target, dtype=np.float64)
    rendered = np.asarray(rendered, dtype=np.float64)
    if target.shape != rendered.shape:
        raise ShapeError(f"target {target.shape} vs render {rendered.shape}")
    diff = rendered - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _pair_loss(src, src_r, fut, fut_r, weights: LossWeights, perceptual):
    perceptual = perceptual or NullPerceptual()
    l_src, g_src = l2_term(src, src_r)
    l_fut, g_fut = l2_term(fut, fut_r)
    p = perceptual(src, src_r) + perceptual(fut, fut_r)
    if weights.lpips:
        g_src = g_src + weights.lpips * perceptual.grad(src, src_r)
        g_fut = g_fut + weights.lpips * perceptual.grad(fut, fut_r)
    value = l_src + l_fut + weights.lpips * p
    return LossResult(value, g_src, g_fut, {"l2_source": l_src, "l2_future": l_fut, "perceptual": p})


def static_loss(I_i, I_i_star, I_n, I_n_star, weights: LossWeights = LossWeights(), perceptual=None) -> LossResult:
    """L2 on the source and future renders plus the weighted perceptual bracket."""
    return _pair_loss(I_i, I_i_star, I_n, I_n_star, weights, perceptual)


def dynamic_loss(I_i, I_i_star, I_n, I_n_dyn, weights: LossWeights = LossWeights(), perceptual=None) -> LossResult:
    """As ``static_loss`` with the future frame rendered through dynamic offsets."""
    return _pair_loss(I_i, I_i_star, I_n, I_n_dyn, weights, perceptual)
