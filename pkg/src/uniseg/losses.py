"""Tversky-family segmentation losses with per-modality weighting.

The Tversky index generalizes soft Dice with asymmetric penalties: alpha
weights false negatives, beta false positives. Raising the complement to
a focal exponent gamma > 1 amplifies poorly segmented samples. Each
sample in a mixed batch is scored with its own domain's parameters, and
the batch loss is the mean of the per-sample focal losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Domain
from .tensor import Tensor


@dataclass(frozen=True)
class LossParams:
    alpha: float  # false-negative weight
    beta: float  # false-positive weight
    gamma: float = 1.0  # focal exponent
    epsilon: float = 1e-6  # smoothing, shared by numerator and denominator

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha/beta must be >= 0, got ({self.alpha}, {self.beta})")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


# CT pretraining uses the symmetric (0.5, 0.5) setting; the joint-training
# MRI weighting and the focal exponent are configurable defaults.
DEFAULT_GAMMA = 4.0 / 3.0
CT_PRETRAIN = LossParams(alpha=0.5, beta=0.5, gamma=DEFAULT_GAMMA)


def default_loss_table() -> dict[Domain, LossParams]:
    return {
        Domain.MRI_LIKE: LossParams(alpha=0.7, beta=0.3, gamma=DEFAULT_GAMMA),
        Domain.CT_LIKE: LossParams(alpha=0.5, beta=0.5, gamma=DEFAULT_GAMMA),
    }


def _as_mask_tensor(g, dtype) -> Tensor:
    t = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
    if not np.isin(t.data, (0.0, 1.0)).all():
        raise ValueError("ground-truth mask must be binary (0/1)")
    if t.data.dtype != dtype:
        t = Tensor(t.data.astype(dtype))
    return t

def _check_probability(p: Tensor):
    if p.data.size == 0:
        raise ValueError("empty probability map")
    lo, hi = p.data.min(), p.data.max()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"probabilities must lie in [0, 1], got range [{lo}, {hi}]")


def tversky_index(p: Tensor, g, params: LossParams) -> Tensor:
    """Tversky overlap of a probability map against a binary mask, summed
    over all pixels of one sample. Differentiable in ``p``; returns a
    scalar tensor in (0, 1]."""
    gt = _as_mask_tensor(g, p.data.dtype)
    if p.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: p {p.data.shape} vs g {gt.data.shape}")
    _check_probability(p)
    tp = (p * gt).sum()
    fn = ((1.0 - p) * gt).sum()
    fp = (p * (1.0 - gt)).sum()
    eps = params.epsilon
    return (tp + eps) / (tp + params.alpha * fn + params.beta * fp + eps)


def tversky_loss(p: Tensor, g, params: LossParams) -> Tensor:
    return 1.0 - tversky_index(p, g, params)


def focal_tversky_loss(p: Tensor, g, params: LossParams) -> Tensor:
    return tversky_loss(p, g, params) ** params.gamma


def batch_modality_loss(
    p: Tensor,
    g,
    domains: list[Domain],
    table: dict[Domain, LossParams],
) -> Tensor:
    """Mean over samples of the focal Tversky loss, each sample scored with
    its own domain's (alpha, beta, gamma). ``p`` and ``g`` are (N, 1, H, W)."""
    n = p.data.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if len(domains) != n:
        raise ValueError(f"got {len(domains)} domain tags for a batch of {n}")
    for d in domains:
        if d not in table:
            raise ValueError(f"unknown domain tag {d!r}")
    gt = _as_mask_tensor(g, p.data.dtype)
    if p.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: p {p.data.shape} vs g {gt.data.shape}")
    _check_probability(p)

    dt = p.data.dtype
    alpha = Tensor(np.array([table[d].alpha for d in domains], dtype=dt))
    beta = Tensor(np.array([table[d].beta for d in domains], dtype=dt))
    gamma = np.array([table[d].gamma for d in domains], dtype=dt)
    eps = Tensor(np.array([table[d].epsilon for d in domains], dtype=dt))

    axes = tuple(range(1, p.data.ndim))
    tp = (p * gt).sum(axis=axes)
    fn = ((1.0 - p) * gt).sum(axis=axes)
    fp = (p * (1.0 - gt)).sum(axis=axes)
    ti = T.div(tp + eps, tp + fn * alpha + fp * beta + eps)
    return ((1.0 - ti) ** gamma).mean()


def per_sample_focal_losses(
    p: Tensor, g, domains: list[Domain], table: dict[Domain, LossParams]
) -> np.ndarray:
    """Values only (no graph) of each sample's focal Tversky loss; the batch
    loss above is exactly their mean."""
    with T.no_grad():
        gt = _as_mask_tensor(g, p.data.dtype)
        out = np.empty(p.data.shape[0])
        for i, d in enumerate(domains):
            pi = Tensor(p.data[i])
            out[i] = focal_tversky_loss(pi, Tensor(gt.data[i]), table[d]).item()
    return out
