"""Cross-view triplet loss, cross-modality binary cross-entropy and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    cross_weight: float = 1.0
    eps: float = 1e-7

    def __post_init__(self):
        if self.margin < 0 or self.cross_weight < 0:
            raise ConfigError("margin and cross_weight must be non-negative")
        if not 0 < self.eps < 0.5:
            raise ConfigError("probability clamp must lie in (0, 0.5)")


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """Batch mean of max(|a-p|^2 - |a-n|^2 + margin, 0) on raw features."""
    if not anchor.shape == positive.shape == negative.shape:
        raise ShapeError(f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}")
    if anchor.ndim != 2:
        raise ShapeError(f"expected [B, D] features, got {anchor.shape}")
    d_pos = ops.sqnorm(ops.sub(anchor, positive), axis=1)
    d_neg = ops.sqnorm(ops.sub(anchor, negative), axis=1)
    shift = Tensor(np.full(anchor.shape[0], margin, dtype=anchor.dtype))
    return ops.mean(ops.relu(ops.add(ops.sub(d_pos, d_neg), shift)))


def cross_modality_loss(predictions: Tensor, labels, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy summed over the pairs of a sample, averaged over samples.

    ``predictions`` and ``labels`` are [B, J]; probabilities are clamped to
    [eps, 1 - eps] before the log.
    """
    y = np.asarray(labels)
    if y.shape != predictions.shape:
        raise ShapeError(f"labels {y.shape} vs predictions {predictions.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("cross-modality labels must be 0 or 1")
    y = y.astype(predictions.dtype)
    p = ops.clamp(predictions, eps, 1 - eps)
    one = Tensor(np.ones(p.shape, dtype=p.dtype))
    ll = ops.add(ops.mul(Tensor(y), ops.log(p)), ops.mul(Tensor(1 - y), ops.log(ops.sub(one, p))))
    return ops.scale(ops.sum(ll), -1.0 / p.shape[0])


def combined_loss(l_triplet: Tensor, l_cross: Tensor, cross_weight: float = 1.0) -> Tensor:
    if cross_weight == 0:
        # keep the result bitwise equal to the triplet term
        return ops.add(l_triplet, ops.scale(ops.detach(l_cross), 0.0))
    return ops.add(l_triplet, ops.scale(l_cross, cross_weight))
