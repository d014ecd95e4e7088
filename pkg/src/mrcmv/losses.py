"""Training objective: triplet loss plus the triplet pseudo-label loss.

``total = triplet + lam * pseudo_label``.  The triplet term uses the paired
BGM as positive and every in-batch BGM with a different pseudo-label as a
negative.  The pseudo-label term is one cross-entropy per joint embedding
(head W^J) and one per BGM embedding (head W^M), both against the pair's label.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    add,
    cross_entropy_sum,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    square,
    sub,
    sum_all,
    sum_axis,
)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    margin_base: float = 30.0
    margin_step: float = 10.0
    margin_epoch_threshold: int = 80
    margin_interval: int = 10
    margin_cap: float | None = 100.0
    # multiplies the scheduled margin; 1/100 for unit-sphere synthetic runs
    margin_scale: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.margin_base <= 0 or self.margin_step < 0 or self.margin_interval < 1 or self.margin_scale <= 0:
            raise ValueError(f"invalid margin schedule: {self}")


class EmptyTripletWarning(UserWarning):
    pass


@dataclass
class TripletBatch:
    """Row i of ``joint`` pairs with row i of ``bgm``; both carry ``labels[i]``."""

    joint: Tensor
    bgm: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        if self.joint.shape[0] != n or self.bgm.shape[0] != n or self.joint.shape != self.bgm.shape:
            raise ValueError(
                f"batch shapes disagree: joint {self.joint.shape}, bgm {self.bgm.shape}, {n} labels"
            )

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def negative_mask(self) -> np.ndarray:
        return (self.labels[:, None] != self.labels[None, :]).astype(np.float64)


@dataclass
class LossTerms:
    total: Tensor
    triplet: Tensor
    pseudo_label: Tensor

    def floats(self) -> tuple[float, float, float]:
        return self.total.item(), self.triplet.item(), self.pseudo_label.item()


def margin_at(epoch: int, cfg: LossConfig = LossConfig()) -> float:
    """Flat at ``margin_base`` up to the threshold epoch, then one step every interval."""
    if epoch < cfg.margin_epoch_threshold:
        alpha = cfg.margin_base
    else:
        steps = 1 + (epoch - cfg.margin_epoch_threshold) // cfg.margin_interval
        alpha = cfg.margin_base + cfg.margin_step * steps
    if cfg.margin_cap is not None:
        alpha = min(alpha, cfg.margin_cap)
    return alpha * cfg.margin_scale


def pairwise_sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """D[i, k] = ||a_i - b_k||^2 from explicit differences."""
    n, d = a.shape
    m = b.shape[0]
    diff = sub(reshape(a, (n, 1, d)), reshape(b, (1, m, d)))
    return sum_axis(square(diff), -1)


def triplet_loss(batch: TripletBatch, alpha: float) -> Tensor:
    """sum_i sum_{k: z_k != z_i} max(||J_i - M_i||^2 - ||J_i - M_k||^2 + alpha, 0)."""
    mask = batch.negative_mask()
    if not mask.any():
        warnings.warn("batch has no valid negatives; triplet loss is 0", EmptyTripletWarning, stacklevel=2)
    n = batch.size
    pos = reshape(sum_axis(square(sub(batch.joint, batch.bgm)), -1), (n, 1))
    neg = pairwise_sq_distances(batch.joint, batch.bgm)
    hinge = relu(add(sub(pos, neg), alpha))
    return sum_all(mul(hinge, mask))


def pseudo_label_loss(batch: TripletBatch, wj: Tensor, wm: Tensor) -> Tensor:
    """Cross-entropy of each joint embedding under W^J and each BGM embedding under W^M."""
    return add(
        cross_entropy_sum(matmul(batch.joint, wj), batch.labels),
        cross_entropy_sum(matmul(batch.bgm, wm), batch.labels),
    )


def total_loss(batch: TripletBatch, alpha: float, cfg: LossConfig, wj: Tensor, wm: Tensor) -> LossTerms:
    l1 = triplet_loss(batch, alpha)
    l2 = pseudo_label_loss(batch, wj, wm)
    return LossTerms(add(l1, scale(l2, cfg.lam)), l1, l2)


def uniform_pseudo_label_loss(n_pairs: int, n_labels: int) -> float:
    """Value of the pseudo-label term when both heads are zero."""
    return 2 * n_pairs * math.log(n_labels)
