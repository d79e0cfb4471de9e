"""Angular regularizers on a hypersphere head.

``wfc_loss`` pulls adversarial features toward their true-class weight by
penalizing the squared angle between them. ``sep_loss`` pushes class weights
apart by penalizing, for every class, its largest cosine to any other class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypersphere import HypersphereHead, cosine_logits, normalize_columns, one_hot

# Added to the diagonal of the cosine matrix before the row max; cosines are
# in [-1, 1] so the diagonal can never be picked.
_DIAG_OFFSET = -4.0


@dataclass(frozen=True)
class RegularizerWeights:
    alpha: float = 0.55
    beta: float = 0.48

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def true_class_angles(z, head: HypersphereHead, y) -> Tensor:
    """theta_y per row: angle between each feature and its true-class weight."""
    cos = cosine_logits(head, z)
    cos_y = ad.sum_(cos * one_hot(y, head.num_classes), axis=1)
    return ad.arccos(cos_y)


def wfc_loss(z_adv, head: HypersphereHead, y) -> Tensor:
    theta = true_class_angles(z_adv, head, y)
    return ad.mean(theta * theta)


def pairwise_cosine_matrix(head: HypersphereHead) -> Tensor:
    Wn = normalize_columns(head.W)
    return Wn.T @ Wn


def sep_loss(head: HypersphereHead) -> Tensor:
    K = head.num_classes
    if K < 2:
        raise ValueError(f"sep_loss needs at least 2 classes, got {K}")
    C = pairwise_cosine_matrix(head)
    masked = C + np.eye(K) * _DIAG_OFFSET
    row_max, _ = ad.max_(masked, axis=1)
    return ad.mean(row_max)


def max_pairwise_cosine(head: HypersphereHead) -> float:
    C = pairwise_cosine_matrix(head.frozen()).data
    K = C.shape[0]
    return float(np.max(C[~np.eye(K, dtype=bool)]))


def descend_sep_loss(head: HypersphereHead, steps: int = 2000, lr: float = 0.1) -> float:
    """Plain gradient descent on sep_loss alone, renormalizing columns each step.

    The step size decays linearly to 0 so the row-max subgradient stops
    chattering near the optimum. Returns the final max pairwise cosine.
    """
    W = head.W
    for t in range(steps):
        W.zero_grad()
        ad.backward(sep_loss(head))
        W.data -= lr * (1.0 - t / steps) * W.grad
        W.data /= np.linalg.norm(W.data, axis=0, keepdims=True)
    return max_pairwise_cosine(head)
