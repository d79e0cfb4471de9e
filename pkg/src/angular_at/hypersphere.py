"""Hypersphere-embedded classification head: WN/FN, cosine logits, margin CE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class NormalizationError(ValueError):
    """A column or row that must be normalized has zero L2 norm."""

    def __init__(self, kind: str, index: int):
        self.kind = kind
        self.index = int(index)
        super().__init__(f"zero-norm {kind} at index {self.index}")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class MarginConfig:
    s: float = 15.0
    m: float = 0.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"scale s must be positive, got {self.s}")
        if self.m < 0:
            raise ValueError(f"margin m must be >= 0, got {self.m}")


class HypersphereHead:
    """Bias-free final layer whose columns are class directions.

    ``W`` has shape (feature_dim, K).
    """

    kind = "he"

    def __init__(self, W: Tensor):
        if W.ndim != 2:
            raise ad.ShapeError("HypersphereHead", W.shape)
        self.W = W

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def parameters(self):
        return {"head.weight": self.W}

    def frozen(self) -> "HypersphereHead":
        return HypersphereHead(self.W.detach())


def _first_zero(norms: np.ndarray):
    zero = np.flatnonzero(norms == 0.0)
    return int(zero[0]) if zero.size else None


def normalize_columns(W) -> Tensor:
    W = ad.as_tensor(W)
    norms = ad.l2_norm(W, axis=0, keepdims=True)
    bad = _first_zero(norms.data.reshape(-1))
    if bad is not None:
        raise NormalizationError("column", bad)
    return W / norms


def normalize_features(z) -> Tensor:
    z = ad.as_tensor(z)
    norms = ad.l2_norm(z, axis=1, keepdims=True)
    bad = _first_zero(norms.data.reshape(-1))
    if bad is not None:
        raise NormalizationError("row", bad)
    return z / norms


def cosine_logits(head: HypersphereHead, z) -> Tensor:
    """cos(theta_k) between each feature row and each class column, shape (batch, K)."""
    z = ad.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != head.feature_dim:
        raise ad.ShapeError("cosine_logits", z.shape, head.W.shape)
    return normalize_features(z) @ normalize_columns(head.W)


def one_hot(y, K: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise LabelError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= K or not np.all(y == np.floor(y))):
        raise LabelError(f"labels must be integers in [0, {K})")
    out = np.zeros((y.size, K))
    out[np.arange(y.size), y.astype(np.int64)] = 1.0
    return out


def cross_entropy(logits, y) -> Tensor:
    """Mean softmax cross-entropy of integer labels against raw logits."""
    logits = ad.as_tensor(logits)
    onehot = one_hot(y, logits.shape[1])
    if onehot.shape[0] != logits.shape[0]:
        raise ad.ShapeError("cross_entropy", logits.shape, onehot.shape)
    picked = ad.sum_(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


def margin_logits(cos_theta, y, cfg: MarginConfig) -> Tensor:
    cos_theta = ad.as_tensor(cos_theta)
    onehot = one_hot(y, cos_theta.shape[1])
    return ad.scale(cos_theta - onehot * cfg.m, cfg.s)


def margin_ce_loss(cos_theta, y, cfg: MarginConfig) -> Tensor:
    """Batch mean of -log softmax(s * (cos - m * onehot_y))_y."""
    return cross_entropy(margin_logits(cos_theta, y, cfg), y)


def he_forward(backbone, head: HypersphereHead, x) -> Tensor:
    """Class probabilities softmax(cos theta) for inputs ``x``."""
    z = backbone.forward(x)
    return ad.softmax(cosine_logits(head, z), axis=1)
