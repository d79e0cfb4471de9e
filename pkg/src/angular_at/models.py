"""MLP backbone plus hypersphere or plain linear head."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypersphere import (
    HypersphereHead,
    MarginConfig,
    cosine_logits,
    cross_entropy,
    margin_ce_loss,
)

HEAD_KINDS = ("he", "plain")


class MLPBackbone:
    """Linear layers with relu between them and no activation after the last.

    ``layer_dims`` is ``(input_dim, h1, ..., feature_dim)``. A single entry
    gives the identity map.
    """

    def __init__(self, layer_dims: Sequence[int], weights: Sequence[Tensor], biases: Sequence[Tensor]):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 1 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"invalid layer dims {layer_dims}")
        if len(weights) != len(self.layer_dims) - 1 or len(biases) != len(weights):
            raise ValueError("need one weight and one bias per layer")
        for i, (W, b) in enumerate(zip(weights, biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if W.shape != want or b.shape != (want[1],):
                raise ad.ShapeError(f"layer {i}", W.shape, b.shape)
        self.weights = list(weights)
        self.biases = list(biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ad.ShapeError("forward_features", x.shape, (None, self.input_dim))
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = ad.relu(h)
        return h

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"backbone.{i}.weight"] = W
            out[f"backbone.{i}.bias"] = b
        return out

    def frozen(self) -> "MLPBackbone":
        return MLPBackbone(self.layer_dims,
                           [W.detach() for W in self.weights],
                           [b.detach() for b in self.biases])


def forward_features(backbone: MLPBackbone, x) -> Tensor:
    return backbone.forward(x)


class PlainLinearHead:
    """Standard final layer ``W^T z + b``."""

    kind = "plain"

    def __init__(self, W: Tensor, b: Tensor):
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ad.ShapeError("PlainLinearHead", W.shape, b.shape)
        self.W = W
        self.b = b

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def parameters(self):
        return {"head.weight": self.W, "head.bias": self.b}

    def frozen(self) -> "PlainLinearHead":
        return PlainLinearHead(self.W.detach(), self.b.detach())


class Classifier:
    """Backbone + head. ``margin`` is only meaningful for the HE head."""

    def __init__(self, backbone: MLPBackbone, head, margin: Optional[MarginConfig] = None):
        if backbone.feature_dim != head.feature_dim:
            raise ad.ShapeError("Classifier", (backbone.feature_dim,), (head.feature_dim,))
        self.backbone = backbone
        self.head = head
        self.margin = margin if margin is not None else MarginConfig()

    @property
    def head_kind(self) -> str:
        return self.head.kind

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def input_dim(self) -> int:
        return self.backbone.input_dim

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.backbone.parameters())
        params.update(self.head.parameters())
        return params

    def frozen(self) -> "Classifier":
        """Same weights (shared buffers) with gradient tracking switched off."""
        return Classifier(self.backbone.frozen(), self.head.frozen(), self.margin)

    def features(self, x) -> Tensor:
        return self.backbone.forward(x)

    def logits_from_features(self, z) -> Tensor:
        """Scores used for prediction and the CW loss (s*cos for HE heads)."""
        if self.head_kind == "he":
            return ad.scale(cosine_logits(self.head, z), self.margin.s)
        return z @ self.head.W + self.head.b

    def logits(self, x) -> Tensor:
        return self.logits_from_features(self.features(x))

    def ce_from_features(self, z, y) -> Tensor:
        """Training CE: margin CE for HE heads, plain softmax CE otherwise."""
        if self.head_kind == "he":
            return margin_ce_loss(cosine_logits(self.head, z), y, self.margin)
        return cross_entropy(z @ self.head.W + self.head.b, y)

    def ce_loss(self, x, y) -> Tensor:
        return self.ce_from_features(self.features(x), y)

    def predict(self, x) -> np.ndarray:
        """Argmax class, ties to the lowest index."""
        return np.argmax(self.frozen().logits(x).data, axis=1)

    def probabilities(self, x) -> np.ndarray:
        f = self.frozen()
        if self.head_kind == "he":
            scores = cosine_logits(f.head, f.features(x))
        else:
            scores = f.logits(x)
        return ad.softmax(scores, axis=1).data

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "Classifier":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.parameters().items()}
        return build_classifier(self.backbone.layer_dims, self.head_kind, params, self.margin)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: Sequence[int] = (128, 64)
    feature_dim: int = 32
    head_kind: str = "he"

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim, *self.hidden, self.feature_dim]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_parameters(spec: ModelSpec, seed: int, margin: Optional[MarginConfig] = None) -> Classifier:
    if spec.head_kind not in HEAD_KINDS:
        raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
    if spec.num_classes < 1 or spec.input_dim < 1:
        raise ValueError("input_dim and num_classes must be positive")
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights, biases = [], []
    for i in range(len(dims) - 1):
        weights.append(Tensor(_glorot(rng, dims[i], dims[i + 1]), requires_grad=True))
        biases.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True))
    backbone = MLPBackbone(dims, weights, biases)
    W = _glorot(rng, spec.feature_dim, spec.num_classes)
    while np.any(np.linalg.norm(W, axis=0) == 0.0):
        W = _glorot(rng, spec.feature_dim, spec.num_classes)
    if spec.head_kind == "he":
        head = HypersphereHead(Tensor(W, requires_grad=True))
    else:
        head = PlainLinearHead(Tensor(W, requires_grad=True),
                               Tensor(np.zeros(spec.num_classes), requires_grad=True))
    return Classifier(backbone, head, margin)


def build_classifier(layer_dims, head_kind: str, params: Dict[str, Tensor],
                     margin: Optional[MarginConfig] = None) -> Classifier:
    n = len(layer_dims) - 1
    weights = [params[f"backbone.{i}.weight"] for i in range(n)]
    biases = [params[f"backbone.{i}.bias"] for i in range(n)]
    backbone = MLPBackbone(layer_dims, weights, biases)
    if head_kind == "he":
        head = HypersphereHead(params["head.weight"])
    else:
        head = PlainLinearHead(params["head.weight"], params["head.bias"])
    return Classifier(backbone, head, margin)
