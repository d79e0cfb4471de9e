"""Adversarial training loops: Angular-AT and the baselines."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, pgd_attack, train_pgd
from .data import Dataset, batches
from .hypersphere import MarginConfig
from .models import Classifier, ModelSpec, init_parameters
from .regularizers import sep_loss, wfc_loss

logger = logging.getLogger(__name__)

OBJECTIVES = ("angular_at", "pgd_at_plain", "pgd_at_he", "natural")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}, batch {batch})"
        super().__init__(message + where)


@dataclass(frozen=True)
class TrainSpec:
    alpha: float = 0.55
    beta: float = 0.48
    s: float = 15.0
    m: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_points: Tuple[float, ...] = (0.75, 0.90)
    attack: AttackSpec = field(default_factory=train_pgd)
    seed: int = 0
    objective: str = "angular_at"
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def replace(self, **changes) -> "TrainSpec":
        return dataclasses.replace(self, **changes)

    @property
    def margin(self) -> MarginConfig:
        return MarginConfig(self.s, self.m)

    @property
    def head_kind(self) -> str:
        return "plain" if self.objective in ("pgd_at_plain", "natural") else "he"


def spec_for_objective(objective: str, **overrides) -> TrainSpec:
    """TrainSpec with the published per-objective constants filled in.

    angular_at: alpha 0.55, beta 0.48, s 15, m 0. pgd_at_he: s 15, m 0.2 and
    no regularizers.
    """
    base = {"objective": objective}
    if objective == "pgd_at_he":
        base.update(alpha=0.0, beta=0.0, m=0.2)
    elif objective in ("natural", "pgd_at_plain"):
        base.update(alpha=0.0, beta=0.0)
    base.update(overrides)
    return TrainSpec(**base)


def default_batch_size(n_samples: int) -> int:
    """128 for full-size data, 32 for tiny desk datasets."""
    return 128 if n_samples >= 4096 else 32


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: Dict[str, ad.Tensor], grads: Dict[str, np.ndarray],
                      state: OptimizerState, lr: float, momentum: float,
                      weight_decay: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v, in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.ShapeError("sgd_momentum_step", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("sgd_momentum_step", f"gradient for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += g + weight_decay * p.data
        p.data -= lr * v


def lr_at_epoch(spec: TrainSpec, epoch: int) -> float:
    if not 0 <= epoch < spec.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {spec.epochs})")
    passed = sum(1 for f in spec.lr_decay_points if epoch >= math.floor(f * spec.epochs + 1e-9))
    return spec.lr * 10.0 ** (-passed)


@dataclass
class LossBreakdown:
    total: float
    ce: float
    wfc: float
    sep: float


def angular_at_loss(classifier: Classifier, x, y, spec: TrainSpec,
                    rng: Optional[np.random.Generator] = None,
                    x_adv: Optional[np.ndarray] = None) -> Tuple[ad.Tensor, LossBreakdown]:
    """CE on PGD examples + alpha * wfc on their features + beta * sep on the head.

    One PGD run per batch provides x' for both the CE and the wfc term.
    """
    if classifier.head_kind != "he":
        raise ValueError("angular_at_loss needs a hypersphere head")
    if x_adv is None:
        x_adv = pgd_attack(classifier, x, y, spec.attack, "ce", rng)
    z_adv = classifier.features(x_adv)
    ce = classifier.ce_from_features(z_adv, y)
    wfc = wfc_loss(z_adv, classifier.head, y) if spec.alpha else None
    sep = sep_loss(classifier.head) if spec.beta else None
    total = ce
    if wfc is not None:
        total = total + ad.scale(wfc, spec.alpha)
    if sep is not None:
        total = total + ad.scale(sep, spec.beta)
    if wfc is None:
        wfc_val = wfc_loss(z_adv.detach(), classifier.head.frozen(), y).item()
    else:
        wfc_val = wfc.item()
    sep_val = sep.item() if sep is not None else _sep_value(classifier)
    return total, LossBreakdown(total.item(), ce.item(), wfc_val, sep_val)


def _sep_value(classifier: Classifier) -> float:
    if classifier.head_kind != "he" or classifier.num_classes < 2:
        return float("nan")
    return sep_loss(classifier.head.frozen()).item()


def objective_loss(classifier: Classifier, x, y, spec: TrainSpec,
                   rng: Optional[np.random.Generator] = None) -> Tuple[ad.Tensor, LossBreakdown]:
    if spec.objective in ("angular_at", "pgd_at_he"):
        return angular_at_loss(classifier, x, y, spec, rng)
    if spec.objective == "pgd_at_plain":
        x_in = pgd_attack(classifier, x, y, spec.attack, "ce", rng)
    else:
        x_in = x
    loss = classifier.ce_loss(x_in, y)
    v = loss.item()
    return loss, LossBreakdown(v, v, float("nan"), _sep_value(classifier))


def _batch_rng(spec: TrainSpec, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.attack.seed, spec.seed, epoch, batch, 1]))


def _shuffle_seed(spec: TrainSpec, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, epoch, 0])


def build_model(spec: TrainSpec, input_dim: int, num_classes: int,
                hidden: Sequence[int] = (128, 64), feature_dim: int = 32) -> Classifier:
    mspec = ModelSpec(input_dim, num_classes, tuple(hidden), feature_dim, spec.head_kind)
    return init_parameters(mspec, spec.seed, spec.margin)


def fit(classifier: Classifier, dataset: Dataset, spec: TrainSpec,
        eval_dataset: Optional[Dataset] = None, run_id: str = "train"):
    """Train in place. Returns (classifier, list of per-epoch MetricsRecord)."""
    from .evaluation import MetricsRecord, natural_accuracy

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if spec.objective in ("angular_at", "pgd_at_he") and classifier.head_kind != "he":
        raise ValueError(f"objective {spec.objective} needs a hypersphere head")
    classifier.margin = spec.margin
    params = classifier.parameters()
    if spec.freeze_backbone:
        params = classifier.head.parameters()
    state = OptimizerState()
    records = []
    for epoch in range(spec.epochs):
        lr = lr_at_epoch(spec, epoch)
        sums = np.zeros(4)
        count = 0
        for b, (xb, yb) in enumerate(batches(dataset, spec.batch_size, _shuffle_seed(spec, epoch))):
            for p in classifier.parameters().values():
                p.zero_grad()
            try:
                loss, parts = objective_loss(classifier, xb, yb, spec, _batch_rng(spec, epoch, b))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite value: {exc}", epoch, b) from exc
            if not math.isfinite(parts.total):
                raise TrainingError("non-finite loss", epoch, b)
            ad.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            try:
                sgd_momentum_step(params, grads, state, lr, spec.momentum, spec.weight_decay)
            except ad.NonFiniteError as exc:
                raise TrainingError(str(exc), epoch, b) from exc
            n = len(yb)
            sums += n * np.array([parts.total, parts.ce, parts.wfc, parts.sep])
            count += n
        means = sums / count
        extra = {}
        if eval_dataset is not None:
            extra["test_natural_accuracy"] = natural_accuracy(classifier, eval_dataset)
        rec = MetricsRecord(
            tag=spec.objective,
            natural_accuracy=natural_accuracy(classifier, dataset),
            robust_accuracy={},
            loss_total=float(means[0]), loss_ce=float(means[1]),
            loss_wfc=float(means[2]), loss_sep=float(means[3]),
            epoch=epoch, run=run_id, seed=spec.seed, extra={"lr": lr, **extra},
        )
        logger.info("epoch %d lr=%.4g loss=%.4f acc=%.4f", epoch, lr, rec.loss_total, rec.natural_accuracy)
        records.append(rec)
    return classifier, records


def train(dataset: Dataset, spec: TrainSpec, hidden: Sequence[int] = (128, 64),
          feature_dim: int = 32, eval_dataset: Optional[Dataset] = None, run_id: str = "train"):
    """Initialise a model for ``spec`` and fit it."""
    model = build_model(spec, dataset.input_dim, dataset.num_classes, hidden, feature_dim)
    return fit(model, dataset, spec, eval_dataset, run_id)
