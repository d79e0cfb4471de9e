"""L-infinity attacks: PGD with CE or CW loss, and SPSA.

Attacks read model weights through a frozen view, so they never touch the
parameters or their gradient buffers.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypersphere import one_hot
from .models import Classifier

FAMILIES = ("pgd_ce", "pgd_cw", "spsa", "none")


class AttackError(RuntimeError):
    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd_ce"
    epsilon: float = 0.031
    step_size: float = 0.003
    iterations: int = 20
    random_start: bool = True
    spsa_perturbation: float = 0.001
    spsa_samples: int = 128
    spsa_lr: float = 0.01
    seed: int = 0
    domain_lo: float = 0.0
    domain_hi: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.spsa_samples < 1 or not self.spsa_perturbation > 0:
            raise ValueError("spsa_samples must be >= 1 and spsa_perturbation > 0")

    def replace(self, **changes) -> "AttackSpec":
        return dataclasses.replace(self, **changes)


def train_pgd(seed: int = 0) -> AttackSpec:
    """PGD-10 used to craft training examples (eps 0.031, step 0.007)."""
    return AttackSpec("pgd_ce", 0.031, 0.007, 10, True, seed=seed)


PRESETS = {
    "none": AttackSpec("none", 0.0, 1.0, 1, False),
    "pgd20": AttackSpec("pgd_ce", 0.031, 0.003, 20, True),
    "pgd500": AttackSpec("pgd_ce", 0.031, 0.003, 500, True),
    "cw20": AttackSpec("pgd_cw", 0.031, 0.003, 20, True),
    "spsa": AttackSpec("spsa", 0.031, 0.01, 80, False,
                       spsa_perturbation=0.001, spsa_samples=128, spsa_lr=0.01),
}


def project_linf(x_adv, x_orig, epsilon: float, domain_lo: float = -np.inf,
                 domain_hi: float = np.inf) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise ad.ShapeError("project_linf", x_adv.shape, x_orig.shape)
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    return np.clip(out, domain_lo, domain_hi)


def _cw_margin(logits: Tensor, y) -> Tensor:
    """Per-example -(z_y - max_{k != y} z_k)."""
    K = logits.shape[1]
    if K < 2:
        raise ValueError(f"CW loss needs at least 2 classes, got {K}")
    onehot = one_hot(y, K)
    z_y = ad.sum_(logits * onehot, axis=1)
    big = 2.0 * float(np.max(np.abs(logits.data))) + 1.0
    z_other, _ = ad.max_(logits - onehot * big, axis=1)
    return z_other - z_y


def cw_loss(logits, y) -> Tensor:
    return ad.mean(_cw_margin(ad.as_tensor(logits), y))


def _loss_fn(model, loss_kind: str) -> Callable[[Tensor, np.ndarray], Tensor]:
    if not isinstance(model, Classifier):
        return model
    frozen = model.frozen()
    if loss_kind == "ce":
        return frozen.ce_loss
    if loss_kind == "cw":
        return lambda x, y: cw_loss(frozen.logits(x), y)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def pgd_attack(model, x, y, spec: AttackSpec, loss_kind: str = "ce",
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sign-gradient ascent on the loss, projected to the eps-ball and domain.

    ``model`` is a Classifier or any callable ``(x_tensor, y) -> scalar Tensor``.
    """
    loss_fn = _loss_fn(model, loss_kind)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    x0 = np.asarray(x, dtype=np.float64)
    eps, lo, hi = spec.epsilon, spec.domain_lo, spec.domain_hi
    if spec.random_start:
        x_adv = project_linf(x0 + rng.uniform(-eps, eps, size=x0.shape), x0, eps, lo, hi)
    else:
        x_adv = x0.copy()
    for t in range(spec.iterations):
        xt = Tensor(x_adv, requires_grad=True)
        try:
            loss = loss_fn(xt, y)
        except ad.NonFiniteError as exc:
            raise AttackError(f"non-finite value in attack loss: {exc}", t) from exc
        ad.backward(loss)
        g = xt.grad
        if not np.all(np.isfinite(g)):
            raise AttackError("non-finite gradient", t)
        x_adv = project_linf(x_adv + spec.step_size * np.sign(g), x0, eps, lo, hi)
    return x_adv


def per_example_loss(model: Classifier, loss_kind: str = "cw") -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Forward-only per-example loss, the only model access SPSA needs."""
    frozen = model.frozen()

    def fn(x, y):
        logits = frozen.logits(x)
        if loss_kind == "cw":
            return _cw_margin(logits, y).data
        if loss_kind == "ce":
            onehot = one_hot(y, logits.shape[1])
            return (ad.logsumexp(logits, axis=1) - ad.sum_(logits * onehot, axis=1)).data
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    return fn


def spsa_gradient(loss_fn, x, y, c: float, samples: int,
                  rng: np.random.Generator) -> np.ndarray:
    """SPSA estimate of d(loss)/dx per example with Rademacher directions.

    ``loss_fn(x_batch, y_batch)`` returns one loss per row.
    """
    x = np.asarray(x, dtype=np.float64)
    B, D = x.shape
    delta = rng.choice(np.array([-1.0, 1.0]), size=(samples, B, D))
    y_rep = np.tile(np.asarray(y), samples)
    up = np.asarray(loss_fn((x[None] + c * delta).reshape(-1, D), y_rep), dtype=np.float64)
    down = np.asarray(loss_fn((x[None] - c * delta).reshape(-1, D), y_rep), dtype=np.float64)
    if not (np.all(np.isfinite(up)) and np.all(np.isfinite(down))):
        raise AttackError("non-finite loss in SPSA probe")
    diff = ((up - down) / (2.0 * c)).reshape(samples, B, 1)
    # inverse of a +-1 entry is itself
    return np.mean(diff * delta, axis=0)


def spsa_attack(model, x, y, spec: AttackSpec, loss_kind: str = "cw",
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Gradient-free attack: SPSA estimates driven by Adam ascent steps.

    ``model`` is a Classifier or a forward-only callable ``(x, y) -> losses``.
    """
    loss_fn = per_example_loss(model, loss_kind) if isinstance(model, Classifier) else model
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    x0 = np.asarray(x, dtype=np.float64)
    if x0.ndim != 2:
        raise ad.ShapeError("spsa_attack", x0.shape)
    eps, lo, hi = spec.epsilon, spec.domain_lo, spec.domain_hi
    x_adv = x0.copy()
    m = np.zeros_like(x0)
    v = np.zeros_like(x0)
    beta1, beta2, tiny = 0.9, 0.999, 1e-8
    for t in range(1, spec.iterations + 1):
        try:
            g = spsa_gradient(loss_fn, x_adv, y, spec.spsa_perturbation, spec.spsa_samples, rng)
        except AttackError as exc:
            raise AttackError(str(exc), t - 1) from None
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x_adv = project_linf(x_adv + spec.spsa_lr * m_hat / (np.sqrt(v_hat) + tiny), x0, eps, lo, hi)
    return x_adv


def attack(model, x, y, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Dispatch on ``spec.family`` for a single batch."""
    if spec.family == "none":
        return np.asarray(x, dtype=np.float64).copy()
    if spec.family == "pgd_ce":
        return pgd_attack(model, x, y, spec, "ce", rng)
    if spec.family == "pgd_cw":
        return pgd_attack(model, x, y, spec, "cw", rng)
    return spsa_attack(model, x, y, spec, "cw", rng)


def _chunk_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def run_attack(model, x, y, spec: AttackSpec, workers: int = 1, chunk_size: int = 64) -> np.ndarray:
    """Attack a dataset in fixed-size chunks, optionally on a thread pool.

    Each chunk draws from its own stream seeded by (seed, chunk index), so the
    output is identical for any worker count.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    starts = list(range(0, len(x), chunk_size))

    def one(i):
        s = starts[i]
        sl = slice(s, s + chunk_size)
        return attack(model, x[sl], y[sl], spec, _chunk_seed(spec.seed, i))

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(len(starts))))
    else:
        parts = [one(i) for i in range(len(starts))]
    if not parts:
        return x.copy()
    return np.concatenate(parts, axis=0)
