"""Gradient checks of every loss term plus file-format round trips."""

from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FormatError, decode_checkpoint, encode_checkpoint, load_tensor, save_tensor
from .hypersphere import HypersphereHead, MarginConfig, cosine_logits, margin_ce_loss
from .models import ModelSpec, init_parameters
from .regularizers import pairwise_cosine_matrix, sep_loss, wfc_loss

GRAD_TOL = 1e-6
SHAPES = [(K, d) for K in (2, 3, 10) for d in (2, 8, 32)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float = 0.0
    detail: str = ""


def _head(rng, d: int, K: int, min_gap: float = 1e-3) -> HypersphereHead:
    """Random head whose sep_loss row maxima are not near ties."""
    for _ in range(1000):
        W = rng.normal(size=(d, K))
        C = pairwise_cosine_matrix(HypersphereHead(Tensor(W))).data.copy()
        np.fill_diagonal(C, -np.inf)
        top2 = np.sort(C, axis=1)[:, -2:] if K > 2 else None
        if top2 is None or np.all(top2[:, 1] - top2[:, 0] > min_gap):
            return HypersphereHead(Tensor(W, requires_grad=True))
    raise RuntimeError("could not draw a tie-free head")


def _features(rng, head: HypersphereHead, y, batch: int, margin: float = 1e-3) -> Tensor:
    """Random features whose true-class cosines stay away from +-1."""
    for _ in range(1000):
        z = rng.normal(size=(batch, head.feature_dim))
        cos_y = cosine_logits(head.frozen(), z).data[np.arange(batch), y]
        if np.all(np.abs(cos_y) < 1 - margin):
            return Tensor(z, requires_grad=True)
    raise RuntimeError("could not draw features away from the arccos endpoints")


def instances(n: int = 20, seed: int = 0):
    """Yield (K, d, rng) for ``n`` instances cycling through SHAPES."""
    root = np.random.SeedSequence(seed)
    for i, (K, d) in zip(range(n), itertools.cycle(SHAPES)):
        yield K, d, np.random.default_rng(root.spawn(1)[0])


def grad_margin_ce(K, d, rng, h=1e-6):
    head = _head(rng, d, K)
    y = rng.integers(0, K, size=4)
    z = Tensor(rng.normal(size=(4, d)), requires_grad=True)
    cfg = MarginConfig(15.0, float(rng.choice([0.0, 0.2])))
    params = {"z": z, "W": head.W}
    return ad.finite_diff_check(lambda p: margin_ce_loss(cosine_logits(head, p["z"]), y, cfg), params, h)


def grad_wfc(K, d, rng, h=1e-6):
    head = _head(rng, d, K)
    y = rng.integers(0, K, size=4)
    z = _features(rng, head, y, 4)
    return ad.finite_diff_check(lambda p: wfc_loss(p["z"], head, y), {"z": z, "W": head.W}, h)


def grad_sep(K, d, rng, h=1e-6):
    head = _head(rng, d, K)
    return ad.finite_diff_check(lambda p: sep_loss(head), {"W": head.W}, h)


def grad_objective(K, d, rng, h=1e-6, alpha=0.55, beta=0.48):
    """Full objective ce + alpha*wfc + beta*sep w.r.t. every model parameter.

    x' is held fixed, as it is during the optimizer step.
    """
    seed = int(rng.integers(0, 2**31))
    for attempt in range(100):
        model = init_parameters(ModelSpec(4, K, (6,), d, "he"), seed + attempt, MarginConfig(15.0, 0.0))
        x_adv = rng.uniform(0, 1, size=(5, 4))
        y = rng.integers(0, K, size=5)
        f = model.frozen()
        z = f.features(x_adv).data
        if np.min(np.linalg.norm(z, axis=1)) < 1e-3:
            continue
        cos_y = cosine_logits(f.head, z).data[np.arange(5), y]
        pre = x_adv @ model.backbone.weights[0].data + model.backbone.biases[0].data
        C = pairwise_cosine_matrix(f.head).data.copy()
        np.fill_diagonal(C, -np.inf)
        top2 = np.sort(C, axis=1)[:, -2:]
        if (np.all(np.abs(cos_y) < 1 - 1e-3) and np.min(np.abs(pre)) > 1e-3
                and (K == 2 or np.all(top2[:, 1] - top2[:, 0] > 1e-3))):
            break
    else:
        raise RuntimeError("could not draw a kink-free objective instance")

    def loss(p):
        z = model.features(x_adv)
        return (model.ce_from_features(z, y) + ad.scale(wfc_loss(z, model.head, y), alpha)
                + ad.scale(sep_loss(model.head), beta))

    return ad.finite_diff_check(loss, model.parameters(), h)


GRAD_CHECKS: Dict[str, Callable] = {
    "margin_ce": grad_margin_ce,
    "wfc": grad_wfc,
    "sep": grad_sep,
    "objective": grad_objective,
}


def gradient_suite(n: int = 20, seed: int = 0, h: float = 1e-6) -> List[CheckResult]:
    results = []
    for name, check in GRAD_CHECKS.items():
        worst, where = 0.0, ""
        for K, d, rng in instances(n, seed):
            rep = check(K, d, rng, h)
            if rep.max_rel_error >= worst:
                worst, where = rep.max_rel_error, f"K{K}xd{d}"
        results.append(CheckResult(f"grad.{name}", bool(worst < GRAD_TOL), float(worst), where))
    return results


def format_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        ok = True
        for shape in [(0,), (2, 2), (3,), (2, 3, 4)]:
            arr = rng.normal(size=shape)
            path = Path(tmp) / "t.aatn"
            save_tensor(path, arr)
            back = load_tensor(path)
            ok &= back.shape == arr.shape and back.tobytes() == arr.tobytes()
        out.append(CheckResult("format.tensor_roundtrip", bool(ok)))

        entries = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(4,))}
        blob = encode_checkpoint(entries)
        back = decode_checkpoint(blob)
        ok = all(back[k].tobytes() == v.tobytes() for k, v in entries.items())
        ok &= encode_checkpoint(back) == blob
        flipped = bytearray(blob)
        flipped[20] ^= 0x01
        try:
            decode_checkpoint(bytes(flipped))
            ok = False
        except FormatError as exc:
            ok &= exc.code == FormatError.CHECKSUM
        out.append(CheckResult("format.checkpoint_roundtrip", bool(ok)))
    return out


def run_all(n: int = 20, seed: int = 0) -> List[CheckResult]:
    return gradient_suite(n, seed) + format_suite(seed)
