"""Acceptance suite: one recorded [PASS]/[FAIL] line per headline criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines as
they are produced; the terminal summary repeats them at the end.
"""

import math
import struct
import time

import numpy as np
import pytest

import oracles
from angular_at.attacks import PRESETS, run_attack, spsa_gradient
from angular_at.autodiff import Tensor
from angular_at.data import (FormatError, decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor,
                             gen_blobs)
from angular_at.evaluation import angle_statistics, robust_accuracy, run_ablation
from angular_at.hypersphere import HypersphereHead, MarginConfig, cosine_logits, margin_ce_loss
from angular_at.models import ModelSpec, init_parameters
from angular_at.regularizers import descend_sep_loss, max_pairwise_cosine, sep_loss, wfc_loss
from angular_at.selfcheck import GRAD_TOL, gradient_suite
from angular_at.training import spec_for_objective, train

BENCH_SEEDS = (0, 1, 2, 3)


def head(W):
    return HypersphereHead(Tensor(np.asarray(W, dtype=np.float64), requires_grad=True))


def bench_data(seed, test_per_class=100):
    """K=3, d=16 blobs: 600 train / 300 test points per seed."""
    train_data = gen_blobs(3, 16, 200, 0.1, seed=100 + seed)
    test = gen_blobs(3, 16, test_per_class, 0.1, seed=200 + seed, split="test")
    return train_data, test


def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    results = gradient_suite(n=20, seed=0, h=1e-6)
    elapsed = time.perf_counter() - t0
    worst = max(r.value for r in results)
    detail = ", ".join(f"{r.name}={r.value:.2e}@{r.detail}" for r in results) + f"; {elapsed:.1f}s"
    ok = criterion("gradient fidelity (20 instances, rel err < 1e-6, < 30 s)",
                   worst < GRAD_TOL and elapsed < 30, detail)
    assert ok, detail


def closed_form_cases():
    r2 = math.sqrt(2) / 2
    rng = np.random.default_rng(11)
    a = oracles.unit(rng.normal(size=3), 0)
    r = rng.normal(size=3)
    b = oracles.unit(r - (r @ a) * a, 0)
    z60 = 0.5 * a + math.sqrt(0.75) * b
    deg = lambda *d: head(np.stack([np.cos(np.radians(d)), np.sin(np.radians(d))]))
    W3 = np.eye(3)
    yield "margin_ce (1,0) s15 m0.2", margin_ce_loss(Tensor([[1.0, 0.0]]), [0], MarginConfig(15, 0.2)).item(), \
        oracles.LOG1P_EXP_M12
    for K in (2, 3, 10):
        yield f"margin_ce uniform K={K}", margin_ce_loss(Tensor(np.full((1, K), 0.4)), [0],
                                                          MarginConfig(15, 0.0)).item(), math.log(K)
    for v in (-1.0, -0.3, 0.0, 0.7, 1.0):
        yield f"margin_ce (a,a) a={v}", margin_ce_loss(Tensor([[v, v]]), [1], MarginConfig(1, 0.0)).item(), \
            oracles.LOG2
    yield "wfc aligned", wfc_loss(Tensor([[2.0, 0.0, 0.0]]), head(W3), [0]).item(), 0.0
    yield "wfc orthogonal", wfc_loss(Tensor([[0.0, 1.0, 0.0]]), head(W3), [0]).item(), oracles.PI_OVER_2_SQ
    yield "wfc antipodal", wfc_loss(Tensor([[-1.0, 0.0, 0.0]]), head(W3), [0]).item(), oracles.PI_SQ
    yield "wfc 60 degrees", wfc_loss(Tensor([z60]), head(np.stack([a, b], 1)), [0]).item(), oracles.PI_OVER_3_SQ
    yield "sep identical pair", sep_loss(head([[1.0, 1.0], [2.0, 2.0]])).item(), 1.0
    yield "sep orthogonal", sep_loss(head(np.eye(5))).item(), 0.0
    yield "sep 0/120/240", sep_loss(deg(0, 120, 240)).item(), -0.5
    yield "sep 0/90/120", sep_loss(deg(0, 90, 120)).item(), oracles.SEP_0_90_120
    yield "cosine (3,4)", cosine_logits(head(np.eye(2)), Tensor([[3.0, 4.0]])).data[0, 1], 0.8
    yield "cosine symmetric", cosine_logits(head([[1.0, -1.0], [0.0, 0.0]]), Tensor([[1.0, 1.0]])).data[0, 1], -r2


def test_closed_form_oracles(criterion):
    errors = [(name, abs(got - want)) for name, got, want in closed_form_cases()]
    worst_name, worst = max(errors, key=lambda e: e[1])
    ok = criterion("closed-form loss oracles (tol 1e-9)", worst < 1e-9,
                   f"{len(errors)} cases, worst {worst:.1e} ({worst_name})")
    assert ok


def test_simplex_convergence(criterion):
    t0 = time.perf_counter()
    gaps = {}
    for K, d, target, tol in [(3, 2, -0.5, 1e-3), (4, 3, -1.0 / 3.0, 1e-2)]:
        worst = 0.0
        for seed in range(10):
            h = head(np.random.default_rng(seed).normal(size=(d, K)))
            descend_sep_loss(h, 2000)
            worst = max(worst, abs(max_pairwise_cosine(h) - target))
        gaps[(K, d)] = (worst, tol)
    elapsed = time.perf_counter() - t0
    ok = all(w < tol for w, tol in gaps.values()) and elapsed < 60
    detail = ", ".join(f"K={K},d={d}: worst gap {w:.1e} (tol {t:g})" for (K, d), (w, t) in gaps.items())
    assert criterion("simplex convergence (10 seeds each, 2000 steps, < 1 min)", ok,
                     f"{detail}; {elapsed:.1f}s")


def test_attack_invariants(criterion):
    model = init_parameters(ModelSpec(16, 3, (32,), 8), seed=0)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(1000, 16))
    y = rng.integers(0, 3, size=1000)
    before = model.checksum()
    problems = []
    for name in ("pgd20", "pgd500", "cw20", "spsa"):
        spec = PRESETS[name].replace(seed=5)
        a = run_attack(model, x, y, spec)
        b = run_attack(model, x, y, spec)
        if np.max(np.abs(a - x)) > spec.epsilon + 1e-12:
            problems.append(f"{name}: outside eps ball")
        if a.min() < 0 or a.max() > 1:
            problems.append(f"{name}: outside [0,1]")
        if a.tobytes() != b.tobytes():
            problems.append(f"{name}: not reproducible")
        if model.checksum() != before or any(np.any(p.grad) for p in model.parameters().values()):
            problems.append(f"{name}: mutated parameters")
    ok = criterion("attack invariants (pgd20/pgd500/cw20/spsa on 1000 inputs)", not problems,
                   "; ".join(problems) or "ball, box, immutability, reproducibility hold")
    assert ok


def test_scale_invariance(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        K, d, n = rng.integers(2, 11), rng.integers(2, 33), rng.integers(1, 9)
        W, z = rng.normal(size=(d, K)), rng.normal(size=(n, d))
        rs, cs = 10 ** rng.uniform(-3, 3, size=n), 10 ** rng.uniform(-3, 3, size=K)
        base = cosine_logits(head(W), z).data
        scaled = cosine_logits(head(W * cs[None, :]), z * rs[:, None]).data
        worst = max(worst, np.max(np.abs(base - scaled)))
    assert criterion("HE scale invariance (200 instances, < 1e-12)", worst < 1e-12, f"max change {worst:.1e}")


@pytest.fixture(scope="module")
def bench_models():
    """Natural and Angular-AT models for every benchmark seed, with timings."""
    out = {}
    for seed in BENCH_SEEDS:
        train_data, test = bench_data(seed)
        t0 = time.perf_counter()
        nat, _ = train(train_data, spec_for_objective("natural", epochs=30, batch_size=32, lr=0.01, seed=seed))
        ang, _ = train(train_data, spec_for_objective("angular_at", epochs=30, batch_size=32, lr=0.01, seed=seed))
        out[seed] = (nat, ang, test, time.perf_counter() - t0)
    return out


def test_trained_model_angle_statistic(criterion, bench_models):
    _, ang, _, _ = bench_models[0]
    _, test = bench_data(0, test_per_class=200)
    clean, adv = angle_statistics(ang, test, PRESETS["pgd20"])
    ok = criterion("angle statistic on trained model (PGD-20, eps 0.031, 600 test points)", adv > clean,
                   f"mean theta clean {clean:.4f} rad, adversarial {adv:.4f} rad")
    assert ok


def test_robustness_ordering(criterion, bench_models):
    gaps, lines, slow = [], [], []
    for seed, (nat, ang, test, seconds) in bench_models.items():
        t0 = time.perf_counter()
        r_nat = robust_accuracy(nat, test, PRESETS["pgd20"])
        r_ang = robust_accuracy(ang, test, PRESETS["pgd20"])
        seconds += time.perf_counter() - t0
        gaps.append(r_ang - r_nat)
        lines.append(f"s{seed}: natural {100 * r_nat:.1f} / angular-at {100 * r_ang:.1f} ({seconds:.0f}s)")
        if seconds > 300:
            slow.append(seed)
    mean_gap = float(np.mean(gaps))
    ok = criterion("robustness ordering (angular-at PGD-20 >= natural + 15pp, 4 seeds)",
                   min(gaps) >= 0.15 and not slow,
                   f"mean gap {100 * mean_gap:.1f}pp; " + "; ".join(lines))
    assert ok, "gap below 15pp; see the decisions log for why this is out of reach on this benchmark"


def test_ablation_rows_deterministic(criterion):
    train_data, test = bench_data(0)
    base = spec_for_objective("angular_at", epochs=30, batch_size=32, lr=0.01, seed=0)
    attacks = {"pgd20": PRESETS["pgd20"]}
    a = run_ablation(train_data, test, base, attacks)
    b = run_ablation(train_data, test, base, attacks)
    tags = [r.tag for r in a]
    same = [x.fields() == y.fields() for x, y in zip(a, b)]
    ok = tags == ["ce", "ce+wfc", "ce+sep", "ce+wfc+sep"] and all(same)
    detail = ", ".join(f"{r.tag} {100 * r.robust_accuracy['pgd20']:.1f}" for r in a)
    assert criterion("ablation emits four rows deterministically", ok, f"PGD-20 acc: {detail}")


def test_spsa_sign_agreement(criterion):
    rng = np.random.default_rng(2024)
    spec = PRESETS["spsa"]
    agree = []
    for _ in range(32):
        g = rng.choice([-1.0, 1.0], size=16) * rng.uniform(0.5, 1.5, size=16)
        est = spsa_gradient(lambda xb, yb: xb @ g, np.full((1, 16), 0.5), np.zeros(1, int),
                            spec.spsa_perturbation, spec.spsa_samples, rng)
        agree.extend(np.sign(est[0]) == np.sign(g))
    rate = float(np.mean(agree))
    assert criterion("SPSA sign agreement on linear loss (128 samples, >= 95%)", rate >= 0.95,
                     f"{100 * rate:.1f}% of {len(agree)} coordinates")


def _fuzz_case(rng):
    """One corrupted TensorFile or checkpoint buffer and its kind."""
    if rng.random() < 0.5:
        shape = tuple(rng.integers(0, 4, size=rng.integers(1, 4)))
        buf, kind = encode_tensor(rng.normal(size=shape)), "tensor"
    else:
        entries = {f"p{i}": rng.normal(size=tuple(rng.integers(1, 4, size=2))) for i in range(rng.integers(1, 4))}
        buf, kind = encode_checkpoint(entries), "checkpoint"
    buf = bytearray(buf)
    mode = rng.integers(0, 3)
    if mode == 0:
        buf = buf[:rng.integers(0, len(buf))]
    elif mode == 1:
        for _ in range(rng.integers(1, 4)):
            buf[rng.integers(0, len(buf))] ^= 1 << rng.integers(0, 8)
    else:
        pos = rng.integers(4, 8) if len(buf) >= 8 else 0
        buf[pos:pos + 4] = struct.pack("<I", int(rng.integers(0, 2**32)))
    return bytes(buf), kind, mode


def test_format_integrity(criterion):
    rng = np.random.default_rng(7)
    round_trip_ok = True
    for _ in range(100):
        a = rng.normal(size=tuple(rng.integers(0, 5, size=rng.integers(1, 4))))
        b, _ = decode_tensor(encode_tensor(a))
        entries = {"w": a, "v": rng.normal(size=3)}
        blob = encode_checkpoint(entries)
        back = decode_checkpoint(blob)
        round_trip_ok &= b.tobytes() == a.tobytes() and b.shape == a.shape and encode_checkpoint(back) == blob

    structured = crashes = accepted = undetected_ckpt = 0
    for _ in range(1000):
        buf, kind, mode = _fuzz_case(rng)
        try:
            if kind == "tensor":
                _, end = decode_tensor(buf)
                if end != len(buf):
                    raise FormatError(FormatError.TRAILING)
            else:
                decode_checkpoint(buf)
            accepted += 1
            undetected_ckpt += kind == "checkpoint"
        except FormatError:
            structured += 1
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes += 1
    ok = round_trip_ok and crashes == 0 and undetected_ckpt == 0
    detail = (f"round trips {'bit-exact' if round_trip_ok else 'BROKEN'}; 1000 fuzz cases: {structured} structured "
              f"errors, {crashes} crashes, {accepted} accepted (tensor payload flips, which carry no checksum)")
    assert criterion("format integrity (round trip + 1000 fuzz cases)", ok, detail)
