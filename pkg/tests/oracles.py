"""Independent reference values and plain-numpy re-implementations.

Nothing here imports angular_at. Frozen constants were evaluated once with
mpmath at 30 significant digits and pasted in as literals.
"""

import math

import numpy as np

# -- frozen constants (mpmath, 30 digits) ---------------------------------------
LOG1P_EXP_M12 = 6.14419347773280543457906615905e-06   # log(1 + e^-12)
PI_OVER_3_SQ = 1.09662271123215095764827677776         # (pi/3)^2
PI_OVER_2_SQ = 2.46740110027233965470862274997         # (pi/2)^2
PI_SQ = 9.86960440108935861883449099988                # pi^2
SEP_0_90_120 = 0.577350269189625764509148780502        # (0 + 2 * sqrt(3)/2) / 3
SOFTMAX_1_M1 = (0.880797077977882444059729141302, 0.119202922022117555940270858698)
LOG2 = 0.693147180559945309417232121458


def unit(v, axis):
    v = np.asarray(v, dtype=np.float64)
    return v / np.sqrt(np.sum(v * v, axis=axis, keepdims=True))


def cosines(W, z):
    """(batch, K) cosine matrix, written without any shared helper."""
    W = np.asarray(W, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = np.empty((z.shape[0], W.shape[1]))
    for i in range(z.shape[0]):
        for k in range(W.shape[1]):
            out[i, k] = z[i] @ W[:, k] / (math.sqrt(z[i] @ z[i]) * math.sqrt(W[:, k] @ W[:, k]))
    return out


def softmax_ce(logits, y):
    """Mean -log softmax(logits)_y computed row by row with math.fsum."""
    logits = np.asarray(logits, dtype=np.float64)
    total = []
    for row, label in zip(logits, y):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total.append(lse - row[label])
    return math.fsum(total) / len(total)


def margin_ce(cos, y, s, m):
    cos = np.array(cos, dtype=np.float64)
    cos[np.arange(len(y)), y] -= m
    return softmax_ce(s * cos, y)


def wfc(W, z, y):
    c = cosines(W, z)[np.arange(len(y)), y]
    return float(np.mean(np.arccos(np.clip(c, -1, 1)) ** 2))


def sep(W):
    Wn = unit(W, 0)
    K = Wn.shape[1]
    vals = [max(Wn[:, i] @ Wn[:, j] for j in range(K) if j != i) for i in range(K)]
    return math.fsum(vals) / K


def cw_margin(logits, y):
    """-(z_y - max_{k != y} z_k), batch mean."""
    logits = np.asarray(logits, dtype=np.float64)
    out = []
    for row, label in zip(logits, y):
        other = max(v for k, v in enumerate(row) if k != label)
        out.append(-(row[label] - other))
    return float(np.mean(out))


def momentum_unrolled(p0, grads, lr, mu, wd):
    """Hand-unrolled SGD momentum recurrence."""
    p = np.array(p0, dtype=np.float64)
    v = np.zeros_like(p)
    for g in grads:
        v = mu * v + (np.asarray(g) + wd * p)
        p = p - lr * v
    return p


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h
