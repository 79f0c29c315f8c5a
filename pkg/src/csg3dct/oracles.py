"""Slow, direct reference computations.

Nothing here touches :mod:`csg3dct.ops`; these are the independent sides of
the checks in the test suite and ``verify``.
"""
from __future__ import annotations

import math

import numpy as np


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)) -> np.ndarray:
    """Direct nested-loop cross-correlation; x [N,C,T,H,W], w [Co,C,t,kh,kw]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    st, sh, sw = stride
    pt, ph, pw = padding
    N, C, T, H, W = x.shape
    Co, _, kt, kh, kw = w.shape
    To, Ho, Wo = (T + 2 * pt - kt) // st + 1, (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, Co, To, Ho, Wo))
    for n in range(N):
        for co in range(Co):
            for to in range(To):
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = 0.0 if b is None else float(b[co])
                        for ci in range(C):
                            for dt in range(kt):
                                ti = to * st + dt - pt
                                if not 0 <= ti < T:
                                    continue
                                for dy in range(kh):
                                    hi = ho * sh + dy - ph
                                    if not 0 <= hi < H:
                                        continue
                                    for dx in range(kw):
                                        wi = wo * sw + dx - pw
                                        if 0 <= wi < W:
                                            acc += x[n, ci, ti, hi, wi] * w[co, ci, dt, dy, dx]
                        out[n, co, to, ho, wo] = acc
    return out


def naive_conv2d(x, w, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """x [C,H,W], w [Co,C,kh,kw] -> [Co,Ho,Wo] by direct window sums."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    Co, C, kh, kw = w.shape
    Ho, Wo = (xp.shape[1] - kh) // sh + 1, (xp.shape[2] - kw) // sw + 1
    out = np.zeros((Co, Ho, Wo))
    for co in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                out[co, i, j] = np.sum(xp[:, i * sh:i * sh + kh, j * sw:j * sw + kw] * w[co])
    return out


def two_pass_layer_norm(x, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[idx] = [(v - mu) / math.sqrt(var + eps) for v in row]
    return out


def softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_affine(x, gamma, beta, eps=1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def factorized_mask(t: int, n: int, axis: str) -> np.ndarray:
    """Boolean [L, L] visibility: CLS row/column fully visible, patches within frame or grid cell."""
    L = t * n * n + 1
    mask = np.zeros((L, L), dtype=bool)
    mask[0, :] = True
    mask[:, 0] = True
    frame = np.repeat(np.arange(t), n * n)
    cell = np.tile(np.arange(n * n), t)
    key = frame if axis == "spatial" else cell
    mask[1:, 1:] = key[:, None] == key[None, :]
    return mask


def dense_attention(q, k, v, mask=None) -> tuple:
    """Per-head softmax(q k^T / sqrt(dh)) v with an optional boolean visibility mask.

    q [h, Lq, dh], k/v [h, Lk, dh]; returns (output [h, Lq, dh], weights).
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    attn = softmax_rows(scores)
    return attn @ v, attn


def confusion_counts(predictions, labels, positive: int) -> tuple:
    """(tp, fp, fn, tn) by explicit enumeration."""
    tp = fp = fn = tn = 0
    for p, y in zip(predictions, labels):
        if p == positive and y == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif y == positive:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def brute_force_metrics(predictions, labels) -> dict:
    predictions, labels = list(predictions), list(labels)
    per = []
    for c in (0, 1):
        tp, fp, fn, _ = confusion_counts(predictions, labels, c)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        per.append((p, r, 2 * p * r / (p + r) if p + r else 0.0))
    correct = sum(1 for p, y in zip(predictions, labels) if p == y)
    return {"accuracy": correct / len(labels),
            "precision": (per[0][0] + per[1][0]) / 2,
            "recall": (per[0][1] + per[1][1]) / 2,
            "f1": (per[0][2] + per[1][2]) / 2}
