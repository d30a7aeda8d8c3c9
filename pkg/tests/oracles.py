"""Independent reference implementations used only by the tests.

Deliberately naive: plain loops and pairwise distances, no shared code with
the package paths they check.
"""

import math

import numpy as np
import torch


def conv2d_naive(x, w, b=None, stride=1, pad=0):
    """Direct cross-correlation of a single image ``x [C,H,W]`` with ``w [O,C,k,k]``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[oc, ic, di, dj] * xp[ic, i * stride + di, j * stride + dj]
                out[oc, i, j] = acc + (0.0 if b is None else float(b[oc]))
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def brute_confusion(pred, gt, tol=2.0):
    """Pairwise-distance matching: every predicted pixel against every gt pixel."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    P = np.argwhere(pred)
    G = np.argwhere(gt)
    if len(P) == 0 or len(G) == 0:
        return 0, len(P), len(G)
    d2 = ((P[:, None, :] - G[None, :, :]) ** 2).sum(-1)
    close = d2 <= tol * tol
    tp = int(close.any(axis=1).sum())
    fn = int((~close.any(axis=0)).sum())
    return tp, len(P) - tp, fn


def brute_prf(tp, fp, fn):
    pr = tp / (tp + fp) if tp + fp else 1.0
    re = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * pr * re / (pr + re) if pr + re else 0.0
    return pr, re, f1


def brute_thresholds():
    return [k / 1000 for k in range(1, 1000)]


def brute_ods_ois(probs, gts, tol=2.0):
    ts = brute_thresholds()
    per_image = []
    agg = []
    for t in ts:
        tot = [0, 0, 0]
        row = []
        for p, g in zip(probs, gts):
            c = brute_confusion(np.asarray(p) >= t, g, tol)
            row.append(brute_prf(*c)[2])
            tot = [a + b for a, b in zip(tot, c)]
        per_image.append(row)
        agg.append(brute_prf(*tot)[2])
    best = max(agg)
    ois = sum(max(per_image[k][i] for k in range(len(ts))) for i in range(len(probs))) / len(probs)
    return best, ts[agg.index(best)], ois


def fd_grad(fn, inputs, eps=1e-4):
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. every input tensor."""
    grads = []
    with torch.no_grad():
        for t in inputs:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(fn(*inputs))
                flat[i] = orig - eps
                lo = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def grad_rel_error(fn, inputs, eps=1e-4):
    """Relative error ``||g_auto - g_fd|| / ||g_fd||`` over all inputs (float64)."""
    inputs = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    auto = torch.autograd.grad(out, inputs, allow_unused=True)
    auto = [torch.zeros_like(t) if a is None else a for a, t in zip(auto, inputs)]
    fd = fd_grad(fn, [t.detach().clone() for t in inputs], eps)
    num = math.sqrt(sum(float(((a - f) ** 2).sum()) for a, f in zip(auto, fd)))
    den = math.sqrt(sum(float((f**2).sum()) for f in fd))
    return num / max(den, 1e-12)
