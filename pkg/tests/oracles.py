"""Independent reference computations used by the tests.

These are deliberately naive loops over numpy float64 arrays and share no
code with the package's torch kernels.
"""

import math

import numpy as np


def unit_columns(rng, c, hw):
    X = rng.normal(size=(c, hw))
    return X / np.linalg.norm(X, axis=0, keepdims=True)


def naive_la(Xi, Xj, axis="row"):
    """Full-plane alignment by explicit double loop."""
    Xi = np.asarray(Xi, dtype=np.float64)
    Xj = np.asarray(Xj, dtype=np.float64)
    n = Xi.shape[1]
    if axis == "col":
        Xi, Xj = Xj, Xi
    terms = []
    for a in range(n):
        best = -math.inf
        for b in range(n):
            best = max(best, float(np.dot(Xi[:, a], Xj[:, b])))
        terms.append(abs(best - 1.0))
    return sum(terms) / n


def window_scan_wla(Ei, Ej, omega, axis="row"):
    """Per-pixel scan: each query pixel searches only its own omega x omega window.

    ``Ei``, ``Ej``: (c, h, w) unit-normalized embeddings.
    """
    Ei = np.asarray(Ei, dtype=np.float64)
    Ej = np.asarray(Ej, dtype=np.float64)
    if axis == "col":
        Ei, Ej = Ej, Ei
    c, h, w = Ei.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            y0, x0 = (y // omega) * omega, (x // omega) * omega
            best = -math.inf
            for yy in range(y0, y0 + omega):
                for xx in range(x0, x0 + omega):
                    best = max(best, float(np.dot(Ei[:, y, x], Ej[:, yy, xx])))
            total += abs(best - 1.0)
    return total / (h * w)


def normalize_np(fmap, W=None, b=None):
    """Per-pixel linear map then L2 normalization along channels, in numpy."""
    x = np.asarray(fmap, dtype=np.float64)
    if W is not None:
        x = np.einsum("oc,chw->ohw", W, x)
    if b is not None:
        x = x + b[:, None, None]
    return x / np.maximum(np.linalg.norm(x, axis=0, keepdims=True), 1e-8)


def scalar_gp(features, positives, tau):
    """Positional contrastive loss with plain python sums."""
    f = [np.asarray(v, dtype=np.float64) for v in features]
    n = len(f)

    def sim(a, b):
        return math.exp(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)) / tau)

    losses = []
    for i in range(n):
        denom = sum(sim(f[i], f[q]) for q in range(n) if q != i)
        acc = 0.0
        for j in positives[i]:
            acc += math.log(sim(f[i], f[j]) / denom)
        losses.append(-acc / len(positives[i]))
    return sum(losses) / n


def brute_force_plan(views, t):
    """All-pairs recomputation of the positive sets from view metadata only."""
    from fractions import Fraction

    n = len(views)
    gp = []
    for i in range(n):
        P = set()
        for j in range(n):
            if i == j:
                continue
            a, b = views[i], views[j]
            twin = a.subject_id == b.subject_id and a.slice_index == b.slice_index
            pos = abs(Fraction(a.slice_index, a.V) - Fraction(b.slice_index, b.V)) < Fraction(str(t))
            if twin or pos:
                P.add(j)
        gp.append(P)
    la = []
    for i in range(n):
        for j in range(i + 1, n):
            a, b = views[i], views[j]
            if a.subject_id == b.subject_id and abs(a.slice_index - b.slice_index) < Fraction(str(t)) * a.V:
                la.append((i, j))
    return gp, la


def central_fd(fn, x, h=1e-5):
    """Central finite differences of scalar ``fn`` w.r.t. every entry of tensor ``x``."""
    import torch

    g = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = float(fn())
            flat[k] = orig - h
            down = float(fn())
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def top2_gap(S, axis):
    """Smallest gap between the best and second-best score along ``axis``."""
    s = np.sort(np.asarray(S), axis=axis)
    best = np.take(s, -1, axis=axis)
    second = np.take(s, -2, axis=axis)
    return float(np.min(best - second))
