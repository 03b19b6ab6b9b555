"""Hot numeric kernels: adapter SGD, top-k selection, pairwise sorted-L1.

Each kernel has a numba @njit implementation and a pure-numpy fallback.
Set CONCEPTEVO_NO_NUMBA=1 to force the numpy path (also used when numba is
not importable). Integer outputs (top-k indices) are identical across the
two paths; float outputs agree to rounding because summation order differs.

benchmarks/bench_kernels.py compares both paths.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("CONCEPTEVO_NO_NUMBA", "").lower() in ("1", "true", "yes")

if not _DISABLE:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - mirror env without numba
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def active_backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# softmax cross-entropy SGD
#
# X: (N, C) f64 scores, y: (N,) int64 labels, w0: (C, Y) f64 initial weights.
# perms: (epochs, N) int64 pre-drawn shuffle per epoch (kept outside the
# kernel so both paths consume identical batch orderings).
# Returns (w, losses) where losses[e] is the full-batch objective after
# epoch e (cross-entropy plus l1_lambda * ||w||_1).
# ---------------------------------------------------------------------------


def _np_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_full_objective(x: np.ndarray, y: np.ndarray, w: np.ndarray, lam: float) -> float:
    p = _np_softmax(x @ w)
    n = x.shape[0]
    ce = -np.log(p[np.arange(n), y] + 1e-300).mean()
    return float(ce + lam * np.abs(w).sum())


def _np_sgd_train(x, y, w0, lr, lam, batch, perms):
    w = w0.copy()
    n = x.shape[0]
    losses = np.empty(perms.shape[0], dtype=np.float64)
    for e in range(perms.shape[0]):
        order = perms[e]
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            xb = x[idx]
            p = _np_softmax(xb @ w)
            p[np.arange(idx.shape[0]), y[idx]] -= 1.0
            g = xb.T @ p / idx.shape[0]
            if lam > 0.0:
                g = g + lam * np.sign(w)
            w -= lr * g
        losses[e] = _np_full_objective(x, y, w, lam)
    return w, losses


if HAS_NUMBA:

    @njit(cache=True)
    def _nb_full_objective(x, y, w, lam):
        n = x.shape[0]
        z = np.dot(x, w)
        ce = 0.0
        for i in range(n):
            m = z[i, 0]
            for j in range(1, z.shape[1]):
                if z[i, j] > m:
                    m = z[i, j]
            tot = 0.0
            for j in range(z.shape[1]):
                tot += np.exp(z[i, j] - m)
            ce += -(z[i, y[i]] - m - np.log(tot))
        reg = 0.0
        if lam > 0.0:
            for a in range(w.shape[0]):
                for b in range(w.shape[1]):
                    reg += abs(w[a, b])
        return ce / n + lam * reg

    @njit(cache=True)
    def _nb_sgd_train(x, y, w0, lr, lam, batch, perms):
        w = w0.copy()
        n = x.shape[0]
        n_classes = w.shape[1]
        losses = np.empty(perms.shape[0], dtype=np.float64)
        for e in range(perms.shape[0]):
            order = perms[e]
            for s in range(0, n, batch):
                stop = min(s + batch, n)
                b = stop - s
                idx = order[s:stop]
                xb = x[idx]
                z = np.dot(xb, w)
                for i in range(b):
                    m = z[i, 0]
                    for j in range(1, n_classes):
                        if z[i, j] > m:
                            m = z[i, j]
                    tot = 0.0
                    for j in range(n_classes):
                        z[i, j] = np.exp(z[i, j] - m)
                        tot += z[i, j]
                    for j in range(n_classes):
                        z[i, j] /= tot
                    z[i, y[idx[i]]] -= 1.0
                g = np.dot(xb.T, z) / b
                if lam > 0.0:
                    for a in range(w.shape[0]):
                        for c in range(w.shape[1]):
                            if w[a, c] > 0.0:
                                g[a, c] += lam
                            elif w[a, c] < 0.0:
                                g[a, c] -= lam
                w -= lr * g
            losses[e] = _nb_full_objective(x, y, w, lam)
        return w, losses


def sgd_train(x, y, w0, lr, lam, batch, perms):
    if HAS_NUMBA:
        return _nb_sgd_train(x, y, w0, lr, lam, batch, perms)
    return _np_sgd_train(x, y, w0, lr, lam, batch, perms)


def full_objective(x, y, w, lam) -> float:
    if HAS_NUMBA:
        return float(_nb_full_objective(x, y, w, lam))
    return _np_full_objective(x, y, w, lam)


# ---------------------------------------------------------------------------
# top-k column indices per row, descending value, ties to the lower index.
# Both paths produce identical integer output.
# ---------------------------------------------------------------------------


def _np_topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


if HAS_NUMBA:

    @njit(cache=True)
    def _nb_topk_indices(logits, k):
        n, m = logits.shape
        out = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            row = logits[i].copy()
            for slot in range(k):
                best = 0
                for j in range(1, m):
                    if row[j] > row[best]:
                        best = j
                out[i, slot] = best
                row[best] = -np.inf
        return out


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_topk_indices(logits, k)
    return _np_topk_indices(logits, k)


# ---------------------------------------------------------------------------
# pairwise mean |sorted_u - sorted_v| over pre-sorted columns, the
# equal-mass 1-D Wasserstein distance between empirical distributions.
# ---------------------------------------------------------------------------


def _np_pairwise_sorted_l1(cols: np.ndarray) -> np.ndarray:
    m = cols.shape[1]
    out = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        out[i] = np.abs(cols - cols[:, i : i + 1]).mean(axis=0)
    return out


if HAS_NUMBA:

    @njit(cache=True)
    def _nb_pairwise_sorted_l1(cols):
        n, m = cols.shape
        out = np.zeros((m, m), dtype=np.float64)
        for i in range(m):
            for j in range(i + 1, m):
                acc = 0.0
                for r in range(n):
                    acc += abs(cols[r, i] - cols[r, j])
                out[i, j] = acc / n
                out[j, i] = out[i, j]
        return out


def pairwise_sorted_l1(cols: np.ndarray) -> np.ndarray:
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if HAS_NUMBA:
        return _nb_pairwise_sorted_l1(cols)
    return _np_pairwise_sorted_l1(cols)
