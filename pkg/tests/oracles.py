"""Independent reference implementations used only by the tests.

Everything here is written with plain Python loops or textbook formulas so
it shares no code path with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


# -- linear algebra ----------------------------------------------------------

def jacobi_eigenvalues(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol * max(1.0, np.abs(A).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = s, -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def top_singular_value(W: np.ndarray) -> float:
    return math.sqrt(max(jacobi_eigenvalues(W.T @ W)[0], 0.0))


# -- finite differences ------------------------------------------------------

def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# -- losses ------------------------------------------------------------------

def _dot(a, b) -> float:
    return sum(float(x) * float(y) for x, y in zip(a, b))


def _nll(anchor, candidates_cross, candidates_self, pos_index, self_index) -> float:
    """-log softmax of the positive; self index excluded from the self block."""
    logits = [_dot(anchor, c) for c in candidates_cross]
    logits += [_dot(anchor, c) for k, c in enumerate(candidates_self) if k != self_index]
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[pos_index]


def instance_loss_loop(h: np.ndarray, h2: np.ndarray) -> float:
    B, T, _ = h.shape
    total = 0.0
    for t in range(T):
        for i in range(B):
            total += _nll(h[i, t], [h2[j, t] for j in range(B)], [h[j, t] for j in range(B)], i, i)
    return total / (B * T)


def temporal_loss_loop(h: np.ndarray, h2: np.ndarray) -> float:
    B, T, _ = h.shape
    total = 0.0
    for i in range(B):
        for t in range(T):
            total += _nll(h[i, t], [h2[i, s] for s in range(T)], [h[i, s] for s in range(T)], t, t)
    return total / (B * T)


def max_pool_loop(h: np.ndarray) -> np.ndarray:
    B, T, d = h.shape
    out = np.zeros((B, T // 2, d))
    for i in range(B):
        for t in range(T // 2):
            for k in range(d):
                out[i, t, k] = max(h[i, 2 * t, k], h[i, 2 * t + 1, k])
    return out


def hierarchical_levels_loop(h: np.ndarray, h2: np.ndarray) -> list[float]:
    levels = []
    while h.shape[1] > 1:
        levels.append(0.5 * (instance_loss_loop(h, h2) + temporal_loss_loop(h, h2)))
        h, h2 = max_pool_loop(h), max_pool_loop(h2)
    levels.append(0.5 * instance_loss_loop(h, h2))
    return levels


def byol_loss_loop(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    vals = []
    for x, y in zip(a, b):
        vals.append(2.0 - 2.0 * _dot(x, y) / (math.sqrt(_dot(x, x)) * math.sqrt(_dot(y, y))))
    return sum(vals) / len(vals)


# -- statistics --------------------------------------------------------------

def rbf_loop(x, y, sigma: float) -> float:
    return math.exp(-sum((float(a) - float(b)) ** 2 for a, b in zip(x, y)) / (2.0 * sigma * sigma))


def mmd_loop(Z: np.ndarray, X: np.ndarray, sigma: float) -> float:
    m = len(Z)
    zz = sum(rbf_loop(Z[i], Z[j], sigma) for i in range(m) for j in range(m))
    xx = sum(rbf_loop(X[i], X[j], sigma) for i in range(m) for j in range(m))
    zx = sum(rbf_loop(Z[i], X[j], sigma) for i in range(m) for j in range(m))
    return (zz + xx - 2.0 * zx) / (m * m)


def matrix_normal_logpdf_kron(X: np.ndarray, M: np.ndarray, U: np.ndarray, V: np.ndarray) -> float:
    """Vectorised density: vec(X) ~ N(vec(M), V kron U) with column stacking."""
    x = X.reshape(-1, order="F") - M.reshape(-1, order="F")
    S = np.kron(V, U)
    n = x.size
    _, logdet = np.linalg.slogdet(S)
    quad = float(x @ np.linalg.inv(S) @ x)
    return -0.5 * (n * math.log(2 * math.pi) + logdet + quad)


# -- detection ---------------------------------------------------------------

def margin_f1_loop(split_indices, alarms, labels, margin: int, stride: int) -> float:
    hits = [int(i) for i, a in zip(split_indices, alarms) if a]
    tp = sum(1 for cp in labels if any(abs(a - cp) <= margin for a in hits))
    unmatched = sorted(a for a in hits if all(abs(a - cp) > margin for cp in labels))
    fp = 0
    for k, a in enumerate(unmatched):
        if k == 0 or a - unmatched[k - 1] != stride:
            fp += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / len(labels) if len(labels) else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def sweep_oracle(split_indices, statistic, labels, margin: int, stride: int) -> tuple[float, float]:
    """Exhaustive sweep: score every threshold between consecutive values.

    Returns (best F1, chosen threshold) using the documented choice rule:
    among maximal runs of optimal adjacent intervals pick the widest
    (lowest on ties) and take its midpoint.
    """
    u = sorted(set(float(s) for s in statistic))
    if len(u) == 1:
        return 0.0, u[0] + 1.0
    # interval k lies between edges[k] and edges[k+1]
    edges = [-math.inf] + u + [math.inf]
    scores = []
    for k in range(len(edges) - 1):
        cut = edges[k]
        scores.append(margin_f1_loop(split_indices, [s > cut for s in statistic], labels, margin, stride))
    best = max(scores)
    runs, cur = [], None
    for k, s in enumerate(scores):
        if abs(s - best) <= 1e-12:
            cur = [k, k] if cur is None else [cur[0], k]
        elif cur is not None:
            runs.append(cur)
            cur = None
    if cur is not None:
        runs.append(cur)
    spread = max(u[-1] - u[0], 1.0)
    best_run, best_w = None, -1.0
    for a, b in runs:
        lo, hi = edges[a], edges[b + 1]
        w = hi - lo
        if w > best_w:
            best_run, best_w = (lo, hi), w
    lo, hi = best_run
    if math.isinf(hi):
        return best, (u[-1] + 1.0 if math.isinf(lo) else max(lo + 1.0, u[-1] + 1.0))
    if math.isinf(lo):
        return best, hi - spread
    return best, 0.5 * (lo + hi)
