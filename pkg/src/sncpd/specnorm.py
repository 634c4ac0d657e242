"""Spectral-norm estimation/projection, bi-Lipschitz certification, inversion.

Weights are capped with the power-iteration estimate ``lam``: when
``lam > c`` the weight is rescaled by ``c / lam``, otherwise left alone.
A residual block ``x + g(x)`` whose branch ``g`` is ``c``-Lipschitz with
``c < 1`` is invertible by the fixed-point iteration ``x <- y - g(x)``, and a
stack of ``L`` such blocks distorts distances by a factor inside
``[(1 - c)^L, (1 + c)^L]``.

The functions here take the encoder by duck typing: anything exposing
``depth``, ``sn_layers()``, ``residual(l, Z)``, ``block(l, Z)`` and
``activation_lipschitz`` works.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .errors import ContractError, ConvergenceError, DimensionError


@dataclass
class SNConfig:
    c: float = 0.9
    certify_iterations: int = 50
    invert_max_iter: int = 200
    invert_tol: float = 1e-8
    iterations_per_step: int = 1

    def __post_init__(self):
        if self.c <= 0:
            raise ContractError(f"norm cap c must be positive, got {self.c}")


@dataclass
class SpectralNormState:
    u: np.ndarray
    v: np.ndarray
    last_estimate: float = 0.0
    iterations_per_step: int = 1

    @classmethod
    def for_shape(cls, rows: int, cols: int, rng: np.random.Generator,
                  iterations_per_step: int = 1) -> "SpectralNormState":
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls(u / np.linalg.norm(u), v / np.linalg.norm(v), 0.0, iterations_per_step)

    def copy(self) -> "SpectralNormState":
        return SpectralNormState(self.u.copy(), self.v.copy(), self.last_estimate,
                                 self.iterations_per_step)


def weight_matrix(weight: np.ndarray) -> np.ndarray:
    """Matrix whose spectral norm bounds the operator norm of the layer.

    Dense weights are returned as-is.  A (out, in, width) convolution kernel
    becomes ``sqrt(width) * kernel.reshape(out, in * width)``: every input
    timestamp feeds at most ``width`` outputs, so the convolution's operator
    norm is at most ``sqrt(width)`` times the norm of the reshaped kernel.
    """
    if weight.ndim == 2:
        return weight
    if weight.ndim == 3:
        out, cin, width = weight.shape
        return math.sqrt(width) * weight.reshape(out, cin * width)
    raise DimensionError(f"no matrix form for weight of shape {weight.shape}")


def estimate_spectral_norm(W: np.ndarray, state: SpectralNormState, n_iter: int | None = None,
                           tol: float | None = None) -> float:
    """Power-iteration estimate of ||W||_2, warm-started from ``state``.

    ``state.u``/``state.v`` are updated in place.  With ``tol`` the loop stops
    early once the estimate changes by less than ``tol`` relative.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise DimensionError(f"spectral norm needs a matrix, got shape {W.shape}")
    if state.u.shape != (W.shape[0],) or state.v.shape != (W.shape[1],):
        raise DimensionError(f"state vectors {state.u.shape}/{state.v.shape} do not fit {W.shape}")
    n_iter = state.iterations_per_step if n_iter is None else n_iter
    u, v = state.u, state.v
    sigma = 0.0
    prev = -1.0
    for _ in range(n_iter):
        wv = W.T @ u
        nv = np.linalg.norm(wv)
        if nv == 0.0:
            sigma = 0.0
            break
        v = wv / nv
        wu = W @ v
        sigma = float(np.linalg.norm(wu))
        if sigma == 0.0:
            break
        u = wu / sigma
        if tol is not None and abs(sigma - prev) <= tol * sigma:
            break
        prev = sigma
    state.u, state.v = u, v
    state.last_estimate = sigma
    return sigma


def project_spectral_norm(W: np.ndarray, c: float, state: SpectralNormState,
                          n_iter: int | None = None, tol: float | None = None) -> np.ndarray:
    """``c * W / lam`` if the estimate ``lam`` exceeds ``c``, else ``W``."""
    if c <= 0:
        raise ContractError(f"norm cap c must be positive, got {c}")
    lam = estimate_spectral_norm(W, state, n_iter, tol)
    if lam > c:
        state.last_estimate = c
        return W * (c / lam)
    return W


def project_parameter(weight: np.ndarray, c: float, state: SpectralNormState,
                      n_iter: int | None = None, tol: float | None = None) -> float:
    """Cap a dense or convolutional weight in place; returns its norm afterwards."""
    lam = estimate_spectral_norm(weight_matrix(weight), state, n_iter, tol)
    if lam > c:
        weight *= c / lam
        state.last_estimate = c
        return c
    return lam


# -- certification -------------------------------------------------------

@dataclass
class CertificationReport:
    c: float
    depth: int
    layer_norms: dict[str, float]
    alpha: float
    L1: float
    L2: float
    empirical_ratio_min: float
    empirical_ratio_max: float
    block_ratio_min: float
    block_ratio_max: float
    kernel_ratio_min: float
    kernel_ratio_max: float
    sigma: float
    n_pairs: int
    n_skipped: int
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_record(self) -> str:
        """Flat ``key=value`` text, one entry per line."""
        rows = [
            ("status", "PASS" if self.passed else "FAIL"),
            ("c", self.c), ("depth", self.depth), ("alpha", self.alpha),
            ("L1", self.L1), ("L2", self.L2),
            ("empirical_ratio_min", self.empirical_ratio_min),
            ("empirical_ratio_max", self.empirical_ratio_max),
            ("block_ratio_min", self.block_ratio_min),
            ("block_ratio_max", self.block_ratio_max),
            ("kernel_ratio_min", self.kernel_ratio_min),
            ("kernel_ratio_max", self.kernel_ratio_max),
            ("sigma", self.sigma), ("n_pairs", self.n_pairs), ("n_skipped", self.n_skipped),
        ]
        rows += [(f"layer_norm.{k}", v) for k, v in self.layer_norms.items()]
        rows += [("violation", v) for v in self.violations]
        return "".join(f"{k}={_fmt(v)}\n" for k, v in rows)


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def bilipschitz_band(alpha: float, depth: int) -> tuple[float, float]:
    return (1.0 - alpha) ** depth, (1.0 + alpha) ** depth


def layer_norms(model, n_iter: int = 50) -> dict[str, float]:
    """Warm-started power-iteration norm of every capped layer; model untouched."""
    out = {}
    for name, weight, state in model.sn_layers():
        out[name] = estimate_spectral_norm(weight_matrix(weight.data), state.copy(), n_iter)
    return out


def _local_gain(model, layer: int, X: np.ndarray, n_iter: int, rng: np.random.Generator):
    """Top singular value/vector of the Jacobian of block ``layer`` at X.

    Power iteration on J^T J: J v by central differences, J^T u by
    reverse-mode through the block.
    """
    eps = 1e-6
    v = rng.standard_normal(X.shape)
    v /= np.linalg.norm(v)
    gain = 0.0
    for _ in range(n_iter):
        jv = (model.block(layer, X + eps * v).data - model.block(layer, X - eps * v).data) / (2 * eps)
        Xt = dc.Tensor(X, requires_grad=True)
        out = model.block(layer, Xt)
        dc.backward((out * dc.Tensor(jv)).sum())
        jtjv = Xt.grad
        n = np.linalg.norm(jtjv)
        if n == 0.0:
            break
        v = jtjv / n
        gain = math.sqrt(n)
    return gain, v


def certify_bilipschitz(model, pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                        c: float | None = None, n_iter: int | None = None,
                        n_probe: int = 2, seed: int = 0) -> CertificationReport:
    """Measure distance distortion of the hidden map against the (1 -/+ c)^L band.

    ``pairs`` are inputs to the residual stack (shape (T, hidden) each).
    Checks, each adding a violation on failure:

    * every capped layer's 50-iteration norm is at most ``c (1 + 1e-4)``;
    * every pair's ratio ||h(X) - h(X')|| / ||X - X'|| lies in [L1, L2];
    * every block's ratio on the same pairs, and on ``n_probe`` pairs along
      the block's locally most expanded direction, lies in [1 - c, 1 + c].
    """
    sn = getattr(model, "sn", None)
    if c is None:
        if sn is None:
            raise ContractError("model has no norm cap; pass c explicitly")
        c = sn.c
    n_iter = (sn.certify_iterations if sn is not None else 50) if n_iter is None else n_iter
    depth = model.depth
    L1, L2 = bilipschitz_band(c, depth)
    lo_b, hi_b = 1.0 - c, 1.0 + c
    tol = 1e-4

    norms = layer_norms(model, n_iter)
    alpha = max(norms.values(), default=0.0) * model.activation_lipschitz
    violations = [f"layer_norm:{k}={v:.6g}>c" for k, v in norms.items() if v > c * (1 + tol)]

    kept = [(np.asarray(a, float), np.asarray(b, float)) for a, b in pairs]
    distinct = [(a, b) for a, b in kept if np.linalg.norm(a - b) > 0.0]
    n_skipped = len(kept) - len(distinct)
    if not distinct:
        raise ContractError("no distinct pairs to certify")
    A = np.stack([a for a, _ in distinct])
    B = np.stack([b for _, b in distinct])
    dx = np.linalg.norm((A - B).reshape(len(A), -1), axis=1)

    block_min, block_max = np.inf, -np.inf
    za, zb = A, B
    for layer in range(depth):
        na = model.block(layer, za).data
        nb = model.block(layer, zb).data
        denom = np.linalg.norm((za - zb).reshape(len(za), -1), axis=1)
        r = np.linalg.norm((na - nb).reshape(len(na), -1), axis=1) / denom
        block_min, block_max = min(block_min, r.min()), max(block_max, r.max())
        if r.min() < lo_b * (1 - 1e-9) or r.max() > hi_b * (1 + 1e-9):
            violations.append(f"block_ratio:block{layer} in [{r.min():.6g}, {r.max():.6g}]")
        # probe the most expanded direction at a few realistic inputs
        rng = np.random.default_rng(seed + layer)
        for p in range(min(n_probe, len(za))):
            gain_base = za[p]
            _, direction = _local_gain(model, layer, gain_base, 20, rng)
            step = 1e-3 * max(np.linalg.norm(gain_base), 1.0)
            d_out = model.block(layer, gain_base + step * direction).data - model.block(layer, gain_base).data
            rp = np.linalg.norm(d_out) / step
            block_min, block_max = min(block_min, rp), max(block_max, rp)
            if rp < lo_b * (1 - 1e-9) or rp > hi_b * (1 + 1e-9):
                violations.append(f"block_probe:block{layer} ratio={rp:.6g}")
        za, zb = na, nb

    dy = np.linalg.norm((za - zb).reshape(len(za), -1), axis=1)
    ratio = dy / dx
    if ratio.min() < L1 or ratio.max() > L2:
        bad = int(((ratio < L1) | (ratio > L2)).sum())
        violations.append(f"pair_ratio:{bad} of {len(ratio)} outside [{L1:.6g}, {L2:.6g}]")

    # RBF kernel ratio k(h(X), h(X')) / k(X, X') with a shared bandwidth
    sigma = float(np.median(dx)) if np.median(dx) > 0 else 1.0
    log_k = (dx ** 2 - dy ** 2) / (2 * sigma ** 2)

    return CertificationReport(
        c=float(c), depth=depth, layer_norms=norms, alpha=float(alpha), L1=L1, L2=L2,
        empirical_ratio_min=float(ratio.min()), empirical_ratio_max=float(ratio.max()),
        block_ratio_min=float(block_min), block_ratio_max=float(block_max),
        kernel_ratio_min=float(np.exp(log_k.min())), kernel_ratio_max=float(np.exp(log_k.max())),
        sigma=sigma, n_pairs=len(distinct), n_skipped=n_skipped, violations=violations,
    )


def sphere_pairs(n: int, steps: int, dims: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random pairs of (steps, dims) windows whose rows lie on the unit sphere."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2, n, steps, dims))
    X /= np.linalg.norm(X, axis=-1, keepdims=True)
    return [(X[0, i], X[1, i]) for i in range(n)]


# -- inversion -----------------------------------------------------------

def invert_residual_block(residual: Callable[[np.ndarray], np.ndarray], y: np.ndarray,
                          max_iter: int = 200, tol: float = 1e-8,
                          return_iterations: bool = False):
    """Solve ``x + residual(x) = y`` by ``x <- y - residual(x)``.

    Stops at the first iterate whose residual ||x + g(x) - y|| is below
    ``tol``; raises :class:`ConvergenceError` otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    x = y.copy()
    res = np.inf
    for it in range(max_iter + 1):
        nxt = y - np.asarray(residual(x))
        res = float(np.linalg.norm(x - nxt))
        if not np.isfinite(res):
            raise ConvergenceError("fixed-point iteration diverged", res, it)
        if res < tol:
            return (x, it) if return_iterations else x
        if it < max_iter:
            x = nxt
    raise ConvergenceError("fixed-point iteration did not converge", res, max_iter)


def invert_hidden(model, Y: np.ndarray, max_iter: int | None = None, tol: float | None = None) -> np.ndarray:
    """Invert the residual stack block by block, last block first."""
    sn = getattr(model, "sn", None)
    max_iter = max_iter or (sn.invert_max_iter if sn else 200)
    tol = tol or (sn.invert_tol if sn else 1e-8)
    X = np.asarray(Y, dtype=np.float64)
    for layer in reversed(range(model.depth)):
        X = invert_residual_block(lambda Z, l=layer: model.residual(l, Z).data, X, max_iter, tol)
    return X


def force_layer_norm(model, layer_name: str, target: float, worst_case: bool = False) -> None:
    """Set one block layer's matrix-form norm to ``target`` (adversarial tests).

    By default the existing weight is rescaled.  With ``worst_case`` the
    kernel becomes ``target / width`` times the identity on every tap, for
    which the matrix-form bound is attained: slowly varying inputs are
    amplified by exactly ``target``.  The bias is zeroed so the activation
    runs at unit slope around the origin.
    """
    for name, weight, state in model.sn_layers():
        if name != layer_name:
            continue
        if worst_case:
            out, cin, width = weight.shape
            if out != cin:
                raise DimensionError("worst-case kernel needs a square layer")
            weight.data[...] = (target / width) * np.eye(out)[:, :, None]
            model.params[layer_name.replace(".weight", ".bias")].data[...] = 0.0
            return
        st = state.copy()
        lam = estimate_spectral_norm(weight_matrix(weight.data), st, 1000, tol=1e-14)
        weight.data *= target / lam
        return
    raise KeyError(layer_name)


__all__ = [
    "SNConfig", "SpectralNormState", "CertificationReport", "weight_matrix",
    "estimate_spectral_norm", "project_spectral_norm", "project_parameter",
    "bilipschitz_band", "layer_norms", "certify_bilipschitz", "sphere_pairs",
    "invert_residual_block", "invert_hidden", "force_layer_norm",
]

