"""Test statistics: RBF kernel, biased MMD, cosine distance, matrix-normal
likelihood ratios, Mahalanobis scores, and the two preservation checks.

Everything density-related is in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .errors import ContractError, DecompositionError, DimensionError
from .specnorm import invert_hidden

EPS = 1e-12


# -- kernels and MMD -------------------------------------------------------

@dataclass
class KernelConfig:
    sigma: float
    kind: str = "rbf"
    K: float = 1.0

    def __post_init__(self):
        if self.kind != "rbf":
            raise ContractError(f"unsupported kernel {self.kind!r}")
        if not self.sigma > 0:
            raise ContractError(f"bandwidth must be positive, got {self.sigma}")


def _sigma(kernel) -> float:
    sigma = kernel.sigma if isinstance(kernel, KernelConfig) else float(kernel)
    if not sigma > 0:
        raise ContractError(f"bandwidth must be positive, got {sigma}")
    return sigma


def rbf_kernel(x, x2, sigma) -> float:
    x, x2 = np.ravel(x).astype(np.float64), np.ravel(x2).astype(np.float64)
    if x.shape != x2.shape:
        raise DimensionError(f"kernel inputs differ in size: {x.size} vs {x2.size}")
    return float(np.exp(-np.sum((x - x2) ** 2) / (2.0 * _sigma(sigma) ** 2)))


def rbf_gram(A: np.ndarray, B: np.ndarray, sigma) -> np.ndarray:
    """Kernel matrix between the rows of A and B (rows flattened)."""
    A = np.asarray(A, dtype=np.float64).reshape(len(A), -1)
    B = np.asarray(B, dtype=np.float64).reshape(len(B), -1)
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * _sigma(sigma) ** 2))


def median_heuristic(X: np.ndarray) -> float:
    """Median pairwise Euclidean distance between rows; 1.0 if all coincide."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    if len(X) < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 0 else 1.0


def mmd_biased(Z: np.ndarray, Xi: np.ndarray, kernel) -> float:
    """Squared MMD V-statistic including the diagonal terms."""
    Z, Xi = np.asarray(Z, dtype=np.float64), np.asarray(Xi, dtype=np.float64)
    if len(Z) == 0 or len(Xi) == 0:
        raise ContractError("MMD needs two nonempty samples")
    if len(Z) != len(Xi):
        raise ContractError(f"MMD samples must have equal size, got {len(Z)} and {len(Xi)}")
    if Z.shape[1:] != Xi.shape[1:]:
        raise DimensionError(f"sample point shapes differ: {Z.shape[1:]} vs {Xi.shape[1:]}")
    kzz = rbf_gram(Z, Z, kernel).mean()
    kxx = rbf_gram(Xi, Xi, kernel).mean()
    kzx = rbf_gram(Z, Xi, kernel).mean()
    return max(float(kzz - 2.0 * kzx + kxx), 0.0)


def mmd_test_threshold(m: int, K: float = 1.0, alpha: float = 0.05) -> float:
    """Acceptance boundary for MMD_b (the square root of :func:`mmd_biased`)."""
    if m < 1 or K <= 0 or not 0.0 < alpha <= 1.0:
        raise ContractError(f"invalid threshold arguments m={m}, K={K}, alpha={alpha}")
    return math.sqrt(2.0 * K / m) * (1.0 + math.sqrt(2.0 * math.log(1.0 / alpha)))


def mmd_test(Z: np.ndarray, Xi: np.ndarray, kernel, alpha: float = 0.05) -> bool:
    """True when the equal-distribution hypothesis is rejected."""
    K = kernel.K if isinstance(kernel, KernelConfig) else 1.0
    return math.sqrt(mmd_biased(Z, Xi, kernel)) >= mmd_test_threshold(len(Z), K, alpha)


def cosine_distance(y, y2) -> float:
    y, y2 = np.ravel(y).astype(np.float64), np.ravel(y2).astype(np.float64)
    if y.shape != y2.shape:
        raise DimensionError(f"vectors differ in size: {y.size} vs {y2.size}")
    denom = max(np.linalg.norm(y) * np.linalg.norm(y2), EPS)
    return float(np.clip(1.0 - (y @ y2) / denom, 0.0, 2.0))


# -- matrix-normal likelihoods ---------------------------------------------

def _cholesky(S: np.ndarray, what: str):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"{what} must be square, got {S.shape}")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise DecompositionError(f"{what} is not symmetric")
    try:
        return cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise DecompositionError(f"{what} is not positive definite") from exc


@dataclass
class MatrixNormalParams:
    M: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=np.float64))
        t, D = self.M.shape
        if self.U.shape != (t, t) or self.V.shape != (D, D):
            raise DimensionError(f"covariances {self.U.shape}, {self.V.shape} do not fit mean {self.M.shape}")
        self._cu = _cholesky(self.U, "row covariance U")
        self._cv = _cholesky(self.V, "column covariance V")

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        Lu, Lv = np.tril(self._cu[0]), np.tril(self._cv[0])
        shape = self.M.shape if n is None else (n, *self.M.shape)
        return self.M + Lu @ rng.standard_normal(shape) @ Lv.T


def matrix_normal_logpdf(X: np.ndarray, params: MatrixNormalParams) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape != params.M.shape:
        raise DimensionError(f"observation shape {X.shape} differs from mean {params.M.shape}")
    t, D = X.shape
    R = X - params.M
    quad = np.trace(cho_solve(params._cv, R.T) @ cho_solve(params._cu, R))
    logdet_u = 2.0 * np.log(np.diag(params._cu[0])).sum()
    logdet_v = 2.0 * np.log(np.diag(params._cv[0])).sum()
    return float(-0.5 * (t * D * math.log(2 * math.pi) + D * logdet_u + t * logdet_v + quad))


def likelihood_ratio(X: np.ndarray, p0: MatrixNormalParams, pinf: MatrixNormalParams) -> float:
    """log p0(X) - log p_inf(X)."""
    return matrix_normal_logpdf(X, p0) - matrix_normal_logpdf(X, pinf)


@dataclass
class LRCheck:
    raw: np.ndarray
    embedded: np.ndarray

    @property
    def max_abs_diff(self) -> float:
        return float(np.max(np.abs(self.raw - self.embedded)))

    def agreement(self, log_h: float, margin: float = 1e-3) -> tuple[float, int]:
        """Fraction of samples with |raw - log h| > margin whose decisions agree."""
        keep = np.abs(self.raw - log_h) > margin
        if not keep.any():
            return 1.0, 0
        same = (self.raw[keep] > log_h) == (self.embedded[keep] > log_h)
        return float(same.mean()), int(keep.sum())


def invert_input_map(model, Z: np.ndarray) -> np.ndarray:
    """Solve ``X A^T + b = Z`` for the encoder's square affine input map."""
    A = model.params["proj.weight"].data
    b = model.params["proj.bias"].data
    if A.shape[0] != A.shape[1]:
        raise DecompositionError(f"input map {A.shape} is not square")
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= s[0] * 1e-12:
        raise DecompositionError("input map is singular")
    R = np.asarray(Z, dtype=np.float64) - b
    return np.linalg.solve(A, R.reshape(-1, R.shape[-1]).T).T.reshape(R.shape)


def lr_preservation_check(samples, model, p0: MatrixNormalParams, pinf: MatrixNormalParams,
                          max_iter: int | None = None, tol: float | None = None) -> LRCheck:
    """Raw log-LR of each X next to the log-LR of its embedding Y = h(g(X)).

    The embedded densities are the push-forwards of p0 and p_inf through
    the invertible encoder, so the log-LR at Y is evaluated at the
    recovered preimage; the two Jacobian factors are identical and cancel.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    raw = np.array([likelihood_ratio(X, p0, pinf) for X in samples])
    A = model.params["proj.weight"].data
    if A.shape[0] != A.shape[1] or np.linalg.matrix_rank(A) < A.shape[0]:
        raise DecompositionError("encoder input map is not square and invertible")
    Y = model.hidden(samples).data
    Xr = invert_input_map(model, invert_hidden(model, Y, max_iter, tol))
    embedded = np.array([likelihood_ratio(X, p0, pinf) for X in Xr])
    return LRCheck(raw, embedded)


# -- kernel preservation ---------------------------------------------------

@dataclass
class KernelPreservationReport:
    sigma: float
    L1: float
    L2: float
    C_hat: float
    C_tilde: float
    ratio_min: float
    ratio_max: float
    log_ratio_min: float
    log_ratio_max: float
    n_pairs: int
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_record(self) -> str:
        rows = [("status", "PASS" if self.passed else "FAIL"), ("sigma", self.sigma),
                ("L1", self.L1), ("L2", self.L2), ("C_hat", self.C_hat), ("C_tilde", self.C_tilde),
                ("ratio_min", self.ratio_min), ("ratio_max", self.ratio_max),
                ("log_ratio_min", self.log_ratio_min), ("log_ratio_max", self.log_ratio_max),
                ("n_pairs", self.n_pairs)]
        rows += [("violation", v) for v in self.violations]
        return "".join(f"{k}={format(v, '.17g') if isinstance(v, float) else v}\n" for k, v in rows)


def kernel_preservation_check(model, pairs, L1: float, L2: float,
                              sigma: float | None = None) -> KernelPreservationReport:
    """Check k(h(X), h(X')) / k(X, X') against bounds implied by [L1, L2].

    Pairs are windows whose rows lie on the unit sphere.  With
    r = ||X - X'||^2 the bi-Lipschitz band gives, per pair,
    log ratio in [-(L2^2 - 1) r / 2 sigma^2, (1 - L1^2) r / 2 sigma^2], and
    r <= 4 * rows on the sphere turns these into global constants
    C_hat <= ratio <= C_tilde.
    """
    A = np.stack([np.asarray(a, dtype=np.float64) for a, _ in pairs])
    B = np.stack([np.asarray(b, dtype=np.float64) for _, b in pairs])
    norms = np.linalg.norm(np.concatenate([A, B]).reshape(-1, A.shape[-1]), axis=1)
    if not np.allclose(norms, 1.0, atol=1e-9):
        raise ContractError("kernel preservation pairs must have unit-norm rows")
    if sigma is None:
        sigma = median_heuristic(np.concatenate([A, B]))
    r = np.sum((A - B).reshape(len(A), -1) ** 2, axis=1)
    dy = np.sum((model.forward_hidden(A).data - model.forward_hidden(B).data).reshape(len(A), -1) ** 2,
                axis=1)
    two_s2 = 2.0 * sigma ** 2
    log_ratio = (r - dy) / two_s2
    lo, hi = -(L2 ** 2 - 1.0) * r / two_s2, (1.0 - L1 ** 2) * r / two_s2
    r_max = 4.0 * A.shape[1] if A.ndim == 3 else 4.0
    C_hat = math.exp(-(L2 ** 2 - 1.0) * r_max / two_s2)
    C_tilde = math.exp((1.0 - L1 ** 2) * r_max / two_s2)
    slack = 1e-9 * (1.0 + np.abs(log_ratio))
    violations = []
    bad = (log_ratio < lo - slack) | (log_ratio > hi + slack)
    if bad.any():
        violations.append(f"pair_bound:{int(bad.sum())} of {len(r)} pairs outside their per-pair bound")
    ratio = np.exp(log_ratio)
    if ratio.min() < C_hat * (1 - 1e-9) or ratio.max() > C_tilde * (1 + 1e-9):
        violations.append("global_bound:kernel ratio outside [C_hat, C_tilde]")
    return KernelPreservationReport(float(sigma), L1, L2, C_hat, C_tilde, float(ratio.min()),
                                    float(ratio.max()), float(log_ratio.min()), float(log_ratio.max()),
                                    len(r), violations)


# -- Mahalanobis -----------------------------------------------------------

@dataclass
class GaussianFit:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self._chol = _cholesky(self.covariance, "covariance")

    def score(self, Y: np.ndarray) -> np.ndarray:
        R = np.atleast_2d(np.asarray(Y, dtype=np.float64)) - self.mean
        return np.sqrt(np.maximum(np.sum(R * cho_solve(self._chol, R.T).T, axis=1), 0.0))


def fit_gaussian(E: np.ndarray, ridge: float = 1e-6) -> GaussianFit:
    """Sample mean and covariance with ``ridge * trace / d`` added to the diagonal."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or len(E) < 2:
        raise ContractError(f"need at least two embeddings to fit a Gaussian, got shape {E.shape}")
    cov = np.atleast_2d(np.cov(E, rowvar=False))
    d = cov.shape[0]
    cov = cov + ridge * max(np.trace(cov) / d, EPS) * np.eye(d)
    return GaussianFit(E.mean(axis=0), cov)


def mahalanobis_score(y, mean, covariance) -> float:
    return float(GaussianFit(np.asarray(mean, dtype=np.float64),
                             np.asarray(covariance, dtype=np.float64)).score(y)[0])
