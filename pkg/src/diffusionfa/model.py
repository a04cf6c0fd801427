"""Latent-factor covariance structure for a p-dimensional diffusion.

The observed process decomposes as X = Lambda f + e with loading matrix
Lambda = (I_k, A)^T, factor covariance Sigma_ff (k x k, per unit time) and
independent unique variances sigma_i^2.  The implied increment covariance is

    Sigma(theta) = Lambda Sigma_ff Lambda^T + Diag(sigma_1^2, ..., sigma_p^2)

with the free parameters packed as theta = (vec A, vech Sigma_ff,
sigma_1^2, ..., sigma_p^2) of length q = (p-k)k + k(k+1)/2 + p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .matrixcalc import (
    duplication_pinv,
    kron,
    require_symmetric,
    unvec,
    vec,
    vech,
    vech_indices,
)

REGIMES = ("ergodic", "non-ergodic")


class WeightMatrixError(ValueError):
    """The vech-scale weight matrix is not positive definite.

    Signals an invalid parameter point (e.g. a unique variance driven to
    zero), not numerical noise; callers may backtrack instead of
    regularizing.
    """


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions and sampling scheme of a factor-model estimation problem.

    Attributes
    ----------
    p : observed dimension
    k : number of common factors, 1 <= k < p
    regime : "ergodic" (T -> infinity) or "non-ergodic" (T fixed); affects
        bookkeeping and documentation only -- all estimator formulas agree.
    n : number of increments on the observation grid
    h : grid step, so T = n*h
    """

    p: int
    k: int
    regime: str = "ergodic"
    n: int = 0
    h: float = 0.0

    def __post_init__(self):
        if self.p < 2:
            raise ValueError("p must be >= 2")
        if not 1 <= self.k < self.p:
            raise ValueError(f"k must satisfy 1 <= k < p, got k={self.k}, p={self.p}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")

    @property
    def q(self):
        """Number of free parameters, (p-k)k + k(k+1)/2 + p."""
        p, k = self.p, self.k
        return (p - k) * k + k * (k + 1) // 2 + p

    @property
    def pbar(self):
        return self.p * (self.p + 1) // 2

    @property
    def df(self):
        """Residual degrees of freedom p(p+1)/2 - q of the fitted structure."""
        return self.pbar - self.q

    @property
    def testable(self):
        return self.df >= 1

    @property
    def T(self):
        return self.n * self.h


@dataclass(frozen=True)
class ParamVector:
    """Free parameters of the factor structure.

    a : (p-k) x k free block of the loading matrix
    sigma_ff : k x k symmetric factor covariance (symmetrized on input; PSD
        is *not* enforced -- fits report an eigenvalue diagnostic instead)
    sigma_ee : length-p unique variances, strictly positive when
        ``strict`` (the default).  Fitted values searched over a box that
        admits the boundary may carry non-positive entries (Heywood case);
        such results are constructed with ``strict=False`` and flagged.
    """

    a: np.ndarray
    sigma_ff: np.ndarray
    sigma_ee: np.ndarray
    strict: bool = True

    def __post_init__(self):
        a = np.atleast_2d(np.array(self.a, dtype=float))
        sff = require_symmetric(self.sigma_ff, name="sigma_ff")
        see = np.array(self.sigma_ee, dtype=float).ravel()
        k = sff.shape[0]
        if a.size == 0:
            a = a.reshape((0, k))
        if a.shape[1] != k:
            raise ValueError(f"a has {a.shape[1]} columns but sigma_ff is {k}x{k}")
        p = a.shape[0] + k
        if see.size != p:
            raise ValueError(f"sigma_ee has length {see.size}, expected p={p}")
        if self.strict and np.any(see <= 0):
            raise ValueError("unique variances must be strictly positive")
        for name, val in (("a", a), ("sigma_ff", sff), ("sigma_ee", see)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def k(self):
        return self.sigma_ff.shape[0]

    @property
    def p(self):
        return self.a.shape[0] + self.k


@dataclass(frozen=True)
class CovStructure:
    """Sigma(theta), the weight matrix W(theta) and the Jacobian at theta."""

    sigma: np.ndarray
    w: np.ndarray
    delta: np.ndarray


def pack(params):
    """Pack a ParamVector into the canonical vector (vec A, vech Sff, sigma^2)."""
    return np.concatenate(
        [vec(params.a), vech(params.sigma_ff, check=False), params.sigma_ee]
    )


def unpack(v, spec, strict=True):
    """Inverse of :func:`pack` for the dimensions in ``spec``."""
    v = np.asarray(v, dtype=float).ravel()
    p, k = spec.p, spec.k
    if v.size != spec.q:
        raise ValueError(f"parameter vector has length {v.size}, expected {spec.q}")
    n_a = (p - k) * k
    n_ff = k * (k + 1) // 2
    a = unvec(v[:n_a], p - k, k)
    sff = np.zeros((k, k))
    rows, cols = vech_indices(k)
    sff[rows, cols] = v[n_a : n_a + n_ff]
    sff[cols, rows] = v[n_a : n_a + n_ff]
    return ParamVector(a=a, sigma_ff=sff, sigma_ee=v[n_a + n_ff :], strict=strict)


def loading_matrix(params):
    """Full p x k loading matrix (I_k stacked on the free block)."""
    return np.vstack([np.eye(params.k), params.a])


def sigma_of_theta(params):
    """Implied p x p increment covariance Lambda Sff Lambda^T + Diag(sigma^2)."""
    lam = loading_matrix(params)
    sigma = lam @ params.sigma_ff @ lam.T
    sigma = (sigma + sigma.T) / 2.0
    sigma[np.diag_indices_from(sigma)] += params.sigma_ee
    return sigma


def weight_matrix(sigma):
    """vech-scale asymptotic covariance 2 * pinv(D) (Sigma x Sigma) pinv(D)^T.

    Entrywise, for vech positions (i,j) and (k,l) this equals
    Sigma_ik Sigma_jl + Sigma_il Sigma_jk.  Raises WeightMatrixError if
    ``sigma`` is not positive definite (which is equivalent to W not being
    positive definite).
    """
    sigma = require_symmetric(sigma, name="sigma")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise WeightMatrixError(
            "covariance is not positive definite; weight matrix undefined"
        ) from None
    dp = duplication_pinv(sigma.shape[0])
    w = 2.0 * dp @ kron(sigma, sigma) @ dp.T
    return (w + w.T) / 2.0


def solve_weight(w, rhs):
    """Solve W x = rhs via a symmetric PD factorization.

    Raises WeightMatrixError when the factorization fails, flagging an
    invalid parameter point rather than silently regularizing.
    """
    try:
        return cho_solve(cho_factor(w, lower=True), rhs)
    except np.linalg.LinAlgError:
        raise WeightMatrixError("weight matrix factorization failed") from None


def sigma_gradient_stack(params):
    """Partial derivatives of Sigma(theta), stacked as a (q, p, p) array.

    Slice order matches :func:`pack`: the (p-k)k loading entries
    (column-major), then the k(k+1)/2 vech(Sigma_ff) coordinates, then the
    p unique variances.  Sigma is quadratic in A and linear in the rest, so
    every slice is exact.
    """
    p, k = params.p, params.k
    q = (p - k) * k + k * (k + 1) // 2 + p
    lam = loading_matrix(params)
    g = lam @ params.sigma_ff  # p x k; column s is d(Sigma)/dA_{rs} up to placement
    out = np.zeros((q, p, p))
    pos = 0
    for s in range(k):
        for r in range(p - k):
            m = k + r
            out[pos, m, :] += g[:, s]
            out[pos, :, m] += g[:, s]
            pos += 1
    rows, cols = vech_indices(k)
    for u, v in zip(rows, cols):
        lu, lv = lam[:, u], lam[:, v]
        if u == v:
            out[pos] = np.outer(lu, lu)
        else:
            out[pos] = np.outer(lu, lv) + np.outer(lv, lu)
        pos += 1
    for i in range(p):
        out[pos, i, i] = 1.0
        pos += 1
    return out


def delta_jacobian(params):
    """Analytic Jacobian of vech Sigma(theta) in theta, shape (pbar, q)."""
    stack = sigma_gradient_stack(params)
    rows, cols = vech_indices(params.p)
    return stack[:, rows, cols].T


def cov_structure(params):
    """Bundle Sigma(theta), W(theta) and the Jacobian at theta."""
    sigma = sigma_of_theta(params)
    return CovStructure(sigma=sigma, w=weight_matrix(sigma), delta=delta_jacobian(params))


def sigma_ff_min_eigenvalue(params):
    """Smallest eigenvalue of the factor covariance block.

    Negative values indicate a boundary (Heywood-style) solution; fits
    surface this as a diagnostic rather than constraining the search.
    """
    return float(np.linalg.eigvalsh(params.sigma_ff)[0])
