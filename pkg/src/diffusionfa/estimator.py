"""Realised covariance and minimum-contrast estimation of the factor model.

The increment covariance is estimated by

    Q = (1/T) sum_i (X_{t_i} - X_{t_{i-1}})(X_{t_i} - X_{t_{i-1}})^T

and the parameters by minimizing the weighted quadratic form

    F(theta) = (vech Q - vech Sigma(theta))^T W(theta)^{-1} (vech Q - vech Sigma(theta))

over a box, with W recomputed at every iterate by default.  sqrt(n) times
the estimation error is asymptotically normal with covariance
(Delta^T W^{-1} Delta)^{-1}, which provides the reported standard errors.

The minimizer is a quasi-Newton (BFGS) iteration with projection onto the
box and an Armijo backtracking line search; a non-positive-definite weight
matrix at a trial point is treated as an infeasible step and backtracked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrixcalc import duplication_pinv, require_symmetric, unvec, vech, vech_indices
from .model import (
    ParamVector,
    WeightMatrixError,
    delta_jacobian,
    pack,
    sigma_ff_min_eigenvalue,
    sigma_gradient_stack,
    sigma_of_theta,
    solve_weight,
    unpack,
    weight_matrix,
)

_ARMIJO_C1 = 1e-4
_MIN_STEP_FRACTION = 1e-13
_MIN_DECREASE_ULPS = 4.0


@dataclass(frozen=True)
class RealisedCov:
    """Realised covariance matrix with its sampling metadata."""

    q: np.ndarray
    n: int
    h: float

    def __post_init__(self):
        q = require_symmetric(self.q, name="realised covariance")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @property
    def p(self):
        return self.q.shape[0]

    @property
    def T(self):
        return self.n * self.h


@dataclass(frozen=True)
class FitResult:
    """Minimum-contrast fit with asymptotic standard errors.

    ``avar`` is (Delta^T W^{-1} Delta)^{-1} evaluated at the estimate and
    ``se[i] = sqrt(avar[i, i] / n)``.  ``sigma_ff_min_eig`` and
    ``min_unique_variance`` surface boundary (Heywood-style) solutions;
    they are diagnostics, not errors.
    """

    theta_hat: ParamVector
    contrast: float
    avar: np.ndarray
    se: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    n: int
    sigma_ff_min_eig: float
    min_unique_variance: float
    message: str = ""

    @property
    def theta(self):
        """The estimate as a packed vector."""
        return pack(self.theta_hat)


@dataclass(frozen=True)
class FitOptions:
    """Optimizer controls.

    ``bounds`` is a (q, 2) array of [lower, upper] per packed coordinate;
    when omitted a data-scaled default box is used (see
    :func:`default_bounds`).  ``fixed_weight=True`` freezes W at the
    initial point (Gauss-Newton variant); the default recomputes W(theta)
    at every iterate.
    """

    grad_tol: float = 1e-8
    step_tol: float = 1e-12
    max_iter: int = 2000
    max_evals: int = 12000
    bounds: np.ndarray | None = None
    fixed_weight: bool = False


def realised_cov(path):
    """Sum of outer products of increments divided by the horizon T."""
    x = np.asarray(path.x, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 observations to form increments")
    dx = np.diff(x, axis=0)
    n = dx.shape[0]
    h = path.h
    q = dx.T @ dx / (n * h)
    return RealisedCov(q=(q + q.T) / 2.0, n=n, h=h)


def contrast(rcov, params):
    """Weighted quadratic distance between vech(Q) and vech(Sigma(theta)).

    Non-negative, and zero exactly on the zero-residual manifold.  Raises
    WeightMatrixError when Sigma(theta) is not positive definite.
    """
    sigma = sigma_of_theta(params)
    resid = vech(rcov.q, check=False) - vech(sigma, check=False)
    w = weight_matrix(sigma)
    return float(resid @ solve_weight(w, resid))


def contrast_grad(rcov, params):
    """Analytic gradient of :func:`contrast` in the packed parameters.

    Both terms of the derivative are included: the residual term
    -2 Delta^T W^{-1} r and the term from differentiating W^{-1}(theta).
    """
    sigma = sigma_of_theta(params)
    p = sigma.shape[0]
    resid = vech(rcov.q, check=False) - vech(sigma, check=False)
    w = weight_matrix(sigma)
    u = solve_weight(w, resid)
    stack = sigma_gradient_stack(params)
    rows, cols = vech_indices(p)
    delta = stack[:, rows, cols]  # (q, pbar)
    # d(W)/d(theta_i) = 2 pinv(D) (dSigma_i x Sigma + Sigma x dSigma_i) pinv(D)^T
    # and u^T dW u collapses to 4 tr(V Sigma V dSigma_i) with V = unvec(pinv(D)^T u).
    v = unvec(duplication_pinv(p).T @ u, p)
    m = v @ sigma @ v
    return -2.0 * delta @ u - 4.0 * np.einsum("ipq,pq->i", stack, m)


def default_init(rcov, spec):
    """Heuristic starting point: zero loadings, factor variances from the
    top-left block of Q, unique variances at half the Q diagonal.

    Keeps Sigma(init) positive definite for any PSD Q with positive
    diagonal.
    """
    k = spec.k
    diag = np.diag(rcov.q)
    return ParamVector(
        a=np.zeros((spec.p - k, k)),
        sigma_ff=np.diag(diag[:k]),
        sigma_ee=0.5 * diag,
    )


def default_bounds(rcov, spec):
    """Data-scaled box: loadings in [-30, 30], factor covariances within
    four times the largest Q diagonal, unique variances in
    [1e-8, 2 max diag Q].

    The positivity floor guarantees Sigma(theta) stays positive definite
    everywhere in the box; searches over a box admitting non-positive
    unique variances (as in boundary-tolerant replication studies) must
    pass explicit bounds, e.g. via :func:`parameter_box`.
    """
    scale = float(np.max(np.diag(rcov.q)))
    if scale <= 0:
        raise ValueError("realised covariance has no positive diagonal entry")
    return parameter_box(
        spec,
        loading=(-30.0, 30.0),
        factor_cov=(-4.0 * scale, 4.0 * scale),
        unique_var=(1e-8, 2.0 * scale),
    )


def parameter_box(spec, loading=(-30.0, 30.0), factor_cov=(-30.0, 30.0),
                  unique_var=(-30.0, 30.0)):
    """Assemble a (q, 2) box from per-block (lower, upper) pairs.

    The default reproduces the flat [-30, 30] box on every coordinate.
    """
    p, k = spec.p, spec.k
    blocks = [
        np.tile(loading, ((p - k) * k, 1)),
        np.tile(factor_cov, (k * (k + 1) // 2, 1)),
        np.tile(unique_var, (p, 1)),
    ]
    box = np.vstack(blocks).astype(float)
    if np.any(box[:, 0] >= box[:, 1]):
        raise ValueError("each lower bound must be below its upper bound")
    return box


class _Objective:
    """Contrast value/gradient on packed vectors; infeasible points map to inf."""

    def __init__(self, rcov, spec, fixed_weight=False, w_init=None):
        self.rcov = rcov
        self.spec = spec
        self.q_vech = vech(rcov.q, check=False)
        self.fixed_weight = fixed_weight
        self.w0 = w_init
        self.rows, self.cols = vech_indices(spec.p)
        self.dpinv_t = duplication_pinv(spec.p).T
        self.evals = 0

    def __call__(self, x):
        self.evals += 1
        try:
            params = unpack(x, self.spec, strict=False)
            sigma = sigma_of_theta(params)
            resid = self.q_vech - vech(sigma, check=False)
            if self.fixed_weight:
                w = self.w0
                u = solve_weight(w, resid)
                f = float(resid @ u)
                stack = sigma_gradient_stack(params)
                grad = -2.0 * stack[:, self.rows, self.cols] @ u
            else:
                w = weight_matrix(sigma)
                u = solve_weight(w, resid)
                f = float(resid @ u)
                stack = sigma_gradient_stack(params)
                v = unvec(self.dpinv_t @ u, self.spec.p)
                m = v @ sigma @ v
                grad = (-2.0 * stack[:, self.rows, self.cols] @ u
                        - 4.0 * np.einsum("ipq,pq->i", stack, m))
            if not np.isfinite(f):
                return np.inf, None
            return f, grad
        except WeightMatrixError:
            return np.inf, None


def _projected_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def fit(rcov, spec, init=None, options=None):
    """Minimize the contrast over the box and report the fit.

    ``init`` must lie inside the box (it is the caller's responsibility to
    supply a consistent pair); with ``init=None`` the data-driven
    :func:`default_init` / :func:`default_bounds` pair is used.  A fit that
    exhausts ``max_iter`` or stalls before meeting the gradient criterion
    is returned with ``converged=False`` rather than raised.
    """
    opts = options or FitOptions()
    if spec.df < 0:
        raise ValueError(
            f"model has more parameters (q={spec.q}) than moments ({spec.pbar})")
    bounds = opts.bounds if opts.bounds is not None else default_bounds(rcov, spec)
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (spec.q, 2):
        raise ValueError(f"bounds must have shape {(spec.q, 2)}, got {bounds.shape}")
    lo, hi = bounds[:, 0], bounds[:, 1]

    if init is None:
        # pull clipped coordinates slightly inside the box: a corner start
        # leaves quasi-Newton steps nowhere to go
        margin = 0.01 * (hi - lo)
        x = np.clip(pack(default_init(rcov, spec)), lo + margin, hi - margin)
    else:
        x = pack(init)
        if np.any(x < lo) or np.any(x > hi):
            raise ValueError("initial point lies outside the box")

    w_init = None
    if opts.fixed_weight:
        w_init = weight_matrix(sigma_of_theta(unpack(x, spec, strict=False)))
    objective = _Objective(rcov, spec, fixed_weight=opts.fixed_weight, w_init=w_init)

    f, g = objective(x)
    if g is None:
        raise WeightMatrixError(
            "weight matrix is not positive definite at the initial point")

    identity = np.eye(spec.q)
    h_inv = identity
    h_fresh = True
    first_update = True
    iterations = 0
    converged = False
    message = "max iterations reached"
    pg_norm = float(np.max(np.abs(_projected_gradient(x, g, lo, hi))))

    min_decrease = _MIN_DECREASE_ULPS * np.finfo(float).eps

    def line_search(direction):
        # Armijo backtracking on the projected path; a step must decrease f
        # by an amount resolvable in float64, otherwise ulp-sized "progress"
        # feeds rounding noise into the curvature updates
        alpha = 1.0
        while alpha >= _MIN_STEP_FRACTION and objective.evals < opts.max_evals:
            x_try = np.clip(x + alpha * direction, lo, hi)
            step = x_try - x
            if np.max(np.abs(step)) == 0.0:
                return None
            f_try, g_try = objective(x_try)
            if (g_try is not None and f_try <= f + _ARMIJO_C1 * (g @ step)
                    and f - f_try >= min_decrease * (1.0 + abs(f))):
                return x_try, f_try, g_try
            alpha *= 0.5
        return None

    def at_precision_floor():
        # |grad| cannot fall below ~sqrt(2 lambda_max ulp(f)) in float64;
        # within a safety factor of that bound the point is converged to
        # machine resolution even though the nominal tolerance is unmet
        try:
            params = unpack(x, spec, strict=False)
            sigma = sigma_of_theta(params)
            w = weight_matrix(sigma)
            delta = delta_jacobian(params)
            info = 2.0 * delta.T @ solve_weight(w, delta)
            lam_max = float(np.linalg.eigvalsh(info)[-1])
        except WeightMatrixError:
            return False
        floor = np.sqrt(2.0 * max(lam_max, 1.0) * np.finfo(float).eps * (1.0 + abs(f)))
        return pg_norm <= 10.0 * floor

    while iterations < opts.max_iter:
        if pg_norm <= opts.grad_tol * (1.0 + abs(f)):
            converged = True
            message = "projected gradient within tolerance"
            break
        if objective.evals >= opts.max_evals:
            if at_precision_floor():
                converged = True
                message = "evaluation budget reached at the floating-point floor"
            else:
                message = "evaluation budget exhausted"
            break
        iterations += 1
        d = -h_inv @ g
        if d @ g > -1e-14 * np.linalg.norm(d) * np.linalg.norm(g):
            h_inv, h_fresh, first_update = identity, True, True
            d = -g
        found = line_search(d)
        if found is None and not h_fresh:
            # stale curvature produces unusable directions along the box;
            # restart from steepest descent before giving up
            h_inv, h_fresh, first_update = identity, True, True
            found = line_search(-g)
        if found is None:
            pg_norm = float(np.max(np.abs(_projected_gradient(x, g, lo, hi))))
            if pg_norm <= opts.grad_tol * (1.0 + abs(f)):
                converged = True
                message = "projected gradient within tolerance"
            elif at_precision_floor():
                converged = True
                message = "descent exhausted at the floating-point floor"
            else:
                message = "line search failed to make progress"
            break

        x_new, f_new, g_new = found
        step = x_new - x
        y = g_new - g
        sy = step @ y
        if sy > 1e-10 * np.linalg.norm(step) * np.linalg.norm(y):
            if first_update:
                h_inv = (sy / (y @ y)) * identity
                first_update = False
            rho = 1.0 / sy
            v = identity - rho * np.outer(step, y)
            h_inv = v @ h_inv @ v.T + rho * np.outer(step, step)
            h_fresh = False
        x, f, g = x_new, f_new, g_new
        pg_norm = float(np.max(np.abs(_projected_gradient(x, g, lo, hi))))
    else:
        if pg_norm <= opts.grad_tol * (1.0 + abs(f)):
            converged = True
            message = "projected gradient within tolerance"
        elif at_precision_floor():
            converged = True
            message = "iteration cap at the floating-point floor"

    theta_hat = unpack(x, spec, strict=False)
    sigma = sigma_of_theta(theta_hat)
    try:
        w = weight_matrix(sigma)
        delta = delta_jacobian(theta_hat)
        info = delta.T @ solve_weight(w, delta)
        try:
            avar = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            avar = np.linalg.pinv(info)
            message += "; information matrix singular, pseudoinverse used"
        se = np.sqrt(np.clip(np.diag(avar), 0.0, None) / rcov.n)
    except WeightMatrixError:
        avar = np.full((spec.q, spec.q), np.nan)
        se = np.full(spec.q, np.nan)
        message += "; weight matrix not PD at the estimate"
        converged = False

    return FitResult(
        theta_hat=theta_hat,
        contrast=f,
        avar=avar,
        se=se,
        converged=converged,
        iterations=iterations,
        gradient_norm=pg_norm,
        n=rcov.n,
        sigma_ff_min_eig=sigma_ff_min_eigenvalue(theta_hat),
        min_unique_variance=float(np.min(theta_hat.sigma_ee)),
        message=message,
    )


def quasi_loglik_excess(rcov, params):
    """Excess of the Gaussian quasi-likelihood optimum over theta.

    Equals log det Sigma(theta) - log det Q + tr(Sigma(theta)^{-1} Q) - p;
    non-negative, and zero exactly when Sigma(theta) == Q.  Requires a
    positive-definite Q (n >= p and a nondegenerate path).
    """
    q = rcov.q
    p = q.shape[0]
    sign_q, logdet_q = np.linalg.slogdet(q)
    if sign_q <= 0:
        raise ValueError("realised covariance must be positive definite")
    sigma = sigma_of_theta(params)
    sign_s, logdet_s = np.linalg.slogdet(sigma)
    if sign_s <= 0:
        raise WeightMatrixError("model covariance is not positive definite")
    return float(logdet_s - logdet_q + np.trace(np.linalg.solve(sigma, q)) - p)
