import numpy as np
import pytest
from scipy.optimize import minimize

from diffusionfa import (
    FitOptions,
    ModelSpec,
    RealisedCov,
    SamplePath,
    contrast,
    contrast_grad,
    default_bounds,
    default_init,
    fit,
    pack,
    parameter_box,
    quasi_loglik_excess,
    realised_cov,
    sigma_of_theta,
    simulate,
    unpack,
    vech,
    weight_matrix,
)
from diffusionfa.estimator import _Objective
from diffusionfa.model import solve_weight, delta_jacobian

from conftest import SIGMA_TRUE, make_sim_config, make_spec


def rcov_from_sigma(sigma, n=1000, h=1e-3):
    return RealisedCov(q=sigma, n=n, h=h)


def random_rcov(rng, p, n=500):
    m = rng.standard_normal((p, p))
    return RealisedCov(q=m @ m.T + p * np.eye(p), n=n, h=1e-3)


def random_params_for(rng, spec):
    from conftest import make_spec  # noqa: F401  (same module pattern)

    a = rng.standard_normal((spec.p - spec.k, spec.k))
    s = rng.standard_normal((spec.k, spec.k))
    from diffusionfa import ParamVector

    return ParamVector(a=a, sigma_ff=s @ s.T + 0.5 * np.eye(spec.k),
                       sigma_ee=rng.uniform(0.5, 3.0, spec.p))


def test_realised_cov_constant_path():
    x = np.tile([1.0, 2.0], (11, 1))
    path = SamplePath(times=np.arange(11) * 0.1, x=x)
    assert np.array_equal(realised_cov(path).q, np.zeros((2, 2)))


def test_realised_cov_hand_computed():
    x = np.array([[0.0, 0.0], [1.0, -1.0], [1.0, 1.0], [2.0, 1.0]])
    h = 0.5
    path = SamplePath(times=np.arange(4) * h, x=x)
    dx = np.diff(x, axis=0)
    expected = sum(np.outer(d, d) for d in dx) / (3 * h)
    rc = realised_cov(path)
    assert np.allclose(rc.q, expected, rtol=0, atol=1e-15)
    assert rc.n == 3
    assert rc.T == pytest.approx(1.5)


def test_realised_cov_needs_two_observations():
    with pytest.raises(ValueError, match="2 observations"):
        realised_cov(SamplePath(times=np.array([0.0]), x=np.zeros((1, 2))))


def test_realised_cov_permutation_equivariance():
    path = simulate(make_sim_config(n=50, seed=15))
    perm = [3, 0, 5, 1, 4, 2]
    permuted = SamplePath(times=path.times, x=path.x[:, perm])
    q1 = realised_cov(path).q
    q2 = realised_cov(permuted).q
    assert np.allclose(q2, q1[np.ix_(perm, perm)], rtol=0, atol=1e-12)


def test_contrast_zero_iff_zero_residual(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    assert contrast(rc, truth) == 0.0


def test_contrast_matches_direct_solve(truth):
    rng = np.random.default_rng(2)
    rc = random_rcov(rng, 6)
    resid = vech(rc.q) - vech(SIGMA_TRUE)
    w = weight_matrix(sigma_of_theta(truth))
    expected = resid @ np.linalg.solve(w, resid)
    assert contrast(rc, truth) == pytest.approx(expected, rel=1e-12)
    assert contrast(rc, truth) >= 0


def test_contrast_grad_zero_at_zero_residual(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    assert np.allclose(contrast_grad(rc, truth), np.zeros(17), rtol=0, atol=1e-10)


@pytest.mark.parametrize("p,k", [(3, 1), (6, 2)])
def test_contrast_grad_finite_differences(p, k):
    rng = np.random.default_rng(40 + p)
    spec = ModelSpec(p=p, k=k)
    for _ in range(20):
        rc = random_rcov(rng, p)
        params = random_params_for(rng, spec)
        theta = pack(params)
        grad = contrast_grad(rc, params)
        fd = np.zeros_like(grad)
        for j in range(spec.q):
            step = 1e-6 * (1 + abs(theta[j]))
            up = theta.copy()
            up[j] += step
            dn = theta.copy()
            dn[j] -= step
            fd[j] = (contrast(rc, unpack(up, spec, strict=False))
                     - contrast(rc, unpack(dn, spec, strict=False))) / (2 * step)
        assert np.max(np.abs(grad - fd) / (1.0 + np.abs(fd))) < 1e-5


def test_fixed_weight_gradient_is_residual_term_only(truth):
    # with W frozen, the gradient reduces to -2 Delta^T W^{-1} r exactly
    rng = np.random.default_rng(3)
    rc = random_rcov(rng, 6)
    spec = make_spec()
    w0 = weight_matrix(sigma_of_theta(truth))
    obj = _Objective(rc, spec, fixed_weight=True, w_init=w0)
    _, grad = obj(pack(truth))
    resid = vech(rc.q) - vech(SIGMA_TRUE)
    expected = -2.0 * delta_jacobian(truth).T @ solve_weight(w0, resid)
    assert np.allclose(grad, expected, rtol=1e-12, atol=1e-12)


def test_fit_zero_residual_fixed_point(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    spec = make_spec()
    res = fit(rc, spec, init=truth)
    assert res.converged
    assert res.contrast <= 1e-12
    assert np.allclose(pack(res.theta_hat), pack(truth), rtol=0, atol=1e-6)


def test_fit_recovers_from_perturbed_start(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    spec = make_spec()
    rng = np.random.default_rng(8)
    start = unpack(pack(truth) + rng.normal(0, 0.3, 17), spec, strict=False)
    res = fit(rc, spec, init=start)
    assert res.converged
    assert np.max(np.abs(pack(res.theta_hat) - pack(truth))) < 1e-4


def test_fit_simulated_data_close_to_truth(truth):
    path = simulate(make_sim_config(n=10000, h=1e-3, seed=77))
    rc = realised_cov(path)
    spec = make_spec(n=10000)
    res = fit(rc, spec, init=truth)
    assert res.converged
    err = np.abs(pack(res.theta_hat) - pack(truth))
    assert np.all(err < 5 * res.se + 1e-8)


def test_fit_default_init_reaches_truth_basin(truth):
    path = simulate(make_sim_config(n=10000, h=1e-3, seed=78))
    rc = realised_cov(path)
    res = fit(rc, make_spec(n=10000))
    assert res.converged
    err = np.abs(pack(res.theta_hat) - pack(truth))
    assert np.all(err < 5 * res.se + 1e-8)


def test_fit_reports_standard_errors(truth):
    path = simulate(make_sim_config(n=1000, seed=5))
    rc = realised_cov(path)
    res = fit(rc, make_spec(), init=truth)
    assert res.se.shape == (17,)
    assert np.all(res.se > 0)
    # asymptotic scale: se of the first loading ~ 0.11 at n = 1000
    assert res.se[0] == pytest.approx(0.11, rel=0.3)


def test_fit_time_rescaling_equivariance(truth):
    path = simulate(make_sim_config(n=500, seed=6))
    x, times = path.x, path.times
    c = 4.0
    scaled = SamplePath(times=times * c, x=x * np.sqrt(c))
    rc1 = realised_cov(path)
    rc2 = realised_cov(scaled)
    assert np.allclose(rc1.q, rc2.q, rtol=0, atol=1e-12)
    r1 = fit(rc1, make_spec(n=500), init=truth)
    r2 = fit(rc2, make_spec(n=500, h=c * 1e-3), init=truth)
    assert np.allclose(pack(r1.theta_hat), pack(r2.theta_hat), rtol=0, atol=1e-8)


def test_fit_consistency_sweep(truth):
    # estimation error shrinks monotonically along (n, h) refinements
    medians = []
    for n, h in [(1000, 1e-2), (10000, 1e-3), (100000, 1e-4)]:
        errs = []
        for seed in (1, 2, 3):
            path = simulate(make_sim_config(n=n, h=h, seed=seed))
            res = fit(realised_cov(path), make_spec(n=n, h=h), init=truth)
            errs.append(np.max(np.abs(pack(res.theta_hat) - pack(truth))))
        medians.append(np.median(errs))
    assert medians[0] > medians[1] > medians[2]


def test_fit_fixed_weight_variant(truth):
    # Gauss-Newton flavor: W frozen at the initial point still recovers the
    # zero-residual optimum and agrees with the default fit closely on data
    rc = rcov_from_sigma(SIGMA_TRUE)
    spec = make_spec()
    res = fit(rc, spec, init=truth, options=FitOptions(fixed_weight=True))
    assert res.converged
    assert res.contrast <= 1e-12
    path = simulate(make_sim_config(n=5000, seed=61))
    rc2 = realised_cov(path)
    spec2 = make_spec(n=5000)
    res_w = fit(rc2, spec2, init=truth)
    res_f = fit(rc2, spec2, init=truth, options=FitOptions(fixed_weight=True))
    assert res_f.converged
    gap = np.abs(pack(res_w.theta_hat) - pack(res_f.theta_hat))
    assert np.all(gap < res_w.se)


def test_fit_rejects_init_outside_box(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    box = parameter_box(make_spec(), loading=(-1.0, 1.0))
    with pytest.raises(ValueError, match="outside"):
        fit(rc, make_spec(), init=truth, options=FitOptions(bounds=box))


def test_fit_nonconvergence_returns_partial_result(truth):
    path = simulate(make_sim_config(n=1000, seed=44))
    rc = realised_cov(path)
    res = fit(rc, make_spec(), options=FitOptions(max_iter=2))
    assert not res.converged
    assert res.iterations <= 2
    assert np.isfinite(res.contrast)


def test_fit_heywood_diagnostics_reported():
    # data with a tiny unique variance drives the estimate to the boundary
    rng = np.random.default_rng(10)
    sigma = SIGMA_TRUE.copy()
    spec = make_spec()
    box = parameter_box(spec)  # admits negative unique variances
    rc = rcov_from_sigma(sigma)
    res = fit(rc, spec, options=FitOptions(bounds=box))
    assert np.isfinite(res.min_unique_variance)
    assert np.isfinite(res.sigma_ff_min_eig)


def test_default_bounds_contain_default_init():
    rng = np.random.default_rng(31)
    rc = random_rcov(rng, 6)
    spec = make_spec()
    box = default_bounds(rc, spec)
    theta0 = pack(default_init(rc, spec))
    assert np.all(theta0 >= box[:, 0]) and np.all(theta0 <= box[:, 1])


def test_quasi_loglik_excess_zero_at_match(truth):
    rc = rcov_from_sigma(SIGMA_TRUE)
    assert quasi_loglik_excess(rc, truth) == pytest.approx(0.0, abs=1e-12)


def test_quasi_loglik_excess_closed_form_double(truth):
    # Q = Sigma(theta)/2 gives p (log 2 - 1 + 1/2)
    rc = rcov_from_sigma(SIGMA_TRUE / 2.0)
    expected = 6 * (np.log(2.0) - 0.5)
    assert quasi_loglik_excess(rc, truth) == pytest.approx(expected, abs=1e-12)


def test_quasi_loglik_excess_requires_pd_q(truth):
    rc = RealisedCov(q=np.diag([1.0, 1.0, 1.0, 0.0, 1.0, 1.0]), n=10, h=0.1)
    with pytest.raises(ValueError, match="positive definite"):
        quasi_loglik_excess(rc, truth)


def test_quasi_loglik_minimizer_agrees_with_contrast_fit(truth):
    # the two objectives share their optimum to o(n^{-1/2}): compare the
    # minimizers on one long simulated path
    n = 10**6
    path = simulate(make_sim_config(n=n, h=1e-4, seed=2026, regime="ergodic"))
    rc = realised_cov(path)
    spec = make_spec(n=n, h=1e-4, regime="ergodic")
    res_f = fit(rc, spec, init=truth)
    assert res_f.converged

    def m_objective(theta):
        return quasi_loglik_excess(rc, unpack(theta, spec, strict=False))

    bounds = default_bounds(rc, spec)
    res_m = minimize(m_objective, pack(res_f.theta_hat), method="Nelder-Mead",
                     options=dict(maxiter=20000, xatol=1e-9, fatol=1e-14))
    gap = np.abs(res_m.x - pack(res_f.theta_hat))
    assert np.all(gap <= 0.1 * res_f.se)
