import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from vbsv.band import BandSymMatrix, build_hth
from vbsv.errors import FitError, NotPositiveDefiniteError
from vbsv.harness import synthetic_var
from vbsv.model import Dataset, EquationData, build_equation_data, simulate_univariate_sv
from vbsv.prior import MinnesotaHyper, PriorSpec
from vbsv.svapprox import GaussianApprox, SVTarget, kl_objective
from vbsv.vb import (
    ELBODecreaseWarning,
    FitOptions,
    ThetaPosterior,
    compute_shat2,
    cycle,
    elbo,
    elbo_closed_form,
    fit_equation,
    fit_homoscedastic_equation,
    fit_var,
    initial_state,
    o_weights,
    update_h,
    update_h0,
    update_sigma_h2,
    update_theta,
)


def sv_regression(seed, T=60, k=3, sigma_h2=0.1):
    rng = np.random.default_rng(seed)
    z, h = simulate_univariate_sv(sigma_h2, 0.0, T, rng)
    X = rng.normal(size=(T, k))
    y = X @ rng.normal(scale=0.5, size=k) + z
    return EquationData(1, y, X), PriorSpec(np.zeros(k), np.ones(k))


def run_cycles(eq, prior, method, n):
    state, h_init = initial_state(eq, prior)
    opts = FitOptions(sv_method=method)
    for _ in range(n):
        state = cycle(eq, state, prior, opts, h_init)
        h_init = state.h_approx.mean
    return state


class TestShat2:
    def test_point_mass(self, rng):
        eq, _ = sv_regression(0, T=10)
        th = rng.normal(size=3)
        np.testing.assert_array_equal(compute_shat2(eq, th), (eq.y - eq.X @ th) ** 2)

    def test_scalar_trace(self):
        eq = EquationData(1, np.array([1.0, 2.0, 3.0]), np.ones((3, 1)))
        np.testing.assert_allclose(compute_shat2(eq, [1.0], np.array([[2.0]])), [0.5, 1.5, 4.5])

    def test_dense_oracle(self, rng):
        eq, _ = sv_regression(1, T=10)
        th = rng.normal(size=3)
        A = rng.normal(size=(3, 3))
        K = A @ A.T + np.eye(3)
        Kinv = np.linalg.inv(K)
        expect = (eq.y - eq.X @ th) ** 2 + np.array([x @ Kinv @ x for x in eq.X])
        np.testing.assert_allclose(compute_shat2(eq, th, K), expect, rtol=1e-12)
        post = update_theta(eq, np.ones(10), PriorSpec(np.zeros(3), np.ones(3)))
        expect = (eq.y - eq.X @ post.mean) ** 2 + np.array([x @ np.linalg.inv(post.precision) @ x for x in eq.X])
        np.testing.assert_allclose(compute_shat2(eq, post.mean, post), expect, rtol=1e-12)


class TestUpdateTheta:
    def test_scalar(self):
        post = update_theta(EquationData(1, np.array([2.0]), np.array([[1.0]])), [1.0],
                            PriorSpec(np.zeros(1), np.ones(1)))
        assert post.precision[0, 0] == 2.0
        assert post.mean[0] == pytest.approx(1.0, abs=1e-15)

    def test_flat_prior_gls(self, rng):
        eq, _ = sv_regression(2, T=40)
        o = rng.uniform(0.2, 3.0, 40)
        post = update_theta(eq, o, PriorSpec(np.zeros(3), np.full(3, 1e12)))
        W = np.sqrt(o)
        gls = np.linalg.lstsq(eq.X * W[:, None], eq.y * W, rcond=None)[0]
        np.testing.assert_allclose(post.mean, gls, atol=1e-6)

    def test_dense_oracle(self, rng):
        eq, _ = sv_regression(3, T=30)
        o = rng.uniform(0.2, 3.0, 30)
        prior = PriorSpec(rng.normal(size=3), rng.uniform(0.1, 2.0, 3))
        K = np.diag(1 / prior.V_theta_diag) + eq.X.T @ np.diag(o) @ eq.X
        rhs = prior.theta0 / prior.V_theta_diag + eq.X.T @ (o * eq.y)
        post = update_theta(eq, o, prior)
        np.testing.assert_allclose(post.precision, K, rtol=1e-12)
        np.testing.assert_allclose(post.mean, np.linalg.solve(K, rhs), rtol=1e-10)
        np.testing.assert_allclose(post.cov_diag(), np.diag(np.linalg.inv(K)), rtol=1e-10)
        assert post.log_det_precision() == pytest.approx(np.linalg.slogdet(K)[1], rel=1e-12)

    def test_empty_block(self):
        post = update_theta(EquationData(1, np.ones(4), np.zeros((4, 0))), np.ones(4),
                            PriorSpec(np.zeros(0), np.zeros(0)))
        assert post.k == 0 and post.log_det_precision() == 0.0

    def test_not_spd(self):
        with pytest.raises(NotPositiveDefiniteError):
            from vbsv.vb import _theta_posterior

            _theta_posterior(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2))


class TestUpdateH0:
    def test_hand_arithmetic(self):
        h0, K = update_h0(2.0, 1.0, 10.0)
        assert K == pytest.approx(1.1)
        assert h0 == pytest.approx(1.8182, abs=1e-4)

    def test_prior_only(self):
        assert update_h0(2.0, 0.0, 10.0)[0] == 0.0

    def test_flat_prior(self):
        assert update_h0(2.0, 1.0, 1e14)[0] == pytest.approx(2.0, abs=1e-12)


class TestUpdateSigma:
    def test_shape(self):
        ha = GaussianApprox(np.zeros(300), build_hth(300).add_diagonal(np.ones(300)))
        nu_hat, _, _ = update_sigma_h2(ha, 0.0, 1.0, PriorSpec(np.zeros(0), np.zeros(0)))
        assert nu_hat == 155

    def test_no_variation(self):
        prior = PriorSpec(np.zeros(0), np.zeros(0))
        ha = GaussianApprox(np.full(20, 0.3), build_hth(20).add_diagonal(np.ones(20)).scale(1e14))
        nu_hat, S_hat, e_inv = update_sigma_h2(ha, 0.3, 1e14, prior)
        assert S_hat == pytest.approx(prior.S, abs=1e-12)
        assert e_inv == nu_hat / S_hat

    def test_dense_trace(self, rng):
        T = 15
        prec = build_hth(T).scale(3.0).add_diagonal(rng.uniform(0.5, 2.0, T))
        ha = GaussianApprox(rng.normal(size=T), prec)
        D = build_hth(T).to_dense()
        expect = np.trace(D @ np.linalg.inv(prec.to_dense()))
        assert ha.trace_with(build_hth(T)) == pytest.approx(expect, rel=1e-10)
        prior = PriorSpec(np.zeros(0), np.zeros(0))
        _, S_hat, _ = update_sigma_h2(ha, 0.2, 4.0, prior)
        dev = ha.mean - 0.2
        assert S_hat == pytest.approx(prior.S + 0.5 * (dev @ D @ dev + expect + 0.25), rel=1e-12)


class TestUpdateH:
    def test_global_vs_taylor(self):
        eq, prior = sv_regression(4, T=80)
        state, h_init = initial_state(eq, prior)
        tay = update_h(eq, state, prior, "taylor", h_init)
        glo = update_h(eq, state, prior, "global", h_init)
        np.testing.assert_array_equal(tay.precision.bands, glo.precision.bands)
        assert not np.allclose(tay.mean, glo.mean)
        t = SVTarget(compute_shat2(eq, state.theta_hat, state.theta), state.e_inv_sigma2, state.h0_hat)
        assert kl_objective(t, glo, glo.mean) < kl_objective(t, glo, tay.mean)

    def test_unknown_method(self):
        eq, prior = sv_regression(4, T=20)
        state, _ = initial_state(eq, prior)
        with pytest.raises(ValueError):
            update_h(eq, state, prior, "homoscedastic")


def log_marginal_T1(y, x, prior):
    """``log p(y)`` for one observation by quadrature over ``h_1`` and ``sigma_h^2``."""
    ig = stats.invgamma(prior.nu, scale=prior.S)

    def p_h1(h):
        f = lambda s: stats.norm.pdf(h, 0.0, math.sqrt(prior.V_h0 + s)) * ig.pdf(s)
        return integrate.quad(f, 0, np.inf, epsabs=1e-13, limit=200)[0]

    v = x * x * prior.V_theta_diag[0]

    def integrand(h):
        return stats.norm.pdf(y, x * prior.theta0[0], math.sqrt(v + math.exp(h))) * p_h1(h)

    val, err = integrate.quad(integrand, -40, 40, epsabs=1e-12, limit=400, points=[-5, 0, 5])
    return math.log(val), err / val


class TestELBO:
    def test_bounded_by_marginal_likelihood(self):
        prior = PriorSpec(np.zeros(1), np.ones(1))
        eq = EquationData(1, np.array([0.7]), np.array([[1.0]]))
        res = fit_equation(eq, prior, FitOptions(tol=1e-10, max_iter=300))
        logp, relerr = log_marginal_T1(0.7, 1.0, prior)
        assert res.elbo <= logp + 10 * relerr
        # h_0 and h_1 are nearly collinear a priori (corr^2 ~ 1 - 0.004), which a
        # factorized q cannot represent; that alone costs about 2.8 nats here
        assert res.elbo > logp - 4.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(77)
        eq, prior = sv_regression(5, T=50)
        s = fit_equation(eq, prior).state
        N = 100_000
        th = s.theta_hat + np.linalg.solve(s.theta.chol.T, rng.standard_normal((3, N))).T
        h0 = s.h0_hat + rng.standard_normal(N) / math.sqrt(s.K_h0)
        sig = stats.invgamma.rvs(s.nu_hat, scale=s.S_hat, size=N, random_state=rng)
        h = s.h_approx.sample(rng, N)
        r = eq.y[None] - th @ eq.X.T
        d = np.diff(h, axis=1, prepend=h0[:, None])
        log_p = (stats.norm.logpdf(r, 0, np.exp(0.5 * h)).sum(1)
                 + stats.norm.logpdf(th, prior.theta0, np.sqrt(prior.V_theta_diag)).sum(1)
                 + stats.norm.logpdf(h0, 0, math.sqrt(prior.V_h0))
                 + stats.invgamma.logpdf(sig, prior.nu, scale=prior.S)
                 + stats.norm.logpdf(d, 0, np.sqrt(sig)[:, None]).sum(1))
        log_q = (stats.multivariate_normal(s.theta_hat, np.linalg.inv(s.K_theta)).logpdf(th)
                 + stats.norm.logpdf(h0, s.h0_hat, 1 / math.sqrt(s.K_h0))
                 + stats.invgamma.logpdf(sig, s.nu_hat, scale=s.S_hat)
                 + s.h_approx.log_density(h))
        w = log_p - log_q
        est, se = w.mean(), w.std(ddof=1) / math.sqrt(N)
        assert abs(est - elbo(eq, s, prior)) < 3 * se

    def test_closed_form_agrees_on_consistent_state(self):
        eq, prior = sv_regression(6)
        s = fit_equation(eq, prior).state
        _, S_hat, _ = update_sigma_h2(s.h_approx, s.h0_hat, s.K_h0, prior)
        s = replace(s, S_hat=S_hat)
        assert elbo(eq, s, prior) == pytest.approx(elbo_closed_form(eq, s, prior), abs=1e-9)

    def test_deterministic(self):
        eq, prior = sv_regression(6)
        a = fit_equation(eq, prior)
        b = fit_equation(eq, prior)
        assert a.elbo_trace == b.elbo_trace


class TestFitEquation:
    def test_shape_after_first_cycle(self):
        eq, prior = sv_regression(7, T=120)
        s = run_cycles(eq, prior, "global", 1)
        assert s.nu_hat == prior.nu + 60

    def test_fixed_point(self):
        eq, prior = sv_regression(8)
        s = run_cycles(eq, prior, "global", 600)
        opts = FitOptions()
        n = cycle(eq, s, prior, opts, s.h_approx.mean)
        assert np.max(np.abs(n.h_approx.mean - s.h_approx.mean)) < 1e-8
        assert np.max(np.abs(n.theta_hat - s.theta_hat)) < 1e-8
        assert abs(n.S_hat - s.S_hat) < 1e-8 and abs(n.h0_hat - s.h0_hat) < 1e-8
        assert abs(n.K_h0 - s.K_h0) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_global_trace_monotone(self, seed):
        eq, prior = sv_regression(seed, T=150)
        with warnings.catch_warnings():
            warnings.simplefilter("error", ELBODecreaseWarning)
            res = fit_equation(eq, prior)
        assert np.all(np.diff(res.elbo_trace) >= -1e-8)
        assert res.converged

    def test_error_context(self, monkeypatch):
        eq, prior = sv_regression(9, T=20)
        import vbsv.vb as vb

        def boom(*a, **k):
            raise NotPositiveDefiniteError(3)

        monkeypatch.setattr(vb, "update_h", boom)
        with pytest.raises(FitError) as ei:
            fit_equation(eq, prior)
        assert ei.value.context == {"equation": 1, "iteration": 1}

    def test_zero_column(self):
        eq, prior = sv_regression(10)
        eq0 = EquationData(1, eq.y, np.column_stack([eq.X[:, :2], np.zeros(eq.T), eq.X[:, 2:]]))
        prior0 = PriorSpec(np.array([0.0, 0.0, 0.4, 0.0]), np.array([1.0, 1.0, 0.3, 1.0]))
        a = fit_equation(eq, prior).state
        b = fit_equation(eq0, prior0).state
        np.testing.assert_allclose(b.theta_hat[[0, 1, 3]], a.theta_hat, atol=1e-10)
        assert b.theta_hat[2] == pytest.approx(0.4, abs=1e-12)
        np.testing.assert_allclose(b.h_approx.mean, a.h_approx.mean, atol=1e-10)

    @pytest.mark.xfail(strict=True, reason="mean-field coupling of sigma_h^2 and h converges "
                       "linearly; typically 70-95 cycles at T=300")
    def test_cycles_at_T300(self):
        its = []
        for seed in range(5):
            z, _ = simulate_univariate_sv(0.1, 0.0, 300, seed)
            res = fit_equation(EquationData(1, z, np.zeros((300, 0))), PriorSpec(np.zeros(0), np.zeros(0)))
            its.append(res.iterations)
        assert max(its) <= 50


class TestHomoscedastic:
    def test_known_variance_exact(self, rng):
        T, k, s2 = 40, 3, 0.7
        X = rng.normal(size=(T, k))
        y = X @ np.array([1.0, -0.5, 0.2]) + math.sqrt(s2) * rng.normal(size=T)
        prior = PriorSpec(rng.normal(size=k), rng.uniform(0.2, 2.0, k))
        res = fit_homoscedastic_equation(EquationData(1, y, X), prior, known_variance=s2)
        K = np.diag(1 / prior.V_theta_diag) + X.T @ X / s2
        exact = np.linalg.solve(K, prior.theta0 / prior.V_theta_diag + X.T @ y / s2)
        np.testing.assert_allclose(res.state.theta_hat, exact, atol=1e-10)
        np.testing.assert_allclose(res.state.K_theta, K, rtol=1e-12)

    def test_normal_inverse_gamma(self, rng):
        T, k = 50, 3
        X = rng.normal(size=(T, k))
        y = X @ np.array([0.3, 0.1, -0.4]) + 1.3 * rng.normal(size=T)
        prior = PriorSpec(np.array([0.1, 0.0, 0.0]), np.array([2.0, 0.5, 1.0]), nu_y=4.0, S_y=3.0)
        res = fit_homoscedastic_equation(EquationData(1, y, X), prior, FitOptions(tol=1e-14, max_iter=500),
                                         conjugate=True)
        Vinv = np.diag(1 / prior.V_theta_diag)
        A = Vinv + X.T @ X
        m = np.linalg.solve(A, Vinv @ prior.theta0 + X.T @ y)
        nu_n = prior.nu_y + T / 2
        S_n = prior.S_y + 0.5 * (y @ y + prior.theta0 @ Vinv @ prior.theta0 - m @ A @ m)
        np.testing.assert_allclose(res.state.theta_hat, m, rtol=1e-8)
        assert res.state.e_inv_sigma2 == pytest.approx(nu_n / S_n, rel=1e-8)
        assert res.converged

    def test_trace_monotone(self, rng):
        eq, prior = sv_regression(11, sigma_h2=0.0001)
        with warnings.catch_warnings():
            warnings.simplefilter("error", ELBODecreaseWarning)
            res = fit_homoscedastic_equation(eq, prior)
        assert np.all(np.diff(res.elbo_trace) >= -1e-8)

    def test_below_sv_on_sv_data(self):
        data, _ = synthetic_var(3, 300, 1, 5)
        hyper = MinnesotaHyper(0.04, 0.001)
        sv = fit_var(data, hyper, 1)
        homo = fit_var(data, hyper, 1, FitOptions(sv_method="homoscedastic"))
        assert homo.total_elbo < sv.total_elbo
        lv = homo.log_vol()
        assert np.all(lv == lv[0])


@pytest.fixture(scope="module")
def data():
    return synthetic_var(3, 120, 2, 21)[0]


class TestFitVar:
    def test_single_equation(self, data):
        one = Dataset.from_array(data.values[:, :1], data.variable_names[:1])
        hyper = MinnesotaHyper(0.04, 0.001)
        fv = fit_var(one, hyper, 2)
        res = fit_equation(build_equation_data(one, 1, 2), fv.priors[0])
        assert fv.results[0].elbo_trace == res.elbo_trace
        assert fv.total_elbo == res.elbo

    def test_order_and_jobs(self, data):
        hyper = MinnesotaHyper(0.04, 0.001)
        a = fit_var(data, hyper, 2)
        b = fit_var(data, hyper, 2, order=[3, 1, 2])
        c = fit_var(data, hyper, 2, jobs=3)
        for r in (b, c):
            for x, y in zip(a.results, r.results):
                assert x.elbo_trace == y.elbo_trace
                np.testing.assert_array_equal(x.state.h_approx.mean, y.state.h_approx.mean)
        assert a.total_elbo == pytest.approx(sum(r.elbo for r in a.results))

    def test_bad_order(self, data):
        with pytest.raises(ValueError):
            fit_var(data, MinnesotaHyper(0.04, 0.001), 2, order=[1, 1, 2])

    def test_outputs(self, data):
        fv = fit_var(data, MinnesotaHyper(0.04, 0.001), 2)
        assert fv.log_vol().shape == (data.T - 2, 3)
        assert len(fv.time_index) == data.T - 2
        rf = fv.reduced_form()
        assert rf.sigma_tilde(0).shape == (3, 3)


def test_theta_posterior_quad_rows(rng):
    A = rng.normal(size=(4, 4))
    K = A @ A.T + np.eye(4)
    post = ThetaPosterior(np.zeros(4), K, np.linalg.cholesky(K))
    X = rng.normal(size=(6, 4))
    np.testing.assert_allclose(post.quad_rows(X), np.einsum("ti,ij,tj->t", X, np.linalg.inv(K), X), rtol=1e-12)


def test_o_weights():
    ha = GaussianApprox(np.array([0.0, 1.0]), BandSymMatrix(np.array([[2.0, 4.0], [0.0, 0.0]])))
    np.testing.assert_allclose(o_weights(ha), np.exp([0.25, -1 + 0.125]))


def test_options_validation():
    with pytest.raises(ValueError):
        FitOptions(tol=0)
    with pytest.raises(ValueError):
        FitOptions(max_iter=0)
    with pytest.raises(ValueError):
        FitOptions(sv_method="exact")
