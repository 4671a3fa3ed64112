import math

import numpy as np
import pytest
import torch
from scipy import integrate, stats

from tpnica.exceptions import CholeskyError, ConfigError, GammaQuantileError
from tpnica.lattice import KernelSpec, Lattice
from tpnica.processes import (
    GAUSSIAN,
    GammaParams,
    TpPrior,
    gamma_kl,
    gamma_prior,
    gamma_quantile,
    mvt_logpdf,
    sample_gamma,
    sample_tp_components,
)


class TestPriors:
    @pytest.mark.parametrize("shape,rate", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
    def test_gamma_params_must_be_positive(self, shape, rate):
        with pytest.raises(ConfigError):
            GammaParams(shape, rate)

    def test_gamma_prior_is_half_nu(self):
        params = gamma_prior(4.0)
        assert (params.shape, params.rate) == (2.0, 2.0)
        assert params.mean == 1.0

    def test_gaussian_limit_has_no_gamma_prior(self):
        prior = TpPrior(GAUSSIAN, KernelSpec(1.0, 1.0))
        assert prior.is_gaussian
        with pytest.raises(ConfigError):
            prior.tau_prior()

    def test_degrees_of_freedom_must_be_positive(self):
        with pytest.raises(ConfigError):
            TpPrior(0.0, KernelSpec(1.0, 1.0))


class TestMvtLogpdf:
    def test_standard_cauchy_at_mode(self):
        value = mvt_logpdf([0.0], [0.0], [[1.0]], 1.0)
        assert float(value) == pytest.approx(-1.1447298858494, abs=1e-10)

    def test_gaussian_limit(self):
        value = mvt_logpdf([0.0], [0.0], [[1.0]], math.inf)
        assert float(value) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_matches_gamma_mixture_quadrature(self):
        x = np.array([1.0, -1.0])
        prior = stats.gamma(a=2.0, scale=0.5)

        def integrand(tau):
            gaussian = stats.multivariate_normal(mean=np.zeros(2), cov=np.eye(2) / tau)
            return gaussian.pdf(x) * prior.pdf(tau)

        density, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=1e-14, epsrel=1e-12)
        value = float(mvt_logpdf(x, np.zeros(2), np.eye(2), 4.0))
        assert value == pytest.approx(math.log(density), abs=1e-8)
        assert value == pytest.approx(math.log(4.0 / (27.0 * math.pi)), abs=1e-12)

    def test_large_nu_approaches_gaussian(self):
        x, mu = [0.3, -1.2, 0.5], [0.1, 0.0, -0.2]
        Sigma = [[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]]
        student = float(mvt_logpdf(x, mu, Sigma, 1e8))
        gaussian = stats.multivariate_normal(mean=mu, cov=Sigma).logpdf(x)
        assert student == pytest.approx(gaussian, abs=1e-5)
        assert float(mvt_logpdf(x, mu, Sigma, math.inf)) == pytest.approx(gaussian, abs=1e-12)

    @pytest.mark.parametrize("nu", [1.0, 2.5, 4.0, 30.0])
    @pytest.mark.parametrize("variance", [0.5, 2.0])
    def test_univariate_density_integrates_to_one(self, nu, variance):
        def density(x):
            return math.exp(float(mvt_logpdf([x], [0.0], [[variance]], nu)))

        total, _ = integrate.quad(density, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
        assert abs(total - 1.0) < 1e-6

    def test_not_positive_definite(self):
        with pytest.raises(CholeskyError):
            mvt_logpdf([0.0, 0.0], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 4.0)


class TestSampleGamma:
    def test_exponential_quantile(self):
        value = sample_gamma(GammaParams(1.0, 1.0), 1.0 - math.exp(-1.0))
        assert value == pytest.approx(1.0, rel=1e-12)

    def test_scaled_exponential_median(self):
        assert sample_gamma(GammaParams(1.0, 2.0), 0.5) == pytest.approx(
            math.log(2.0) / 2.0, rel=1e-12
        )

    def test_shape_two_median(self):
        value = sample_gamma(GammaParams(2.0, 2.0), 0.5)
        assert value == pytest.approx(0.839173, abs=1e-6)
        assert stats.gamma(a=2.0, scale=0.5).cdf(value) == pytest.approx(0.5, abs=1e-12)

    def test_matches_scipy_quantile(self):
        for alpha in (0.5, 2.0, 30.0):
            for u in (1e-4, 0.1, 0.5, 0.9, 0.9999):
                expected = stats.gamma(a=alpha, scale=1.0 / 3.0).ppf(u)
                assert sample_gamma(GammaParams(alpha, 3.0), u) == pytest.approx(
                    expected, rel=1e-7
                )

    def test_monotone_in_base_uniform(self):
        draws = sample_gamma(GammaParams(2.0, 2.0), np.linspace(0.01, 0.99, 50))
        assert np.all(np.diff(draws) > 0)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.5, 1.5])
    def test_base_uniform_outside_unit_interval(self, u):
        with pytest.raises(GammaQuantileError):
            sample_gamma(GammaParams(2.0, 2.0), u)

    def test_shape_gradient_matches_finite_differences(self):
        alpha = torch.tensor(2.5, dtype=torch.float64, requires_grad=True)
        tau = gamma_quantile(alpha, 1.5, 0.3)
        (grad,) = torch.autograd.grad(tau, alpha)

        h = 1e-5
        upper = sample_gamma(GammaParams(2.5 + h, 1.5), 0.3)
        lower = sample_gamma(GammaParams(2.5 - h, 1.5), 0.3)
        assert float(grad) == pytest.approx((upper - lower) / (2 * h), rel=1e-6)

    def test_rate_gradient_is_exact(self):
        beta = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
        tau = gamma_quantile(2.5, beta, 0.3)
        (grad,) = torch.autograd.grad(tau, beta)
        assert float(grad) == pytest.approx(-float(tau) / 1.5, rel=1e-14)

    def test_tensor_parameters_keep_the_graph(self):
        shape = torch.tensor([2.0, 3.0], dtype=torch.float64, requires_grad=True)
        tau = sample_gamma(GammaParams(shape, torch.tensor([2.0, 2.0])), torch.tensor([0.4, 0.6]))
        assert isinstance(tau, torch.Tensor)
        assert tau.requires_grad


class TestGammaKl:
    def test_identical_distributions(self):
        assert float(gamma_kl(GammaParams(2.0, 2.0), GammaParams(2.0, 2.0))) == pytest.approx(
            0.0, abs=1e-15
        )

    def test_exponential_closed_form(self):
        # KL(Exp(1) || Exp(2)) = log(1/2) + 2 - 1
        value = float(gamma_kl(GammaParams(1.0, 1.0), GammaParams(1.0, 2.0)))
        assert value == pytest.approx(1.0 - math.log(2.0), abs=1e-14)

    def test_matches_monte_carlo(self):
        q, p = stats.gamma(a=3.0, scale=1.0), stats.gamma(a=2.0, scale=0.5)
        tau = q.rvs(size=200_000, random_state=np.random.default_rng(7))
        log_ratio = q.logpdf(tau) - p.logpdf(tau)
        estimate = log_ratio.mean()
        stderr = log_ratio.std(ddof=1) / math.sqrt(tau.size)

        value = float(gamma_kl(GammaParams(3.0, 1.0), GammaParams(2.0, 2.0)))
        assert abs(value - estimate) < 3 * stderr

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            qa, qb, pa, pb = rng.uniform(0.1, 20.0, size=4)
            assert float(gamma_kl(GammaParams(qa, qb), GammaParams(pa, pb))) >= -1e-12

    def test_differentiable_in_q(self):
        shape = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        kl = gamma_kl(GammaParams(shape, 2.0), GammaParams(2.0, 2.0))
        (grad,) = torch.autograd.grad(kl, shape)
        assert math.isfinite(float(grad))


class TestSampleTpComponents:
    def test_degenerate_kernel(self):
        lattice = Lattice.grid((4, 4))
        priors = [TpPrior(4.0, KernelSpec(1.0, 1e-30)) for _ in range(2)]
        components, taus = sample_tp_components(lattice, priors, seed=0)
        assert components.shape == (2, 16)
        assert taus.shape == (2,)
        assert np.abs(components).max() < 1e-10

    def test_gaussian_components_have_unit_tau(self):
        lattice = Lattice.grid((3,))
        priors = [TpPrior(GAUSSIAN, KernelSpec(1.0, 1.0))]
        _, taus = sample_tp_components(lattice, priors, seed=1)
        assert taus.tolist() == [1.0]

    def test_same_seed_is_bitwise_identical(self):
        lattice = Lattice.grid((3, 3))
        priors = [TpPrior(4.0, KernelSpec(1.0, 1.0)), TpPrior(4.0, KernelSpec(2.0, 0.5))]
        first = sample_tp_components(lattice, priors, seed=11)
        second = sample_tp_components(lattice, priors, seed=11)
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])

    def test_common_random_numbers_across_nu(self):
        lattice = Lattice.grid((3, 3))
        kernels = [KernelSpec(1.0, 1.0), KernelSpec(2.0, 0.5)]
        student, taus = sample_tp_components(lattice, [TpPrior(4.0, k) for k in kernels], seed=5)
        gaussian, _ = sample_tp_components(lattice, [TpPrior(GAUSSIAN, k) for k in kernels], seed=5)
        assert np.allclose(student * np.sqrt(taus)[:, None], gaussian, rtol=1e-12, atol=1e-15)

    def test_single_location_marginal_is_student_t(self):
        lattice = Lattice([[0.0]])
        priors = [TpPrior(4.0, KernelSpec(1.0, 1.0))]
        rng = np.random.default_rng(2024)
        draws = np.array(
            [sample_tp_components(lattice, priors, rng)[0][0, 0] for _ in range(10_000)]
        )
        assert stats.kstest(draws, stats.t(df=4).cdf).pvalue > 0.01

    def test_gaussian_covariance_matches_kernel(self):
        lattice = Lattice.grid((3,))
        spec = KernelSpec(1.5, 2.0)
        priors = [TpPrior(GAUSSIAN, spec)]
        rng = np.random.default_rng(99)
        n = 50_000
        draws = np.stack([sample_tp_components(lattice, priors, rng)[0][0] for _ in range(n)])
        empirical = np.cov(draws, rowvar=False)
        distance = np.subtract.outer(np.arange(3.0), np.arange(3.0))
        expected = 2.0 * np.exp(-0.5 * distance ** 2 / 1.5 ** 2)
        # Var(S_ij) = (K_ij^2 + K_ii K_jj) / n for Gaussian draws
        variances = np.diag(expected)
        stderr = np.sqrt((expected ** 2 + np.outer(variances, variances)) / n)
        assert bool((np.abs(empirical - expected) < 3 * stderr).all())
