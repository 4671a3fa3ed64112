import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import integrate, optimize, special

from .exceptions import CholeskyError, ConfigError, DimensionError, GammaQuantileError
from .lattice import (
    DTYPE,
    JITTER,
    KernelSpec,
    Lattice,
    Real,
    _all_positive,
    as_tensor,
    gram,
)

log = logging.getLogger("tpnica.processes")

GAUSSIAN = math.inf


@dataclass(frozen=True)
class GammaParams:
    shape: Real
    rate: Real

    def __post_init__(self):
        if not (_all_positive(self.shape) and _all_positive(self.rate)):
            raise ConfigError(
                "Gamma shape and rate must be positive, got ({}, {})".format(
                    self.shape, self.rate
                )
            )

    @property
    def mean(self) -> Real:
        return self.shape / self.rate


@dataclass(frozen=True)
class TpPrior:
    """
    Zero-mean t-process prior TP_nu(0, kernel). `nu = GAUSSIAN` (infinity)
    is the Gaussian-process limit.
    """

    nu: float
    kernel: KernelSpec

    def __post_init__(self):
        if not float(self.nu) > 0:
            raise ConfigError("Degrees of freedom must be positive, got {}".format(self.nu))

    @property
    def is_gaussian(self) -> bool:
        return math.isinf(self.nu)

    def tau_prior(self) -> GammaParams:
        return gamma_prior(self.nu)


def gamma_prior(nu: float) -> GammaParams:
    if math.isinf(nu):
        raise ConfigError("The Gaussian limit has no Gamma scale prior")
    return GammaParams(nu / 2.0, nu / 2.0)


def mvt_logpdf(x, mu, Sigma, nu: float) -> torch.Tensor:
    x, mu, Sigma = as_tensor(x).reshape(-1), as_tensor(mu).reshape(-1), as_tensor(Sigma)
    d = x.shape[0]
    if Sigma.ndim < 2:
        Sigma = Sigma.reshape(1, 1)
    if mu.shape[0] != d or Sigma.shape != (d, d):
        raise DimensionError(
            "Shapes do not agree: x {}, mu {}, Sigma {}".format(
                tuple(x.shape), tuple(mu.shape), tuple(Sigma.shape)
            )
        )

    chol, info = torch.linalg.cholesky_ex(Sigma)
    if int(info) != 0:
        raise CholeskyError("Scale matrix is not positive definite (d={})".format(d))

    diff = torch.linalg.solve_triangular(chol, (x - mu)[:, None], upper=False)[:, 0]
    maha = (diff ** 2).sum()
    half_logdet = torch.log(torch.diagonal(chol)).sum()

    if math.isinf(nu):
        return -0.5 * d * math.log(2 * math.pi) - half_logdet - 0.5 * maha

    return (
        math.lgamma((nu + d) / 2.0)
        - math.lgamma(nu / 2.0)
        - 0.5 * d * math.log(nu * math.pi)
        - half_logdet
        - 0.5 * (nu + d) * torch.log1p(maha / nu)
    )


def _standard_gamma_quantile(alpha: float, u: float) -> float:
    """Solve P(alpha, x) = u for x by bracketed root finding."""
    if not 0.0 < u < 1.0:
        raise GammaQuantileError("Base uniform must lie in (0, 1), got {}".format(u))

    # Wilson-Hilferty starting point
    z = special.ndtri(u)
    guess = alpha * (1.0 - 1.0 / (9.0 * alpha) + z / (3.0 * math.sqrt(alpha))) ** 3
    if not guess > 0:
        guess = math.exp((math.log(u) + special.gammaln(alpha + 1.0)) / alpha)
    guess = max(guess, 1e-300)

    def residual(x):
        return special.gammainc(alpha, x) - u

    low, high = guess, guess
    for _ in range(2000):
        if residual(low) <= 0:
            break
        low /= 2.0
    for _ in range(2000):
        if residual(high) >= 0:
            break
        high *= 2.0
    if residual(low) > 0 or residual(high) < 0:
        raise GammaQuantileError(
            "Could not bracket the Gamma quantile: alpha={} u={} bracket=({}, {})".format(
                alpha, u, low, high
            )
        )
    if low == high:
        return low

    root, result = optimize.brentq(
        residual,
        low,
        high,
        xtol=1e-300,
        rtol=4 * np.finfo(float).eps,
        maxiter=500,
        full_output=True,
        disp=False,
    )
    if not result.converged:
        raise GammaQuantileError(
            "Gamma quantile did not converge: alpha={} u={} iterations={} flag={}".format(
                alpha, u, result.iterations, result.flag
            )
        )
    return root


def _cdf_shape_derivative(alpha: float, x: float) -> float:
    """d/d(alpha) of the regularized lower incomplete gamma P(alpha, x)."""
    # int_0^x log(t) t^(alpha-1) e^-t dt / Gamma(alpha), with the algebraic-log
    # singularity at 0 handled by the weighted quadrature rule
    log_moment, _ = integrate.quad(
        lambda t: math.exp(-t - special.gammaln(alpha)),
        0.0,
        x,
        weight="alg-loga",
        wvar=(alpha - 1.0, 0.0),
        epsabs=1e-15,
        epsrel=1e-12,
        limit=200,
    )
    return log_moment - special.digamma(alpha) * special.gammainc(alpha, x)


def _standard_gamma_pdf(alpha: float, x: float) -> float:
    return math.exp((alpha - 1.0) * math.log(x) - x - special.gammaln(alpha))


class GammaQuantile(torch.autograd.Function):
    """
    Inverse-CDF Gamma draw with implicit reparameterization gradients: at a
    fixed base uniform u, F(tau; alpha, beta) = u defines tau(alpha, beta).
    """

    @staticmethod
    def forward(ctx, alpha, beta, u):
        a = alpha.detach().reshape(-1).numpy()
        us = u.detach().reshape(-1).numpy()
        x = [_standard_gamma_quantile(float(ai), float(ui)) for ai, ui in zip(a, us)]
        x = torch.as_tensor(x, dtype=DTYPE).reshape(alpha.shape)
        ctx.save_for_backward(alpha, beta)
        ctx.standard = x
        return x / beta.detach()

    @staticmethod
    def backward(ctx, grad_output):
        alpha, beta = ctx.saved_tensors
        x = ctx.standard
        grad_alpha = grad_beta = None
        if ctx.needs_input_grad[0]:
            dx = [
                -_cdf_shape_derivative(ai, xi) / _standard_gamma_pdf(ai, xi)
                for ai, xi in zip(alpha.detach().reshape(-1).tolist(), x.reshape(-1).tolist())
            ]
            dx = torch.as_tensor(dx, dtype=DTYPE).reshape(alpha.shape)
            grad_alpha = grad_output * dx / beta.detach()
        if ctx.needs_input_grad[1]:
            grad_beta = -grad_output * x / beta.detach() ** 2
        return grad_alpha, grad_beta, None


def gamma_quantile(alpha, beta, u) -> torch.Tensor:
    alpha, beta, u = as_tensor(alpha), as_tensor(beta), as_tensor(u)
    alpha, beta, u = torch.broadcast_tensors(alpha, beta, u)
    return GammaQuantile.apply(alpha, beta, u)


def sample_gamma(params: GammaParams, base_randomness) -> Real:
    tau = gamma_quantile(params.shape, params.rate, base_randomness)
    if not any(isinstance(v, torch.Tensor) for v in (params.shape, params.rate)):
        return float(tau) if tau.ndim == 0 else tau.detach().numpy()
    return tau


def gamma_kl(q: GammaParams, p: GammaParams) -> torch.Tensor:
    """
    KL(Gamma(q) || Gamma(p)) through the exponential-family form with
    natural parameters eta = (shape - 1, -rate) and log-normalizer
    A(eta) = lgamma(eta_1 + 1) + (eta_1 + 1) * log(-1 / eta_2).
    """
    qa, qb = as_tensor(q.shape), as_tensor(q.rate)
    pa, pb = as_tensor(p.shape), as_tensor(p.rate)

    def log_normalizer(shape, rate):
        return torch.lgamma(shape) - shape * torch.log(rate)

    # mean parameters of q: (E[log tau], E[tau])
    mean_log = torch.digamma(qa) - torch.log(qb)
    mean = qa / qb
    return (
        log_normalizer(pa, pb)
        - log_normalizer(qa, qb)
        - ((pa - qa) * mean_log + (-(pb - qb)) * mean)
    )


def component_factors(
    lattice: Lattice, priors: Sequence[TpPrior], jitter: float = JITTER
) -> List[np.ndarray]:
    """Cholesky factors of the per-component lattice kernel matrices."""
    nugget = jitter * max(float(prior.kernel.variance) for prior in priors)
    factors = []
    for i, prior in enumerate(priors):
        K = gram(prior.kernel, lattice.locations, lattice.locations).detach().numpy()
        K = K + nugget * np.eye(lattice.count)
        try:
            factors.append(np.linalg.cholesky(K))
        except np.linalg.LinAlgError:
            raise CholeskyError(
                "Kernel matrix of component {} is not positive definite "
                "(lengthscale={}, variance={}, m={})".format(
                    i,
                    float(prior.kernel.lengthscale),
                    float(prior.kernel.variance),
                    lattice.count,
                )
            ) from None
    return factors


def sample_tp_components(
    lattice: Lattice,
    priors: Sequence[TpPrior],
    seed: Union[int, np.random.Generator],
    factors: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw one sample of N independent t-process components on the lattice as
    Gaussian processes rescaled by tau ~ Gamma(nu/2, nu/2).

    The base uniforms and normals are drawn in the same order whatever the
    degrees of freedom, so datasets generated from one seed with different
    nu share their Gaussian bases.
    """
    rng = np.random.default_rng(seed)
    if factors is None:
        factors = component_factors(lattice, priors)

    n = len(priors)
    uniforms = rng.uniform(size=n)
    normals = rng.standard_normal(size=(n, lattice.count))

    taus = np.ones(n)
    for i, prior in enumerate(priors):
        if not prior.is_gaussian:
            taus[i] = sample_gamma(prior.tau_prior(), uniforms[i])

    components = np.stack([factors[i] @ normals[i] for i in range(n)])
    components /= np.sqrt(taus)[:, None]
    return components, taus
