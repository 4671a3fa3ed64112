import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch

from .exceptions import CholeskyError, NonFiniteError
from .lattice import DTYPE, JITTER, BlockCovariance, as_tensor, scale_by_tau
from .mixing import observation_loglik
from .model import TpNicaModel
from .posterior import VariationalState, build_conditional, kl_u, marginal_qs
from .processes import GammaParams, gamma_kl, gamma_quantile

log = logging.getLogger("tpnica.elbo")


class BaseRandomness(NamedTuple):
    """
    Common random numbers for one ELBO evaluation: `uniforms` (N_t, N) feed the
    inverse-CDF Gamma draws, `normals` (N_t, N_s, m, N) the Gaussian draws of
    the components.
    """

    uniforms: torch.Tensor
    normals: torch.Tensor

    @property
    def n_tau(self) -> int:
        return int(self.normals.shape[0])

    @property
    def n_s(self) -> int:
        return int(self.normals.shape[1])


def draw_base_randomness(
    seed: Union[int, list, np.random.Generator],
    n_tau: int,
    n_s: int,
    lattice_count: int,
    n_components: int,
) -> BaseRandomness:
    rng = np.random.default_rng(seed)
    # open interval: the quantile function is undefined at 0
    uniforms = rng.uniform(np.finfo(float).tiny, 1.0, size=(n_tau, n_components))
    normals = rng.standard_normal(size=(n_tau, n_s, lattice_count, n_components))
    return BaseRandomness(
        uniforms=torch.as_tensor(uniforms, dtype=DTYPE),
        normals=torch.as_tensor(normals, dtype=DTYPE),
    )


@dataclass(frozen=True, eq=False)
class ElboEstimate:
    """
    value = mean_t(data_t - kl_u_t) - kl_tau; `data_term` and `kl_u` are the
    means over tau draws. `samples` holds the component draws S_t as
    (N_t, N_s, N, m) and `taus` the tau draws (N_t, N).
    """

    value: torch.Tensor
    data_term: torch.Tensor
    kl_u: torch.Tensor
    kl_tau: torch.Tensor
    n_tau: int
    n_s: int
    samples: torch.Tensor
    taus: torch.Tensor

    def breakdown(self) -> Dict[str, float]:
        return {
            "elbo": float(self.value.detach()),
            "data_term": float(self.data_term.detach()),
            "kl_u": float(self.kl_u.detach()),
            "kl_tau": float(self.kl_tau.detach()),
        }


def _tau_draws(
    model: TpNicaModel, state: VariationalState, uniforms: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    if model.is_gaussian:
        return torch.ones_like(uniforms), torch.zeros((), dtype=DTYPE)

    shape, rate = state.tau_shape_rate()
    taus = torch.stack([gamma_quantile(shape, rate, u) for u in uniforms])
    kl_tau = gamma_kl(GammaParams(shape, rate), model.tau_prior()).sum()
    return taus, kl_tau


def _conditional_inference(
    model: TpNicaModel,
    state: VariationalState,
    K: BlockCovariance,
    x: torch.Tensor,
    tau: torch.Tensor,
    normals: torch.Tensor,
):
    scaled = scale_by_tau(K, tau)
    try:
        cond = build_conditional(scaled, state)
    except CholeskyError:
        log.error("Posterior factorization failed at tau draw {}".format(tau.tolist()))
        raise

    means, covariances = marginal_qs(scaled, cond)
    nugget = JITTER * torch.diagonal(scaled.ss_blocks, dim1=-2, dim2=-1).max()
    eye = torch.eye(K.n_components, dtype=DTYPE)
    chol, info = torch.linalg.cholesky_ex(covariances + nugget * eye)
    if bool((info != 0).any()):
        log.error("Marginal covariance factorization failed at tau draw {}".format(tau.tolist()))
        raise CholeskyError(
            "Marginal covariance blocks not positive definite at {} locations".format(
                int((info != 0).sum())
            )
        )

    noise = model.noise()
    # (N_s, m, N)
    samples = means[None] + torch.einsum("lij,slj->sli", chol, normals)
    data = torch.stack(
        [observation_loglik(model.decoder, noise, x, s) for s in samples]
    ).mean()
    return data, kl_u(scaled, state, cond), samples


def elbo(
    model: TpNicaModel,
    state: VariationalState,
    x,
    n_tau: int = 1,
    n_s: int = 1,
    base_randomness: Optional[BaseRandomness] = None,
    covariance: Optional[BlockCovariance] = None,
) -> ElboEstimate:
    """
    Stochastic lower bound for one dataset sample `x` of shape (M, m).

    `covariance` lets callers share one kernel assembly across a minibatch;
    it must come from `model.covariance(state.pseudo_locations)`.
    """
    x = as_tensor(x).T
    if base_randomness is None:
        base_randomness = draw_base_randomness(
            None, n_tau, n_s, x.shape[0], model.n_components
        )
    if covariance is None:
        covariance = model.covariance(state.pseudo_locations)

    taus, kl_tau = _tau_draws(model, state, base_randomness.uniforms)

    data_terms, kl_terms, samples = [], [], []
    for tau, normals in zip(taus, base_randomness.normals):
        data, kl, draws = _conditional_inference(model, state, covariance, x, tau, normals)
        data_terms.append(data)
        kl_terms.append(kl)
        samples.append(draws.detach().transpose(1, 2))

    data_terms, kl_terms = torch.stack(data_terms), torch.stack(kl_terms)
    value = (data_terms - kl_terms).mean() - kl_tau
    return ElboEstimate(
        value=value,
        data_term=data_terms.mean(),
        kl_u=kl_terms.mean(),
        kl_tau=kl_tau,
        n_tau=base_randomness.n_tau,
        n_s=base_randomness.n_s,
        samples=torch.stack(samples),
        taus=taus.detach(),
    )


def named_parameters(model: TpNicaModel, state: VariationalState) -> "OrderedDict":
    params = OrderedDict()
    for name, param in model.named_parameters():
        if param.requires_grad:
            params[name] = param
    for name, param in state.named_parameters():
        if param.requires_grad:
            params["state.{}".format(name)] = param
    return params


def elbo_gradient(
    model: TpNicaModel,
    state: VariationalState,
    x,
    n_tau: int = 1,
    n_s: int = 1,
    base_randomness: Optional[BaseRandomness] = None,
) -> "OrderedDict[str, torch.Tensor]":
    """
    Exact gradient of `elbo(...)` at fixed base randomness with respect to
    every trainable parameter block of the model and the state.
    """
    estimate = elbo(model, state, x, n_tau, n_s, base_randomness)
    params = named_parameters(model, state)
    grads = torch.autograd.grad(estimate.value, list(params.values()), allow_unused=True)

    out = OrderedDict()
    for (name, param), grad in zip(params.items(), grads):
        grad = torch.zeros_like(param) if grad is None else grad
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteError("Non-finite gradient in parameter block '{}'".format(name))
        out[name] = grad
    return out


def posterior_components(
    model: TpNicaModel,
    state: VariationalState,
    x,
    n_tau: int = 4,
    n_s: int = 8,
    seed=None,
    with_samples: bool = True,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Point estimate of the components for one sample, the posterior mean of
    q~(s | tau) at the posterior-mean tau, as (N, m); plus the sampled
    components S_t as (N_t, N_s, N, m) for diagnostics, or None without
    `with_samples`.
    """
    with torch.no_grad():
        covariance = model.covariance(state.pseudo_locations)
        if model.is_gaussian:
            tau = torch.ones(model.n_components, dtype=DTYPE)
        else:
            shape, rate = state.tau_shape_rate()
            tau = shape / rate
        scaled = scale_by_tau(covariance, tau)
        means, _ = marginal_qs(scaled, build_conditional(scaled, state))
        if not with_samples:
            return means.T.numpy(), None

        base = draw_base_randomness(
            seed, n_tau, n_s, model.lattice.count, model.n_components
        )
        estimate = elbo(model, state, x, base_randomness=base, covariance=covariance)
    return means.T.numpy(), estimate.samples.numpy()
