import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import CholeskyError, ConfigError
from .lattice import DTYPE, BlockCovariance, Lattice, _component_major_order, as_tensor
from .processes import GammaParams

log = logging.getLogger("tpnica.posterior")


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    y = as_tensor(y)
    return y + torch.log(-torch.expm1(-y))


class PseudoFactor(NamedTuple):
    """
    Conjugate Gaussian factors psi(u_j) = exp(-1/2 u_j' W_j' W_j u_j + u_j' m_j),
    stacked over pseudo-locations: W is (J, N, N) lower triangular with a
    positive diagonal, m is (J, N).
    """

    W: torch.Tensor
    m: torch.Tensor

    @property
    def precisions(self) -> torch.Tensor:
        return self.W.transpose(-1, -2) @ self.W


class VariationalState(nn.Module):
    """
    Free-form variational parameters of one dataset sample: the J pseudo-factors
    and the N Gamma posteriors over tau. The pseudo-locations are shared with
    the owning `VariationalFamily` and live there as a single parameter.
    """

    def __init__(
        self,
        pseudo_locations: nn.Parameter,
        n_components: int,
        tau_prior: Optional[GammaParams] = None,
        factored: bool = False,
        init_scale: float = 0.1,
    ):
        super().__init__()
        n_pseudo = pseudo_locations.shape[0]
        self.pseudo_locations = pseudo_locations
        self.n_components = n_components
        self.factored = factored

        diag = inverse_softplus(torch.full((n_pseudo, n_components), init_scale))
        self.w_raw = nn.Parameter(torch.diag_embed(diag))
        self.m_tilde = nn.Parameter(torch.zeros(n_pseudo, n_components, dtype=DTYPE))

        prior = tau_prior or GammaParams(1.0, 1.0)
        start = torch.tensor([float(prior.shape), float(prior.rate)], dtype=DTYPE)
        self.tau_raw = nn.Parameter(inverse_softplus(start).repeat(n_components, 1))

    @classmethod
    def from_factors(
        cls,
        W,
        m_tilde,
        pseudo_locations,
        tau_posteriors: Optional[Sequence[GammaParams]] = None,
        factored: bool = False,
    ) -> "VariationalState":
        W, m_tilde = as_tensor(W), as_tensor(m_tilde)
        if not bool((torch.diagonal(W, dim1=-2, dim2=-1) > 0).all()):
            raise ConfigError("Factor Cholesky diagonals must be positive")

        Z = pseudo_locations
        if not isinstance(Z, nn.Parameter):
            Z = nn.Parameter(as_tensor(Z).clone())
        state = cls(Z, W.shape[-1], factored=factored)
        with torch.no_grad():
            raw = torch.tril(W, diagonal=-1) + torch.diag_embed(
                inverse_softplus(torch.diagonal(W, dim1=-2, dim2=-1))
            )
            state.w_raw.copy_(raw)
            state.m_tilde.copy_(m_tilde)
            if tau_posteriors is not None:
                values = torch.tensor(
                    [[float(q.shape), float(q.rate)] for q in tau_posteriors], dtype=DTYPE
                )
                state.tau_raw.copy_(inverse_softplus(values))
        return state

    def factors(self) -> PseudoFactor:
        diag = F.softplus(torch.diagonal(self.w_raw, dim1=-2, dim2=-1))
        if self.factored:
            W = torch.diag_embed(diag)
        else:
            W = torch.tril(self.w_raw, diagonal=-1) + torch.diag_embed(diag)
        return PseudoFactor(W=W, m=self.m_tilde)

    def tau_shape_rate(self) -> Tuple[torch.Tensor, torch.Tensor]:
        params = F.softplus(self.tau_raw)
        return params[:, 0], params[:, 1]

    def tau_posteriors(self) -> List[GammaParams]:
        shape, rate = self.tau_shape_rate()
        return [GammaParams(a, b) for a, b in zip(shape, rate)]


class VariationalFamily(nn.Module):
    """Per-sample variational states sharing one set of pseudo-locations Z."""

    def __init__(
        self,
        lattice: Lattice,
        n_components: int,
        n_pseudo: int,
        sample_count: int,
        tau_prior: Optional[GammaParams] = None,
        factored: bool = False,
        init_scale: float = 0.1,
    ):
        super().__init__()
        self.pseudo_locations = nn.Parameter(lattice.subgrid(n_pseudo).clone())
        self.states = nn.ModuleList(
            VariationalState(
                self.pseudo_locations,
                n_components,
                tau_prior=tau_prior,
                factored=factored,
                init_scale=init_scale,
            )
            for _ in range(sample_count)
        )

    def __getitem__(self, index: int) -> VariationalState:
        return self.states[index]

    def __len__(self) -> int:
        return len(self.states)


class _Factorization:
    """
    Cholesky factorization of a symmetric PD matrix B, optionally after a
    symmetric permutation P that makes P B P' block diagonal. All quadratic
    forms go through `half_solve(x) = L^-1 P x`.
    """

    def __init__(self, B: torch.Tensor, n_components: Optional[int] = None):
        self.size = B.shape[0]
        self.perm = None
        if n_components is None:
            self.chol = _cholesky(B)
            return

        self.perm = _component_major_order(self.size, n_components)
        self.inverse_perm = torch.argsort(self.perm)
        block = self.size // n_components
        permuted = B[self.perm][:, self.perm]
        blocks = torch.stack(
            [
                permuted[i * block : (i + 1) * block, i * block : (i + 1) * block]
                for i in range(n_components)
            ]
        )
        self.chol = _cholesky(blocks)
        self.n_components = n_components

    def half_solve(self, rhs: torch.Tensor) -> torch.Tensor:
        vector = rhs.ndim == 1
        if vector:
            rhs = rhs[:, None]
        if self.perm is None:
            out = torch.linalg.solve_triangular(self.chol, rhs, upper=False)
        else:
            stacked = rhs[self.perm].reshape(self.n_components, -1, rhs.shape[-1])
            out = torch.linalg.solve_triangular(self.chol, stacked, upper=False)
            out = out.reshape(self.size, -1)
        return out[:, 0] if vector else out

    def solve(self, rhs: torch.Tensor) -> torch.Tensor:
        vector = rhs.ndim == 1
        if vector:
            rhs = rhs[:, None]
        if self.perm is None:
            out = torch.cholesky_solve(rhs, self.chol)
        else:
            stacked = rhs[self.perm].reshape(self.n_components, -1, rhs.shape[-1])
            out = torch.cholesky_solve(stacked, self.chol).reshape(self.size, -1)
            out = out[self.inverse_perm]
        return out[:, 0] if vector else out

    def logdet(self) -> torch.Tensor:
        return 2.0 * torch.log(torch.diagonal(self.chol, dim1=-2, dim2=-1)).sum()

    def inverse_trace(self) -> torch.Tensor:
        eye = torch.eye(self.size, dtype=DTYPE)
        return (self.half_solve(eye) ** 2).sum()


def _cholesky(matrix: torch.Tensor) -> torch.Tensor:
    chol, info = torch.linalg.cholesky_ex(matrix)
    if bool((info != 0).any()):
        with torch.no_grad():
            eigs = torch.linalg.eigvalsh(matrix)
            diag = torch.diagonal(matrix, dim1=-2, dim2=-1)
        raise CholeskyError(
            "Cholesky factorization failed for a {} matrix; smallest eigenvalue {:.3e}, "
            "diagonal range [{:.3e}, {:.3e}]".format(
                tuple(matrix.shape),
                float(eigs.min()),
                float(diag.min()),
                float(diag.max()),
            )
        )
    return chol


@dataclass(frozen=True, eq=False)
class ConditionalPosterior:
    """
    q(u | tau) = N(h, J_mat^-1) with J_mat = K_uu^-1 + Lambda and h = J_mat^-1 m.

    Stored in the whitened form used by every downstream computation:
    B = I + W K_uu W' (W block-diagonal over pseudo-locations), v = (I + Lambda
    K_uu)^-1 m and h = K_uu v. J_mat itself is only formed on request.
    """

    K_uu: torch.Tensor
    W: torch.Tensor
    m: torch.Tensor
    factorization: _Factorization
    v: torch.Tensor
    h: torch.Tensor
    log_normalizer: torch.Tensor

    @property
    def precision(self) -> torch.Tensor:
        eye = torch.eye(self.K_uu.shape[0], dtype=DTYPE)
        return torch.cholesky_solve(eye, _cholesky(self.K_uu)) + self.W.T @ self.W

    @property
    def covariance(self) -> torch.Tensor:
        C = self.factorization.half_solve(self.W @ self.K_uu)
        return self.K_uu - C.T @ C


def build_conditional(K: BlockCovariance, state: VariationalState) -> ConditionalPosterior:
    W_j, m_j = state.factors()
    W = torch.block_diag(*W_j.unbind(0))
    m = m_j.reshape(-1)
    K_uu = K.K_uu

    WK = W @ K_uu
    B = torch.eye(W.shape[0], dtype=DTYPE) + WK @ W.T
    B = 0.5 * (B + B.T)
    factorization = _Factorization(B, K.n_components if state.factored else None)

    Km = K_uu @ m
    WKm = W @ Km
    whitened = factorization.half_solve(WKm)
    log_normalizer = 0.5 * (m @ Km - whitened @ whitened) - 0.5 * factorization.logdet()

    v = m - W.T @ factorization.solve(WKm)
    return ConditionalPosterior(
        K_uu=K_uu,
        W=W,
        m=m,
        factorization=factorization,
        v=v,
        h=K_uu @ v,
        log_normalizer=log_normalizer,
    )


def marginal_qs(
    K: BlockCovariance, cond: ConditionalPosterior
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-location marginals of q~(s | tau): means (m, N) and the m diagonal
    N x N covariance blocks (m, N, N).
    """
    n = K.n_components
    means = (K.K_su @ cond.v).reshape(-1, n)

    A = cond.factorization.half_solve(cond.W @ K.K_su.T)
    A = A.reshape(A.shape[0], -1, n)
    covariances = K.ss_blocks - torch.einsum("kli,klj->lij", A, A)
    return means, covariances


def kl_u(K: BlockCovariance, state: VariationalState, cond: ConditionalPosterior) -> torch.Tensor:
    """
    KL(q(u | tau) || p(u | tau)) = sum_j E_q[log psi_j(u_j)] - log Z, where
    Tr(Lambda S) = JN - Tr(B^-1) in the whitened form.
    """
    size = cond.W.shape[0]
    trace = size - cond.factorization.inverse_trace()
    Wh = cond.W @ cond.h
    expected_log_psi = -0.5 * trace - 0.5 * (Wh @ Wh) + cond.h @ cond.m
    return expected_log_psi - cond.log_normalizer
