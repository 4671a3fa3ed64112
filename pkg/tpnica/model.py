import math
from typing import List, Optional, Sequence

import torch
from torch import nn

from .exceptions import ConfigError
from .lattice import DTYPE, BlockCovariance, KernelSpec, Lattice, as_tensor, assemble_covariance
from .mixing import MixingNetwork, ObservationNoise
from .processes import GammaParams, gamma_prior


class TpNicaModel(nn.Module):
    """
    Generative parameters theta: per-component squared-exponential kernel
    parameters, the decoder network and per-channel observation noise.

    The degrees of freedom `nu` are a fixed hyperparameter shared by all
    components; `nu = math.inf` gives gp-NICA.
    """

    def __init__(
        self,
        lattice: Lattice,
        decoder: MixingNetwork,
        lengthscales: Sequence[float],
        variances: Sequence[float],
        noise_variances: Sequence[float],
        nu: float = 4.0,
        learn_kernel: bool = True,
    ):
        super().__init__()
        if not nu > 0:
            raise ConfigError("Degrees of freedom must be positive, got {}".format(nu))
        if len(lengthscales) != decoder.n_sources or len(variances) != decoder.n_sources:
            raise ConfigError(
                "Expected {} kernel parameter pairs, got {} lengthscales and {} variances".format(
                    decoder.n_sources, len(lengthscales), len(variances)
                )
            )
        if len(noise_variances) != decoder.n_observed:
            raise ConfigError(
                "Expected {} noise variances, got {}".format(
                    decoder.n_observed, len(noise_variances)
                )
            )

        self.lattice = lattice
        self.nu = float(nu)
        self.decoder = decoder
        self.log_lengthscale = nn.Parameter(
            torch.log(as_tensor(lengthscales)), requires_grad=learn_kernel
        )
        self.log_variance = nn.Parameter(
            torch.log(as_tensor(variances)), requires_grad=learn_kernel
        )
        self.log_noise = nn.Parameter(torch.log(as_tensor(noise_variances)))

    @property
    def n_components(self) -> int:
        return self.decoder.n_sources

    @property
    def is_gaussian(self) -> bool:
        return math.isinf(self.nu)

    def kernel_specs(self) -> List[KernelSpec]:
        lengthscales = torch.exp(self.log_lengthscale)
        variances = torch.exp(self.log_variance)
        return [KernelSpec(l, v) for l, v in zip(lengthscales, variances)]

    def noise(self) -> ObservationNoise:
        return ObservationNoise(torch.exp(self.log_noise))

    def tau_prior(self) -> Optional[GammaParams]:
        return None if self.is_gaussian else gamma_prior(self.nu)

    def covariance(self, pseudo_locations, include_ss: bool = False) -> BlockCovariance:
        return assemble_covariance(
            self.lattice, pseudo_locations, self.kernel_specs(), include_ss=include_ss
        )
