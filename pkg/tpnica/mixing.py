import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError
from .lattice import DTYPE, Lattice, as_tensor
from .processes import TpPrior, component_factors, sample_tp_components

log = logging.getLogger("tpnica.mixing")


class LeakyTanh(nn.Module):
    """Strictly monotone activation a * x + (1 - a) * tanh(x)."""

    def __init__(self, slope: float = 0.1):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return self.slope * x + (1.0 - self.slope) * torch.tanh(x)


class MixingNetwork(nn.Module):
    """
    Pointwise MLP R^N -> R^M applied independently at every lattice location.
    The first layer maps N -> M, later layers M -> M; the activation sits
    between layers, never after the last one. One layer is a linear map.
    """

    def __init__(
        self, n_sources: int, n_observed: int, n_layers: int = 1, slope: float = 0.1
    ):
        super().__init__()
        if n_observed < n_sources:
            raise ConfigError(
                "Mixing must not reduce dimension: M={} < N={}".format(
                    n_observed, n_sources
                )
            )
        if n_layers < 1:
            raise ConfigError("A mixing network needs at least one layer")

        self.n_sources = n_sources
        self.n_observed = n_observed
        widths = [n_sources] + [n_observed] * n_layers
        self.layers = nn.ModuleList(
            nn.Linear(w_in, w_out).to(DTYPE) for w_in, w_out in zip(widths, widths[1:])
        )
        self.activation = LeakyTanh(slope)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        h = s
        for k, layer in enumerate(self.layers):
            if k:
                h = self.activation(h)
            h = layer(h)
        return h

    @classmethod
    def random(
        cls,
        n_sources: int,
        n_observed: int,
        n_layers: int,
        seed: Union[int, np.random.Generator],
        slope: float = 0.1,
        max_condition: float = 10.0,
    ) -> "MixingNetwork":
        """
        Network with well-conditioned layers: orthogonal singular vectors and
        singular values spread over [1, max_condition), so every layer is
        injective and the composition stays invertible on its image.
        """
        rng = np.random.default_rng(seed)
        net = cls(n_sources, n_observed, n_layers, slope)
        with torch.no_grad():
            for layer in net.layers:
                rows, cols = layer.weight.shape
                u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
                v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
                k = min(rows, cols)
                # condition number max/min stays below max_condition
                singular = rng.uniform(1.0, max_condition, size=k)
                singular[0] = 1.0
                singular /= np.sqrt(singular.max())
                weight = u[:, :k] @ np.diag(singular) @ v[:, :k].T
                layer.weight.copy_(torch.as_tensor(weight, dtype=DTYPE))
                layer.bias.copy_(torch.as_tensor(0.1 * rng.standard_normal(rows)))
        return net


@dataclass(frozen=True, eq=False)
class ObservationNoise:
    variances: torch.Tensor

    def __post_init__(self):
        variances = as_tensor(self.variances).reshape(-1)
        if not bool((variances.detach() > 0).all()):
            raise ConfigError("Noise variances must be positive")
        object.__setattr__(self, "variances", variances)


def mix(net: MixingNetwork, s) -> torch.Tensor:
    return net(as_tensor(s))


def observation_loglik(net: MixingNetwork, noise: ObservationNoise, x, s) -> torch.Tensor:
    """
    Sum over channels (and over any leading location/sample axes) of the
    Gaussian log-density of the residual x - f(s).
    """
    residual = as_tensor(x) - mix(net, s)
    var = noise.variances
    return (-0.5 * (torch.log(2 * math.pi * var) + residual ** 2 / var)).sum()


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    observations: (samples, M, m); components: (samples, N, m);
    taus: (samples, N); noise_variances: (M,).
    """

    observations: np.ndarray
    components: np.ndarray
    taus: np.ndarray
    noise_variances: np.ndarray


def generate_dataset(
    lattice: Lattice,
    priors: Sequence[TpPrior],
    net: MixingNetwork,
    noise_fraction: float,
    sample_count: int,
    seed: Union[int, np.random.Generator],
) -> Dataset:
    if not 0.0 < noise_fraction < 1.0:
        raise ConfigError("noise_fraction must lie in (0, 1), got {}".format(noise_fraction))
    if net.n_sources != len(priors):
        raise ConfigError(
            "Network expects {} sources but {} priors were given".format(
                net.n_sources, len(priors)
            )
        )

    rng = np.random.default_rng(seed)
    factors = component_factors(lattice, priors)

    components = np.empty((sample_count, len(priors), lattice.count))
    taus = np.empty((sample_count, len(priors)))
    for n in range(sample_count):
        components[n], taus[n] = sample_tp_components(lattice, priors, rng, factors)

    with torch.no_grad():
        # (samples, m, N) -> (samples, m, M) -> (samples, M, m)
        s = torch.as_tensor(components, dtype=DTYPE).transpose(1, 2)
        clean = mix(net, s).transpose(1, 2).numpy()

    variances = noise_fraction * clean.transpose(1, 0, 2).reshape(net.n_observed, -1).var(axis=1)
    noise = rng.standard_normal(clean.shape) * np.sqrt(variances)[None, :, None]

    log.debug(
        "Generated {} samples on {} locations, noise variances {}".format(
            sample_count, lattice.count, variances.round(6).tolist()
        )
    )
    return Dataset(
        observations=clean + noise,
        components=components,
        taus=taus,
        noise_variances=variances,
    )
