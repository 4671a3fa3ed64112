import enum
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .exceptions import ConfigError, DimensionError

log = logging.getLogger("tpnica.lattice")

DTYPE = torch.float64
JITTER = 1e-6

Real = Union[float, torch.Tensor]


def as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value if value.dtype == DTYPE else value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class Lattice:
    """
    Ordered set of index locations in R^dim. Location j is row j of `locations`.
    """

    locations: torch.Tensor

    def __post_init__(self):
        locations = as_tensor(self.locations)
        if locations.ndim != 2 or locations.shape[0] < 1 or locations.shape[1] < 1:
            raise DimensionError(
                "Lattice locations must be a non-empty (count, dim) array, got {}".format(
                    tuple(locations.shape)
                )
            )
        if torch.unique(locations, dim=0).shape[0] != locations.shape[0]:
            raise ConfigError("Lattice locations must be unique")
        object.__setattr__(self, "locations", locations.detach().clone())

    @classmethod
    def grid(cls, shape: Sequence[int]) -> "Lattice":
        """
        Regular integer lattice with the given number of points per axis, in
        row-major (C) order. Any number of axes is accepted.
        """
        if not shape or any(int(n) < 1 for n in shape):
            raise ConfigError("Grid shape must be positive, got {}".format(shape))
        axes = [np.arange(int(n), dtype=np.float64) for n in shape]
        points = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return cls(points)

    @property
    def dim(self) -> int:
        return int(self.locations.shape[1])

    @property
    def count(self) -> int:
        return int(self.locations.shape[0])

    def bounding_box(self) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.locations.min(dim=0).values, self.locations.max(dim=0).values

    def contains(self, points: torch.Tensor) -> bool:
        low, high = self.bounding_box()
        points = as_tensor(points).detach()
        return bool(((points >= low) & (points <= high)).all())

    def subgrid(self, count: int) -> torch.Tensor:
        """
        Pseudo-locations on a regular subgrid of the bounding box. When `count`
        is a perfect power of the lattice dimension the subgrid is a regular
        grid with evenly spaced points per axis, otherwise `count` lattice
        locations are picked at evenly spaced positions of the lattice order.
        """
        if count < 1:
            raise ConfigError("Pseudo-point count must be at least 1")

        per_axis = int(round(count ** (1.0 / self.dim)))
        if per_axis ** self.dim == count:
            low, high = self.bounding_box()
            axes = [
                np.linspace(float(lo), float(hi), per_axis)
                for lo, hi in zip(low, high)
            ]
            points = np.array(list(itertools.product(*axes)), dtype=np.float64)
            if np.unique(points, axis=0).shape[0] == count:
                return as_tensor(points)

        if count > self.count:
            raise ConfigError(
                "Cannot place {} distinct pseudo-locations on a lattice of {}".format(
                    count, self.count
                )
            )
        index = np.unique(np.linspace(0, self.count - 1, count).round().astype(int))
        return self.locations[torch.as_tensor(index)].clone()


class KernelFamily(enum.Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"


@dataclass(frozen=True)
class KernelSpec:
    lengthscale: Real
    variance: Real
    family: KernelFamily = KernelFamily.SQUARED_EXPONENTIAL

    def __post_init__(self):
        if not _all_positive(self.lengthscale):
            raise ConfigError(
                "Kernel lengthscale must be positive, got {}".format(self.lengthscale)
            )
        if not _all_positive(self.variance):
            raise ConfigError(
                "Kernel variance must be positive, got {}".format(self.variance)
            )
        if not isinstance(self.family, KernelFamily):
            object.__setattr__(self, "family", KernelFamily(self.family))


def _all_positive(value) -> bool:
    return bool((as_tensor(value).detach() > 0).all())


def gram(spec: KernelSpec, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Kernel matrix between the rows of `a` (n, d) and `b` (p, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(
            "Coordinate dimensions differ: {} vs {}".format(a.shape[-1], b.shape[-1])
        )
    if spec.family is not KernelFamily.SQUARED_EXPONENTIAL:
        raise ConfigError("Unsupported kernel family {}".format(spec.family))

    # squared distances from explicit differences; cdist has no gradient at 0
    sqdist = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    lengthscale = as_tensor(spec.lengthscale)
    return as_tensor(spec.variance) * torch.exp(-0.5 * sqdist / lengthscale ** 2)


def kernel_eval(spec: KernelSpec, a, b) -> torch.Tensor:
    a, b = as_tensor(a).reshape(1, -1), as_tensor(b).reshape(1, -1)
    return gram(spec, a, b)[0, 0]


@dataclass(frozen=True, eq=False)
class BlockCovariance:
    """
    Prior covariance blocks in location-major interleaved order: index
    `a * N + i` addresses component i at location a. Every N x N sub-block
    is diagonal.

    `ss_blocks` holds the m diagonal N x N blocks of `K_ss`, which are all the
    marginal computations need; `K_ss` itself is only materialized on request.
    """

    K_su: torch.Tensor
    K_uu: torch.Tensor
    ss_blocks: torch.Tensor
    n_components: int
    K_ss: Optional[torch.Tensor] = None

    @property
    def lattice_count(self) -> int:
        return int(self.ss_blocks.shape[0])

    @property
    def pseudo_count(self) -> int:
        return int(self.K_uu.shape[0]) // self.n_components


def _interleave(blocks: torch.Tensor) -> torch.Tensor:
    # (N, p, q) per-component matrices -> (p*N, q*N) location-major layout
    n, p, q = blocks.shape
    eye = torch.eye(n, dtype=blocks.dtype)
    return torch.einsum("iab,ij->aibj", blocks, eye).reshape(p * n, q * n)


def to_component_major(matrix: torch.Tensor, n_components: int) -> torch.Tensor:
    """
    Permute a location-major (interleaved) matrix to component-major order,
    where rows/columns of component i are contiguous.
    """
    rows, cols = matrix.shape
    row_perm = _component_major_order(rows, n_components)
    col_perm = _component_major_order(cols, n_components)
    return matrix[row_perm][:, col_perm]


def _component_major_order(size: int, n_components: int) -> torch.Tensor:
    locations = size // n_components
    return torch.arange(size).reshape(locations, n_components).T.reshape(-1)


def assemble_covariance(
    lattice: Lattice,
    pseudo_locations,
    specs: Sequence[KernelSpec],
    jitter: float = JITTER,
    include_ss: bool = True,
) -> BlockCovariance:
    pseudo_locations = as_tensor(pseudo_locations)
    if pseudo_locations.ndim != 2 or pseudo_locations.shape[1] != lattice.dim:
        raise DimensionError(
            "Pseudo-locations must have shape (J, {}), got {}".format(
                lattice.dim, tuple(pseudo_locations.shape)
            )
        )
    if pseudo_locations.shape[0] and not lattice.contains(pseudo_locations):
        log.warning("Pseudo-locations lie outside the lattice bounding box")

    n = len(specs)
    x = lattice.locations
    variances = torch.stack([as_tensor(spec.variance) for spec in specs])
    nugget = jitter * variances.max()

    K_su = _interleave(torch.stack([gram(spec, x, pseudo_locations) for spec in specs]))
    uu = torch.stack([gram(spec, pseudo_locations, pseudo_locations) for spec in specs])
    K_uu = _interleave(uu) + nugget * torch.eye(n * pseudo_locations.shape[0], dtype=DTYPE)

    ss_diag = (variances + nugget).expand(lattice.count, n)
    ss_blocks = torch.diag_embed(ss_diag)

    K_ss = None
    if include_ss:
        ss = torch.stack([gram(spec, x, x) for spec in specs])
        K_ss = _interleave(ss) + nugget * torch.eye(n * lattice.count, dtype=DTYPE)

    return BlockCovariance(
        K_su=K_su, K_uu=K_uu, ss_blocks=ss_blocks, n_components=n, K_ss=K_ss
    )


def scale_by_tau(K: BlockCovariance, taus) -> BlockCovariance:
    taus = as_tensor(taus).reshape(-1)
    if taus.shape[0] != K.n_components:
        raise DimensionError(
            "Expected {} scale factors, got {}".format(K.n_components, taus.shape[0])
        )
    if not bool((taus.detach() > 0).all()):
        raise ConfigError("Tau values must be positive, got {}".format(taus.tolist()))

    inv = 1.0 / taus
    row_s = inv.repeat(K.lattice_count)
    row_u = inv.repeat(K.pseudo_count)

    # non-zero entries always pair a component with itself, so row scaling is enough
    return BlockCovariance(
        K_su=K.K_su * row_s[:, None],
        K_uu=K.K_uu * row_u[:, None],
        ss_blocks=K.ss_blocks * inv[None, :, None],
        n_components=K.n_components,
        K_ss=None if K.K_ss is None else K.K_ss * row_s[:, None],
    )
