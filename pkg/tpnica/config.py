import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple

from .exceptions import ConfigError, ManifestVersionError

log = logging.getLogger("tpnica.config")

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

MODEL_KINDS = ("tp", "gp")
KERNEL_REGIMES = ("distinct", "equal")
MCC_METHODS = ("pearson", "spearman")
MCC_POOLINGS = ("pooled", "per_sample")


def _reject_unknown(cls, document: Dict[str, Any]) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(document) - known)
    if unknown:
        raise ConfigError(
            "Unknown {} keys: {}".format(cls.__name__, ", ".join(unknown))
        )


@dataclass(frozen=True)
class TrainConfig:
    lr_variational: float = 1e-1
    lr_model: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    minibatch_size: int = 8
    epochs: int = 30
    seed: int = 0
    # in steps; 0 writes a checkpoint only at the end of training
    checkpoint_interval: int = 0
    n_tau_samples: int = 1
    n_s_samples: int = 1
    eval_tau_samples: int = 4
    eval_s_samples: int = 8
    clip_norm: float = 100.0
    learn_kernel: bool = True
    factored_posterior: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.lr_variational < 0 or self.lr_model < 0:
            raise ConfigError("Learning rates must not be negative")
        if self.minibatch_size < 1:
            raise ConfigError("minibatch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must not be negative")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must not be negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("Adam betas must be two values in [0, 1)")
        for name in ("n_tau_samples", "n_s_samples", "eval_tau_samples", "eval_s_samples"):
            if getattr(self, name) < 1:
                raise ConfigError("{} must be at least 1".format(name))
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "TrainConfig":
        _reject_unknown(cls, document)
        return cls(**document)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    lattice_shape: Tuple[int, ...] = (16, 16)
    n_components: int = 3
    n_observed: int = 6
    n_layers: int = 1
    kernel_regime: str = "distinct"
    model_kind: str = "tp"
    nu: float = 4.0
    noise_fraction: float = 0.1
    sample_count: int = 256
    n_pseudo: int = 25
    seed: int = 0
    out_dir: Optional[str] = None
    lengthscale: float = 1.5
    kernel_variance: float = 1.0
    activation_slope: float = 0.1
    max_condition: float = 10.0
    mcc_method: str = "pearson"
    mcc_pooling: str = "pooled"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        object.__setattr__(self, "lattice_shape", tuple(int(n) for n in self.lattice_shape))
        if not self.lattice_shape or any(n < 1 for n in self.lattice_shape):
            raise ConfigError("lattice_shape must be a non-empty list of positive sizes")
        if self.n_components < 1:
            raise ConfigError("n_components must be at least 1")
        if self.n_observed < self.n_components:
            raise ConfigError(
                "Mixing must not reduce dimension: M={} < N={}".format(
                    self.n_observed, self.n_components
                )
            )
        if self.n_layers not in (1, 2, 3, 4):
            raise ConfigError("n_layers must be in 1..4, got {}".format(self.n_layers))
        if self.kernel_regime not in KERNEL_REGIMES:
            raise ConfigError("Unknown kernel regime '{}'".format(self.kernel_regime))
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError("Unknown model kind '{}'".format(self.model_kind))
        if not self.nu > 0:
            raise ConfigError("nu must be positive")
        if not 0.0 < self.noise_fraction < 1.0:
            raise ConfigError("noise_fraction must lie in (0, 1)")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be at least 1")
        if not 1 <= self.n_pseudo <= self.location_count:
            raise ConfigError(
                "n_pseudo must lie in 1..{}, got {}".format(self.location_count, self.n_pseudo)
            )
        if not (self.lengthscale > 0 and self.kernel_variance > 0):
            raise ConfigError("Kernel parameters must be positive")
        if not 0.0 < self.activation_slope <= 1.0:
            raise ConfigError("activation_slope must lie in (0, 1]")
        if not self.max_condition >= 1.0:
            raise ConfigError("max_condition must be at least 1")
        if self.mcc_method not in MCC_METHODS:
            raise ConfigError("Unknown MCC method '{}'".format(self.mcc_method))
        if self.mcc_pooling not in MCC_POOLINGS:
            raise ConfigError("Unknown MCC pooling '{}'".format(self.mcc_pooling))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig.from_dict(self.train))

    @property
    def location_count(self) -> int:
        return math.prod(self.lattice_shape)

    @property
    def model_nu(self) -> float:
        """Degrees of freedom of the estimation model; infinite for gp."""
        return math.inf if self.model_kind == "gp" else float(self.nu)

    def lengthscales(self) -> List[float]:
        """
        "distinct": lengthscales evenly spaced in log over one decade ending at
        `lengthscale`; "equal": `lengthscale` copied to every component.
        """
        n = self.n_components
        if self.kernel_regime == "equal" or n == 1:
            return [float(self.lengthscale)] * n
        return [
            float(self.lengthscale) * 10.0 ** (-1.0 + k / (n - 1.0)) for k in range(n)
        ]

    def variances(self) -> List[float]:
        return [float(self.kernel_variance)] * self.n_components

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        train = overrides.pop("train", None)
        overrides = {k: v for k, v in overrides.items() if v is not None}
        config = replace(self, **overrides)
        if train:
            config = replace(config, train=replace(config.train, **train))
        return config

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "ExperimentConfig":
        _reject_unknown(cls, document)
        document = dict(document)
        if "train" in document:
            document["train"] = TrainConfig.from_dict(document["train"])
        return cls(**document)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["lattice_shape"] = list(self.lattice_shape)
        out["train"] = self.train.to_dict()
        return out


@dataclass(frozen=True)
class SweepConfig:
    """
    A grid over the named axes around a base experiment. Every cell is the
    base config with one value from each axis; `seeds` replaces `seed`.
    """

    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    layers: Tuple[int, ...] = (1, 2)
    kernel_regimes: Tuple[str, ...] = KERNEL_REGIMES
    model_kinds: Tuple[str, ...] = MODEL_KINDS
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    n_pseudo: Tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("layers", "kernel_regimes", "model_kinds", "seeds", "n_pseudo"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("layers", "kernel_regimes", "model_kinds", "seeds"):
            if not getattr(self, name):
                raise ConfigError("Sweep axis '{}' must not be empty".format(name))
        # building the cells validates every combination
        self.cells()

    def cells(self) -> List[ExperimentConfig]:
        pseudo = self.n_pseudo or (self.base.n_pseudo,)
        return [
            replace(
                self.base,
                n_layers=layers,
                kernel_regime=regime,
                model_kind=kind,
                n_pseudo=j,
                seed=seed,
            )
            for layers in self.layers
            for regime in self.kernel_regimes
            for kind in self.model_kinds
            for j in pseudo
            for seed in self.seeds
        ]

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "SweepConfig":
        _reject_unknown(cls, document)
        document = dict(document)
        document["base"] = ExperimentConfig.from_dict(document.get("base", {}))
        return cls(**document)

    def to_dict(self) -> Dict[str, Any]:
        out = {f.name: list(getattr(self, f.name)) for f in fields(self) if f.name != "base"}
        out["base"] = self.base.to_dict()
        return out


def load_json(path: str) -> Dict[str, Any]:
    try:
        with open(path) as handle:
            document = json.load(handle)
    except FileNotFoundError:
        raise ConfigError("Config file not found: {}".format(path)) from None
    except json.JSONDecodeError as e:
        raise ConfigError("Config file {} is not valid JSON: {}".format(path, e)) from None
    if not isinstance(document, dict):
        raise ConfigError("Config file {} must hold a JSON object".format(path))
    return document


def write_manifest(directory: str, document: Dict[str, Any], name: str = MANIFEST_NAME) -> str:
    path = os.path.join(directory, name)
    document = dict(document, schema_version=SCHEMA_VERSION)
    with open(path, "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def read_manifest(directory: str, name: str = MANIFEST_NAME) -> Dict[str, Any]:
    path = os.path.join(directory, name)
    document = load_json(path)
    version = document.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestVersionError(
            "Unsupported schema_version {!r} in {} (expected {})".format(
                version, path, SCHEMA_VERSION
            )
        )
    return document


def thread_count(threads: Optional[int] = None) -> int:
    """
    Worker parallelism: an explicit value wins, then the NICA_THREADS
    environment variable, then the CPU count.
    """
    if threads is None:
        env = os.environ.get("NICA_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError("NICA_THREADS must be an integer, got '{}'".format(env)) from None
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("Thread count must be at least 1, got {}".format(threads))
    return threads
