import csv
import json
import logging
import math
import os
import shutil
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np
import torch

from ._tensorfile import read_tensor, write_tensor
from .config import SCHEMA_VERSION, TrainConfig
from .elbo import draw_base_randomness, elbo
from .exceptions import ConfigError, ManifestVersionError, NonFiniteError
from .lattice import as_tensor
from .model import TpNicaModel
from .posterior import VariationalFamily

TRACE_COLUMNS = ("step", "epoch", "elbo", "data_term", "kl_u", "kl_tau", "wallclock_s")
CHECKPOINT_META = "meta.json"


class TraceRow(NamedTuple):
    step: int
    epoch: int
    elbo: float
    data_term: float
    kl_u: float
    kl_tau: float
    wallclock_s: float


@dataclass
class TrainResult:
    model: TpNicaModel
    family: VariationalFamily
    trace: List[TraceRow] = field(default_factory=list)
    checkpoint: Optional[str] = None


def steps_per_epoch(sample_count: int, minibatch_size: int) -> int:
    return math.ceil(sample_count / minibatch_size)


def minibatch_order(seed: int, epoch: int, sample_count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(sample_count)


class Trainer:
    """
    Minibatch Adam over the model parameters and the per-sample variational
    states.

    The variational group (pseudo-factors, tau posteriors and the shared
    pseudo-locations) and the model group (kernel, decoder, noise) get their
    own learning rates. The objective of one step is the minibatch mean of the
    per-sample ELBO; states of samples outside the minibatch get no gradient
    and are left untouched by Adam.

    :param model: generative parameters
    :type model: TpNicaModel
    :param family: one variational state per dataset sample
    :type family: VariationalFamily
    :param config: optimization settings
    :type config: TrainConfig
    :param metadata: extra entries for every checkpoint's meta.json
    :type metadata: dict
    :param log: logger for progress, clipping and failures
    :type log: logging.Logger
    """

    def __init__(
        self,
        model: TpNicaModel,
        family: VariationalFamily,
        config: TrainConfig,
        metadata: Optional[Dict[str, Any]] = None,
        log: logging.Logger = None,
    ):
        self.model = model
        self.family = family
        self.config = config
        self.metadata = dict(metadata or {})
        self.log = log or logging.getLogger("tpnica.optimizer")

        self.step = 0
        self.trace: List[TraceRow] = []
        self._elapsed = 0.0
        self.optimizer = torch.optim.Adam(
            [
                {"params": list(family.parameters()), "lr": config.lr_variational},
                {
                    "params": [p for p in model.parameters() if p.requires_grad],
                    "lr": config.lr_model,
                },
            ],
            betas=config.betas,
            eps=config.eps,
        )

    def named_parameters(self) -> Dict[str, torch.nn.Parameter]:
        named = {"model.{}".format(k): v for k, v in self.model.named_parameters()}
        named.update({"family.{}".format(k): v for k, v in self.family.named_parameters()})
        return named

    def train(self, observations, checkpoint_dir: Optional[str] = None) -> TrainResult:
        """
        Run until `config.epochs` epochs are complete, continuing from
        `self.step` when state was restored from a checkpoint.

        A non-finite objective or gradient raises NonFiniteError before the
        parameters are touched; checkpoints already on disk stay in place.
        """
        x = as_tensor(observations)
        samples = x.shape[0]
        if samples < 1:
            raise ConfigError("Cannot train on an empty dataset")
        if samples != len(self.family):
            raise ConfigError(
                "Dataset has {} samples but the variational family has {} states".format(
                    samples, len(self.family)
                )
            )

        per_epoch = steps_per_epoch(samples, self.config.minibatch_size)
        total = per_epoch * self.config.epochs
        self.log.info(
            "Training {} steps ({} epochs x {} minibatches) from step {}".format(
                total, self.config.epochs, per_epoch, self.step
            )
        )

        checkpoint, saved_at = None, None
        started = time.monotonic() - self._elapsed
        while self.step < total:
            epoch, batch = divmod(self.step, per_epoch)
            order = minibatch_order(self.config.seed, epoch, samples)
            size = self.config.minibatch_size
            indices = order[batch * size : (batch + 1) * size]

            row = self._step(x, epoch, indices, started)
            self.trace.append(row)
            self.log.debug(
                "step={} epoch={} elbo={:.6f} kl_u={:.6f} kl_tau={:.6f}".format(
                    row.step, row.epoch, row.elbo, row.kl_u, row.kl_tau
                )
            )
            if batch == per_epoch - 1:
                epoch_rows = self.trace[-per_epoch:]
                self.log.info(
                    "Epoch {} finished, mean ELBO {:.6f}".format(
                        epoch, float(np.mean([r.elbo for r in epoch_rows]))
                    )
                )

            interval = self.config.checkpoint_interval
            if checkpoint_dir and interval and self.step % interval == 0:
                self._elapsed = time.monotonic() - started
                checkpoint, saved_at = self.save(checkpoint_dir), self.step

        self._elapsed = time.monotonic() - started
        if checkpoint_dir and saved_at != self.step:
            checkpoint = self.save(checkpoint_dir)
        return TrainResult(self.model, self.family, list(self.trace), checkpoint)

    def _step(self, x: torch.Tensor, epoch: int, indices: np.ndarray, started: float) -> TraceRow:
        config = self.config
        covariance = self.model.covariance(self.family.pseudo_locations)

        estimates = []
        for i in indices.tolist():
            base = draw_base_randomness(
                [config.seed, self.step, i],
                config.n_tau_samples,
                config.n_s_samples,
                self.model.lattice.count,
                self.model.n_components,
            )
            estimates.append(
                elbo(self.model, self.family[i], x[i], base_randomness=base, covariance=covariance)
            )

        objective = torch.stack([e.value for e in estimates]).mean()
        if not bool(torch.isfinite(objective)):
            self.log.error("Non-finite ELBO at step {}".format(self.step))
            raise NonFiniteError("Non-finite ELBO at step {}".format(self.step))

        self.optimizer.zero_grad(set_to_none=True)
        (-objective).backward()

        live = []
        for name, param in self.named_parameters().items():
            if param.grad is None:
                continue
            if not bool(torch.isfinite(param.grad).all()):
                self.log.error("Non-finite gradient in '{}' at step {}".format(name, self.step))
                raise NonFiniteError(
                    "Non-finite gradient in parameter block '{}' at step {}".format(name, self.step)
                )
            live.append(param)

        norm = float(torch.nn.utils.clip_grad_norm_(live, config.clip_norm))
        if norm > config.clip_norm:
            self.log.warning(
                "Clipped gradient norm {:.3e} to {} at step {}".format(
                    norm, config.clip_norm, self.step
                )
            )
        self.optimizer.step()
        self.step += 1

        def mean(name):
            return float(np.mean([float(getattr(e, name).detach()) for e in estimates]))

        return TraceRow(
            step=self.step,
            epoch=epoch + 1,
            elbo=float(objective.detach()),
            data_term=mean("data_term"),
            kl_u=mean("kl_u"),
            kl_tau=mean("kl_tau"),
            wallclock_s=time.monotonic() - started,
        )

    def save(self, checkpoint_dir: str) -> str:
        path = os.path.join(checkpoint_dir, "step-{:08d}".format(self.step))
        save_checkpoint(path, self, self.metadata)
        self.log.info("Checkpoint written: {}".format(path))
        return path

    def restore(self, path: str) -> Dict[str, Any]:
        meta = load_checkpoint(path, self)
        self.log.info("Resumed from {} at step {}".format(path, self.step))
        return meta


def save_checkpoint(path: str, trainer: Trainer, extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Directory with `meta.json` and one TensorFile per parameter and per Adam
    moment. Written to a sibling directory first and moved into place.
    """
    partial = "{}.partial".format(path)
    shutil.rmtree(partial, ignore_errors=True)
    os.makedirs(os.path.join(partial, "params"))
    os.makedirs(os.path.join(partial, "adam"))

    for name, param in trainer.named_parameters().items():
        write_tensor(os.path.join(partial, "params", name), param.detach().numpy())

    adam = trainer.optimizer.state_dict()["state"]
    for index, state in adam.items():
        for key, value in state.items():
            value = value.detach().cpu().numpy() if torch.is_tensor(value) else value
            write_tensor(os.path.join(partial, "adam", "{}.{}".format(index, key)), value)

    meta = {
        "schema_version": SCHEMA_VERSION,
        "step": trainer.step,
        "wallclock_s": trainer._elapsed,
        "train_config": trainer.config.to_dict(),
        "trace": [list(row) for row in trainer.trace],
    }
    meta.update(extra or {})
    with open(os.path.join(partial, CHECKPOINT_META), "w") as handle:
        json.dump(meta, handle, indent=2)
        handle.write("\n")

    if os.path.isdir(path):
        shutil.rmtree(path)
    os.replace(partial, path)


def read_checkpoint_meta(path: str) -> Dict[str, Any]:
    meta_path = os.path.join(path, CHECKPOINT_META)
    if not os.path.isfile(meta_path):
        raise ConfigError("Not a checkpoint directory: {}".format(path))
    with open(meta_path) as handle:
        meta = json.load(handle)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise ManifestVersionError(
            "Unsupported checkpoint schema_version {!r} in {}".format(
                meta.get("schema_version"), path
            )
        )
    return meta


def load_checkpoint(path: str, trainer: Trainer) -> Dict[str, Any]:
    """Restore parameters, Adam moments, step counter and trace in place."""
    meta = read_checkpoint_meta(path)

    with torch.no_grad():
        for name, param in trainer.named_parameters().items():
            tensor_path = os.path.join(path, "params", name)
            if not os.path.isfile(tensor_path):
                raise ConfigError("Checkpoint {} has no parameter '{}'".format(path, name))
            value = torch.as_tensor(read_tensor(tensor_path), dtype=param.dtype)
            if value.shape != param.shape:
                raise ConfigError(
                    "Checkpoint parameter '{}' has shape {}, expected {}".format(
                        name, tuple(value.shape), tuple(param.shape)
                    )
                )
            param.copy_(value)

    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for entry in sorted(os.listdir(os.path.join(path, "adam"))):
        index, key = entry.split(".", 1)
        value = torch.as_tensor(read_tensor(os.path.join(path, "adam", entry)))
        state.setdefault(int(index), {})[key] = value
    document = trainer.optimizer.state_dict()
    document["state"] = state
    trainer.optimizer.load_state_dict(document)

    trainer.step = int(meta["step"])
    trainer._elapsed = float(meta.get("wallclock_s", 0.0))
    trainer.trace = [
        TraceRow(int(r[0]), int(r[1]), *(float(v) for v in r[2:])) for r in meta["trace"]
    ]
    return meta


def train(
    observations,
    model: TpNicaModel,
    family: VariationalFamily,
    config: TrainConfig,
    checkpoint_dir: Optional[str] = None,
    resume: Optional[str] = None,
) -> TrainResult:
    trainer = Trainer(model, family, config)
    if resume:
        trainer.restore(resume)
    return trainer.train(observations, checkpoint_dir)


def write_trace(path: str, trace: List[TraceRow]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow([row.step, row.epoch] + [repr(float(v)) for v in row[2:]])
