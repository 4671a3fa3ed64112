import csv
import logging
import math
import os
import shutil
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from . import _svg
from ._tensorfile import read_tensor, write_tensor
from .config import ExperimentConfig, read_manifest, write_manifest
from .elbo import posterior_components
from .evaluation import linear_ica_baseline, mcc
from .exceptions import (
    ConfigError,
    NumericalError,
    OutputExistsError,
    ShapeMismatchError,
)
from .lattice import KernelSpec, Lattice
from .mixing import Dataset, MixingNetwork, generate_dataset
from .model import TpNicaModel
from .optimizer import Trainer, TrainResult, read_checkpoint_meta, write_trace
from .posterior import VariationalFamily
from .processes import TpPrior

log = logging.getLogger("tpnica.experiment")

OBSERVATIONS = "observations.tnsr"
COMPONENTS = "components.tnsr"
TAUS = "taus.tnsr"
NOISE = "noise_variances.tnsr"
TRACE_CSV = "elbo_trace.csv"
REPORT_CSV = "mcc_report.csv"
ESTIMATES = "components.tnsr"
POSTERIOR_SAMPLES = "posterior_samples.tnsr"
REPORT_COLUMNS = ("model", "layers", "kernel_regime", "n_pseudo", "seed", "mcc", "baseline_mcc")

# sub-streams of one experiment seed
MIXING_STREAM, DATA_STREAM, INIT_STREAM, EVAL_STREAM = 0, 1, 2, 3


def prepare_output(path: str, force: bool = False) -> str:
    """Create `path`; an existing non-empty directory needs `force`."""
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise OutputExistsError(
                "Output directory {} exists; pass --force to overwrite it".format(path)
            )
        log.warning("Overwriting output directory {}".format(path))
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def generating_priors(config: ExperimentConfig) -> List[TpPrior]:
    """
    Component priors of the data-generating process. gp datasets are drawn
    from the Gaussian limit; both kinds share one seed stream, so a tp and a
    gp dataset of the same seed differ only in their tau scaling.
    """
    return [
        TpPrior(config.model_nu, KernelSpec(lengthscale, variance))
        for lengthscale, variance in zip(config.lengthscales(), config.variances())
    ]


def cmd_generate(config: ExperimentConfig, out_dir: str, force: bool = False) -> Dict[str, Any]:
    """
    Sample a synthetic dataset and write observations, components, taus,
    noise variances, the true mixing weights and a manifest to `out_dir`.
    """
    prepare_output(out_dir, force)
    lattice = Lattice.grid(config.lattice_shape)
    net = MixingNetwork.random(
        config.n_components,
        config.n_observed,
        config.n_layers,
        seed=[config.seed, MIXING_STREAM],
        slope=config.activation_slope,
        max_condition=config.max_condition,
    )
    dataset = generate_dataset(
        lattice,
        generating_priors(config),
        net,
        config.noise_fraction,
        config.sample_count,
        seed=[config.seed, DATA_STREAM],
    )

    files = {
        "observations": OBSERVATIONS,
        "components": COMPONENTS,
        "taus": TAUS,
        "noise_variances": NOISE,
    }
    write_tensor(os.path.join(out_dir, OBSERVATIONS), dataset.observations)
    write_tensor(os.path.join(out_dir, COMPONENTS), dataset.components)
    write_tensor(os.path.join(out_dir, TAUS), dataset.taus)
    write_tensor(os.path.join(out_dir, NOISE), dataset.noise_variances)
    for k, layer in enumerate(net.layers):
        for part in ("weight", "bias"):
            name = "mixing.{}.{}.tnsr".format(k, part)
            write_tensor(os.path.join(out_dir, name), getattr(layer, part).detach().numpy())
            files["mixing.{}.{}".format(k, part)] = name

    manifest = {
        "kind": "dataset",
        "config": config.to_dict(),
        "seeds": {
            "mixing": [config.seed, MIXING_STREAM],
            "data": [config.seed, DATA_STREAM],
        },
        "kernels": {
            "lengthscales": config.lengthscales(),
            "variances": config.variances(),
        },
        "nu": None if math.isinf(config.model_nu) else config.model_nu,
        "shapes": {
            "observations": list(dataset.observations.shape),
            "components": list(dataset.components.shape),
        },
        "noise_variances": dataset.noise_variances.tolist(),
        "files": files,
    }
    write_manifest(out_dir, manifest)
    log.info(
        "Generated {} samples of {} observations on a {} lattice in {}".format(
            config.sample_count,
            config.n_observed,
            "x".join(str(n) for n in config.lattice_shape),
            out_dir,
        )
    )
    return manifest


def load_dataset(dataset_dir: str) -> Tuple[Dataset, Dict[str, Any]]:
    manifest = read_manifest(dataset_dir)
    files = manifest["files"]
    dataset = Dataset(
        observations=read_tensor(os.path.join(dataset_dir, files["observations"])),
        components=read_tensor(os.path.join(dataset_dir, files["components"])),
        taus=read_tensor(os.path.join(dataset_dir, files["taus"])),
        noise_variances=read_tensor(os.path.join(dataset_dir, files["noise_variances"])),
    )
    return dataset, manifest


def check_compatible(config: ExperimentConfig, dataset: Dataset) -> None:
    expected = (config.sample_count, config.n_observed, config.location_count)
    if tuple(dataset.observations.shape) != expected:
        raise ShapeMismatchError(
            "Observations have shape {}, the config expects {}".format(
                tuple(dataset.observations.shape), expected
            )
        )
    expected = (config.sample_count, config.n_components, config.location_count)
    if tuple(dataset.components.shape) != expected:
        raise ShapeMismatchError(
            "Components have shape {}, the config expects {}".format(
                tuple(dataset.components.shape), expected
            )
        )


def build_model(
    config: ExperimentConfig, observations: np.ndarray
) -> Tuple[TpNicaModel, VariationalFamily]:
    """Initial estimation model and variational family for `config`."""
    rng = np.random.default_rng([config.seed, INIT_STREAM])
    lattice = Lattice.grid(config.lattice_shape)
    decoder = MixingNetwork.random(
        config.n_components,
        config.n_observed,
        config.n_layers,
        seed=rng,
        slope=config.activation_slope,
        max_condition=config.max_condition,
    )
    lengthscales = config.lengthscale * np.exp(rng.uniform(-0.5, 0.5, config.n_components))
    channel_variance = observations.transpose(1, 0, 2).reshape(config.n_observed, -1).var(axis=1)

    model = TpNicaModel(
        lattice,
        decoder,
        lengthscales.tolist(),
        config.variances(),
        (config.noise_fraction * channel_variance).tolist(),
        nu=config.model_nu,
        learn_kernel=config.train.learn_kernel,
    )
    family = VariationalFamily(
        lattice,
        config.n_components,
        config.n_pseudo,
        observations.shape[0],
        tau_prior=model.tau_prior(),
        factored=config.train.factored_posterior,
    )
    return model, family


def cmd_train(
    config: ExperimentConfig,
    dataset_dir: str,
    out_dir: str,
    force: bool = False,
    resume: Optional[str] = None,
) -> TrainResult:
    """
    Train on the dataset in `dataset_dir`, writing checkpoints under
    `out_dir/checkpoints` and the ELBO trace to `out_dir/elbo_trace.csv`.
    With `resume`, training continues from that checkpoint and the trace
    continues the stored one.
    """
    dataset, manifest = load_dataset(dataset_dir)
    check_compatible(config, dataset)
    data_kind = manifest.get("config", {}).get("model_kind")
    if data_kind and data_kind != config.model_kind:
        log.warning(
            "Training a {} model on {} data from {}".format(
                config.model_kind, data_kind, dataset_dir
            )
        )

    if resume:
        os.makedirs(out_dir, exist_ok=True)
    else:
        prepare_output(out_dir, force)

    model, family = build_model(config, dataset.observations)
    extra = {"experiment": config.to_dict(), "dataset": os.path.abspath(dataset_dir)}
    trainer = Trainer(model, family, config.train, metadata=extra)
    if resume:
        meta = trainer.restore(resume)
        if meta.get("experiment") != config.to_dict():
            log.warning("Resuming with a config that differs from the checkpoint's")

    checkpoints = os.path.join(out_dir, "checkpoints")
    os.makedirs(checkpoints, exist_ok=True)
    try:
        result = trainer.train(dataset.observations, checkpoint_dir=checkpoints)
    except NumericalError:
        write_trace(os.path.join(out_dir, TRACE_CSV), trainer.trace)
        raise
    write_trace(os.path.join(out_dir, TRACE_CSV), result.trace)
    write_manifest(
        out_dir,
        {
            "kind": "training",
            "config": config.to_dict(),
            "dataset": os.path.abspath(dataset_dir),
            "checkpoint": result.checkpoint,
            "steps": trainer.step,
        },
    )
    return result


def _model_label(config: ExperimentConfig) -> str:
    return "{}-NICA".format(config.model_kind)


def score(
    estimated: np.ndarray, dataset: Dataset, config: ExperimentConfig
) -> Dict[str, Any]:
    """One report row: MCC of `estimated` and of the linear ICA baseline."""
    report = mcc(estimated, dataset.components, config.mcc_method, config.mcc_pooling)
    baseline = linear_ica_baseline(dataset.observations, config.n_components, seed=config.seed)
    reference = mcc(
        baseline.components, dataset.components, config.mcc_method, config.mcc_pooling
    )
    return {
        "model": _model_label(config),
        "layers": config.n_layers,
        "kernel_regime": config.kernel_regime,
        "n_pseudo": config.n_pseudo,
        "seed": config.seed,
        "mcc": report.mcc,
        "baseline_mcc": reference.mcc,
    }


def write_report(path: str, rows: List[Dict[str, Any]]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def read_report(path: str) -> List[Dict[str, Any]]:
    with open(path, newline="") as handle:
        rows = list(csv.DictReader(handle))
    for row in rows:
        for key in ("layers", "n_pseudo", "seed"):
            row[key] = int(row[key])
        for key in ("mcc", "baseline_mcc"):
            row[key] = float(row[key])
    return rows


def cmd_evaluate(
    checkpoint: Optional[str],
    dataset_dir: str,
    out_dir: str,
    force: bool = False,
    config: Optional[ExperimentConfig] = None,
    samples: bool = True,
) -> Dict[str, Any]:
    """
    Extract posterior-mean components of every sample from `checkpoint`,
    score them and the linear ICA baseline against the ground truth, and write
    the report, the estimates and two SVG summaries. With `samples`, the
    sampled components of every dataset sample are written as well, shaped
    (samples, N_t, N_s, N, m).

    Without a checkpoint the ground-truth components are scored as their own
    estimate, which checks the evaluation path end to end.
    """
    dataset, manifest = load_dataset(dataset_dir)
    prepare_output(out_dir, force)

    trace = []
    if checkpoint is None:
        config = config or ExperimentConfig.from_dict(manifest["config"])
        estimated = dataset.components
    else:
        meta = read_checkpoint_meta(checkpoint)
        if "experiment" not in meta:
            raise ConfigError("Checkpoint {} carries no experiment config".format(checkpoint))
        config = ExperimentConfig.from_dict(meta["experiment"])
        check_compatible(config, dataset)
        model, family = build_model(config, dataset.observations)
        Trainer(model, family, config.train).restore(checkpoint)
        trace = meta["trace"]

        results = [
            posterior_components(
                model,
                family[i],
                dataset.observations[i],
                n_tau=config.train.eval_tau_samples,
                n_s=config.train.eval_s_samples,
                seed=[config.seed, EVAL_STREAM, i],
                with_samples=samples,
            )
            for i in range(dataset.observations.shape[0])
        ]
        estimated = np.stack([means for means, _ in results])
        if samples:
            write_tensor(
                os.path.join(out_dir, POSTERIOR_SAMPLES), np.stack([s for _, s in results])
            )

    write_tensor(os.path.join(out_dir, ESTIMATES), estimated)
    row = score(estimated, dataset, config)
    write_report(os.path.join(out_dir, REPORT_CSV), [row])
    log.info(
        "{} MCC {:.4f} (linear ICA {:.4f})".format(row["model"], row["mcc"], row["baseline_mcc"])
    )

    steps = [r[0] for r in trace]
    _svg.write_svg(
        os.path.join(out_dir, "learning_curve.svg"),
        _svg.line_plot(
            {"elbo": (steps, [r[2] for r in trace])},
            title="Learning curve",
            xlabel="step",
            ylabel="ELBO",
        ),
    )
    _svg.write_svg(
        os.path.join(out_dir, "mcc_vs_depth.svg"),
        _svg.line_plot(
            {
                row["model"]: ([row["layers"]], [row["mcc"]]),
                "linear-ICA": ([row["layers"]], [row["baseline_mcc"]]),
            },
            title="MCC by mixing depth",
            xlabel="layers",
            ylabel="MCC",
        ),
    )
    return row


def run_cell(config_document: Dict[str, Any], cell_dir: str, threads: int = 1) -> Dict[str, Any]:
    """Generate, train and evaluate one sweep cell; returns its report row."""
    torch.set_num_threads(threads)
    config = ExperimentConfig.from_dict(config_document)
    data_dir = os.path.join(cell_dir, "data")
    train_dir = os.path.join(cell_dir, "train")
    cmd_generate(config, data_dir, force=True)
    result = cmd_train(config, data_dir, train_dir, force=True)
    return cmd_evaluate(
        result.checkpoint, data_dir, os.path.join(cell_dir, "eval"), force=True, samples=False
    )
