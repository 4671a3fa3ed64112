import csv
import logging
import math
import os
from collections import OrderedDict, namedtuple
from concurrent.futures import (
    FIRST_COMPLETED,
    BrokenExecutor,
    ProcessPoolExecutor,
    ThreadPoolExecutor,
    wait,
)
from dataclasses import replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import _svg
from .config import SweepConfig, thread_count, write_manifest
from .experiment import prepare_output, run_cell, write_report

Cell = namedtuple("Cell", ["key", "config", "directory"])

SUMMARY_COLUMNS = ("model", "layers", "kernel_regime", "n_pseudo", "n", "mean_mcc", "stderr_mcc")
FAILURE_COLUMNS = ("cell", "errtype", "message")
BASELINE = "linear-ICA"


def cell_key(config) -> str:
    return "{}-L{}-{}-J{}-seed{}".format(
        config.model_kind, config.n_layers, config.kernel_regime, config.n_pseudo, config.seed
    )


def baseline_label(model: str) -> str:
    """Summary label of the linear ICA baseline run on `model`'s own data."""
    return "{} ({} data)".format(BASELINE, model.split("-")[0])


def mean_stderr(values) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def aggregate(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    """
    Mean and standard error of the MCC across seeds for every (model, layers,
    kernel regime, pseudo-point count). Every model kind is trained on data
    from its own process, so the linear ICA baseline is aggregated once per
    dataset under `baseline_label(model)`.
    """
    groups = OrderedDict()
    baselines = OrderedDict()
    for row in rows:
        cell = (row["layers"], row["kernel_regime"], row["n_pseudo"])
        groups.setdefault((row["model"],) + cell, []).append(row["mcc"])
        label = baseline_label(row["model"])
        baselines.setdefault((label,) + cell, {})[row["seed"]] = row["baseline_mcc"]

    for key, by_seed in baselines.items():
        groups[key] = list(by_seed.values())

    summary = []
    for (model, layers, regime, n_pseudo), values in groups.items():
        mean, stderr = mean_stderr(values)
        summary.append(
            {
                "model": model,
                "layers": layers,
                "kernel_regime": regime,
                "n_pseudo": n_pseudo,
                "n": len(values),
                "mean_mcc": mean,
                "stderr_mcc": stderr,
            }
        )
    return summary


class SweepRunner:
    """
    Runs every cell of a sweep grid (generate, train, evaluate) on an executor
    pool and aggregates the report rows. A failing cell is recorded and the
    sweep carries on.

    :param config: the grid
    :type config: SweepConfig
    :param out_dir: root of the per-cell output directories and the reports
    :type out_dir: str
    :param concurrency: number of cells run at once; defaults to NICA_THREADS
    :type concurrency: int
    :param use_threads: run cells on threads rather than processes
    :type use_threads: bool
    :param executor: executor class, ProcessPoolExecutor by default
    :type executor: class
    :param task: callable run per cell as task(config_dict, directory, threads)
    :type task: callable
    :param log: logger for progress and failures
    :type log: logging.Logger
    """

    def __init__(self, config: SweepConfig, out_dir: str, **kwargs):
        self.config = config
        self.out_dir = out_dir
        self.concurrency = thread_count(kwargs.pop("concurrency", None))
        self.log = kwargs.pop("log", logging.getLogger("tpnica.sweep"))
        self.task = kwargs.pop("task", run_cell)
        self._executor_class = kwargs.pop(
            "executor",
            ThreadPoolExecutor if kwargs.pop("use_threads", False) else ProcessPoolExecutor,
        )
        if kwargs:
            raise TypeError("Unexpected arguments: {}".format(", ".join(sorted(kwargs))))

        self.rows: List[Dict[str, Any]] = []
        self._results: Dict[str, Dict[str, Any]] = {}
        self.failures: List[Dict[str, str]] = []
        self._pending = list()
        self._executor = None

    @property
    def executor(self):
        if self._executor is None:
            self._executor = self._executor_class(max_workers=self.concurrency)
        return self._executor

    @property
    def threads_per_cell(self) -> int:
        return max(1, thread_count() // self.concurrency)

    def cells(self) -> List[Cell]:
        return [
            Cell(key=cell_key(c), config=c, directory=os.path.join(self.out_dir, cell_key(c)))
            for c in self.config.cells()
        ]

    def run(self, force: bool = False) -> List[Dict[str, Any]]:
        prepare_output(self.out_dir, force)
        write_manifest(self.out_dir, {"kind": "sweep", "config": self.config.to_dict()})

        cells = self.cells()
        self.log.info(
            "Running {} sweep cells with concurrency {}".format(len(cells), self.concurrency)
        )
        try:
            for cell in cells:
                self._process(cell)
                while len(self._pending) >= self.concurrency:
                    self._collect()
            while self._pending:
                self._collect()
        finally:
            if self._executor is not None:
                self._executor.shutdown(wait=True)
                self._executor = None

        self.rows = [self._results[c.key] for c in cells if c.key in self._results]
        summary = self.write_reports()
        self.log.info(
            "Sweep finished: {} cells succeeded, {} failed".format(
                len(self.rows), len(self.failures)
            )
        )
        return summary

    def _process(self, cell: Cell):
        try:
            self.log.debug("Submitting sweep cell {}".format(cell.key))
            future = self.executor.submit(
                self.task, cell.config.to_dict(), cell.directory, self.threads_per_cell
            )
            future.cell = cell
            self._pending.append(future)
        except BrokenExecutor as e:
            self._executor = None
            self._fail(cell, exception=e)
        except Exception as e:
            self._fail(cell, exception=e)

    def _collect(self):
        done, _ = wait(self._pending, return_when=FIRST_COMPLETED)
        for future in done:
            self._pending.remove(future)
            try:
                self._ack(future.cell, future.result())
            except Exception as e:
                self._fail(future.cell, exception=e)

    def _ack(self, cell: Cell, row: Dict[str, Any]):
        self._results[cell.key] = row
        self.log.info("Sweep cell {} finished: MCC {:.4f}".format(cell.key, row["mcc"]))

    def _fail(self, cell: Cell, exception=None):
        failure = {"cell": cell.key, "errtype": "", "message": ""}
        if exception is not None:
            failure["errtype"] = type(exception).__name__
            failure["message"] = str(exception)
        self.failures.append(failure)
        self.log.warning(
            "Sweep cell {} failed: {}: {}".format(cell.key, failure["errtype"], failure["message"])
        )

    def write_reports(self) -> List[Dict[str, Any]]:
        summary = aggregate(self.rows)
        write_report(os.path.join(self.out_dir, "sweep_rows.csv"), self.rows)
        _write_csv(os.path.join(self.out_dir, "sweep_summary.csv"), SUMMARY_COLUMNS, summary)
        _write_csv(os.path.join(self.out_dir, "failures.csv"), FAILURE_COLUMNS, self.failures)

        _svg.write_svg(
            os.path.join(self.out_dir, "mcc_vs_depth.svg"),
            summary_plot(summary, "layers", "MCC by mixing depth"),
        )
        if len(set(row["n_pseudo"] for row in summary)) > 1:
            _svg.write_svg(
                os.path.join(self.out_dir, "mcc_vs_pseudo_points.svg"),
                summary_plot(summary, "n_pseudo", "MCC by pseudo-point count"),
            )
        return summary


def cmd_sweep(
    config: SweepConfig,
    out_dir: str,
    force: bool = False,
    seed: Optional[int] = None,
    **kwargs
) -> SweepRunner:
    """
    Run every cell of `config` and write the sweep reports. A `seed` replaces
    the seed axis; other keyword arguments go to `SweepRunner`.
    """
    if seed is not None:
        config = replace(config, seeds=(seed,))
    runner = SweepRunner(config, out_dir, **kwargs)
    runner.run(force=force)
    return runner


def summary_plot(summary: List[Dict[str, Any]], axis: str, title: str) -> str:
    series, errors = OrderedDict(), OrderedDict()
    for row in sorted(summary, key=lambda r: r[axis]):
        name = "{} ({})".format(row["model"], row["kernel_regime"])
        xs, ys = series.setdefault(name, ([], []))
        xs.append(row[axis])
        ys.append(row["mean_mcc"])
        errors.setdefault(name, []).append(row["stderr_mcc"])
    return _svg.line_plot(series, title=title, xlabel=axis, ylabel="MCC", errors=errors)


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
