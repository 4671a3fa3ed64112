import itertools
import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import optimize, stats
from sklearn.decomposition import FastICA
from sklearn.exceptions import ConvergenceWarning

from .exceptions import DimensionError, EvaluationError

log = logging.getLogger("tpnica.evaluation")

BRUTE_FORCE_LIMIT = 8


@dataclass(frozen=True, eq=False)
class MccReport:
    """
    `matching[i]` is the estimated component matched to true component i,
    `correlations[i]` the absolute correlation of that pair and
    `sign_flips[i]` whether the pair is negatively correlated.

    With per-sample pooling `mcc` is the mean of `per_sample`, and the other
    fields describe the matching on the pooled data.
    """

    mcc: float
    matching: np.ndarray
    correlations: np.ndarray
    sign_flips: np.ndarray
    per_sample: Optional[np.ndarray] = None


def _flatten(components: np.ndarray) -> np.ndarray:
    # (samples, N, m) -> (N, samples * m)
    return components.transpose(1, 0, 2).reshape(components.shape[1], -1)


def _check_variance(rows: np.ndarray, label: str) -> None:
    spread = rows.std(axis=1)
    flat = np.flatnonzero(~(spread > 0))
    if flat.size:
        raise EvaluationError(
            "{} component {} has zero variance".format(label, int(flat[0]))
        )


def correlation_matrix(truth: np.ndarray, estimated: np.ndarray, method: str = "pearson") -> np.ndarray:
    """
    Correlations between rows: entry (i, j) correlates true component i with
    estimated component j. Both inputs are (N, n).
    """
    _check_variance(truth, "True")
    _check_variance(estimated, "Estimated")
    if method == "spearman":
        truth = stats.rankdata(truth, axis=1)
        estimated = stats.rankdata(estimated, axis=1)
    elif method != "pearson":
        raise EvaluationError("Unknown correlation method '{}'".format(method))

    n = truth.shape[0]
    return np.corrcoef(truth, estimated)[:n, n:]


def _match(corr: np.ndarray) -> MccReport:
    absolute = np.abs(corr)
    rows, cols = optimize.linear_sum_assignment(absolute, maximize=True)
    matching = cols[np.argsort(rows)]
    index = np.arange(corr.shape[0])
    pairs = absolute[index, matching]
    return MccReport(
        mcc=float(pairs.mean()),
        matching=matching,
        correlations=pairs,
        sign_flips=corr[index, matching] < 0,
    )


def mcc(
    estimated,
    truth,
    method: str = "pearson",
    pooling: str = "pooled",
) -> MccReport:
    """
    Mean absolute correlation between true and estimated components under the
    optimal one-to-one matching.

    :param estimated: estimated components, (samples, N, m)
    :param truth: ground-truth components, (samples, N, m)
    :param method: "pearson" or "spearman"
    :param pooling: "pooled" correlates over all samples and locations at
        once, "per_sample" averages the MCC of every sample
    """
    estimated = np.asarray(estimated, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimated.shape != truth.shape or estimated.ndim != 3:
        raise DimensionError(
            "Expected two (samples, N, m) arrays of equal shape, got {} and {}".format(
                estimated.shape, truth.shape
            )
        )

    report = _match(correlation_matrix(_flatten(truth), _flatten(estimated), method))
    if pooling == "pooled":
        return report
    if pooling != "per_sample":
        raise EvaluationError("Unknown MCC pooling '{}'".format(pooling))

    per_sample = np.array(
        [_match(correlation_matrix(t, e, method)).mcc for t, e in zip(truth, estimated)]
    )
    return MccReport(
        mcc=float(per_sample.mean()),
        matching=report.matching,
        correlations=report.correlations,
        sign_flips=report.sign_flips,
        per_sample=per_sample,
    )


def brute_force_matching(absolute: np.ndarray) -> Tuple[float, Tuple[int, ...]]:
    """Best total over all N! matchings; a cross-check for small N."""
    absolute = np.asarray(absolute, dtype=np.float64)
    n = absolute.shape[0]
    if n > BRUTE_FORCE_LIMIT:
        raise EvaluationError(
            "Brute-force matching is limited to N <= {}, got {}".format(BRUTE_FORCE_LIMIT, n)
        )
    rows = np.arange(n)
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(n)):
        total = absolute[rows, perm].sum()
        if total > best:
            best, best_perm = total, perm
    return float(best), best_perm


@dataclass(frozen=True, eq=False)
class IcaResult:
    components: np.ndarray
    converged: bool
    n_iter: int


def linear_ica_baseline(
    observations,
    n_components: int,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> IcaResult:
    """
    Linear ICA treating every (sample, location) as an independent draw in
    R^M: whitening to `n_components` dimensions, then symmetric fixed-point
    iterations with the log-cosh (tanh) contrast.

    Non-convergence is not an error: the last iterate is returned with
    `converged=False`.

    :param observations: (samples, M, m)
    :return: estimated components (samples, n_components, m)
    """
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError("Expected (samples, M, m) observations, got {}".format(x.shape))
    samples, channels, locations = x.shape
    if not 1 <= n_components <= channels:
        raise EvaluationError(
            "n_components must lie in 1..{}, got {}".format(channels, n_components)
        )

    ica = FastICA(
        n_components=n_components,
        algorithm="parallel",
        whiten="unit-variance",
        fun="logcosh",
        tol=tol,
        max_iter=max_iter,
        random_state=seed,
    )
    flat = x.transpose(0, 2, 1).reshape(-1, channels)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        sources = ica.fit_transform(flat)

    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    if not converged:
        log.warning("Linear ICA did not converge in {} iterations".format(max_iter))

    components = sources.reshape(samples, locations, n_components).transpose(0, 2, 1)
    return IcaResult(
        components=np.ascontiguousarray(components),
        converged=converged,
        n_iter=int(ica.n_iter_),
    )
