"""Forecast scores (MSE, sample CRPS) and provisioning outcome metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .exceptions import DimensionError


def crps_empirical(samples, truth):
    """Sample CRPS ``mean|x - y| - mean|x - x'| / 2`` along the last axis.

    ``samples`` has shape ``(..., S)`` and ``truth`` broadcasts against
    ``(...)``. Uses the sorted-sample identity so the pairwise term costs
    ``O(S log S)``. With ``S = 1`` this is ``|x - y|``.
    """
    x = np.sort(np.asarray(samples, dtype=float), axis=-1)
    y = np.asarray(truth, dtype=float)
    s = x.shape[-1]
    if s < 1:
        raise ValueError("CRPS needs at least one sample")
    spread = np.abs(x - y[..., None]).mean(axis=-1)
    # sum_{j,k} |x_j - x_k| = 2 * sum_i (2i - S - 1) x_(i), i = 1..S
    weights = 2.0 * np.arange(1, s + 1) - s - 1
    pair = 2.0 * (x * weights).sum(axis=-1)
    return spread - pair / (2.0 * s * s)


def gaussian_crps(mu, sigma, truth):
    """Closed-form CRPS of ``Normal(mu, sigma^2)`` at ``truth``."""
    z = (np.asarray(truth, dtype=float) - mu) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / np.sqrt(np.pi))


@dataclass(frozen=True)
class EvalReport:
    mse: float
    crps: float
    mse_per_indicator: np.ndarray
    crps_per_indicator: np.ndarray
    n_windows: int
    names: tuple = ()

    def rows(self):
        names = self.names or tuple(f"x{i}" for i in range(len(self.mse_per_indicator)))
        for name, m, c in zip(names, self.mse_per_indicator, self.crps_per_indicator):
            yield name, float(m), float(c)
        yield "all", self.mse, self.crps

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["indicator", "mse", "crps", "n_windows"])
            for name, m, c in self.rows():
                writer.writerow([name, repr(m), repr(c), self.n_windows])

    def table(self):
        lines = [f"{'indicator':<16}{'MSE':>14}{'CRPS':>14}"]
        lines += [f"{name:<16}{m:>14.6f}{c:>14.6f}" for name, m, c in self.rows()]
        lines.append(f"windows: {self.n_windows}")
        return "\n".join(lines)


def evaluate(model, windows, n_samples=100, seed=0, names=()):
    """Score ``model`` on ``windows``.

    MSE uses the predictive sample mean as the point forecast; CRPS uses the
    full sample set. Both are averaged over indicators and windows.
    """
    samples = model.sample(windows.inputs, time_features=windows.time_features,
                           n_samples=n_samples, random_state=seed)
    truth = windows.targets
    point = samples.mean(axis=-1)
    sq = (point - truth) ** 2
    crps = crps_empirical(samples, truth)
    return EvalReport(
        mse=float(sq.mean()),
        crps=float(crps.mean()),
        mse_per_indicator=sq.mean(axis=0),
        crps_per_indicator=crps.mean(axis=0),
        n_windows=len(truth),
        names=tuple(names),
    )


def _pair(allocated, consumed):
    allocated = np.asarray(allocated, dtype=float)
    consumed = np.asarray(consumed, dtype=float)
    if allocated.shape != consumed.shape:
        raise DimensionError(f"allocated {allocated.shape} and consumed {consumed.shape} differ")
    if allocated.ndim == 1:
        allocated, consumed = allocated[:, None], consumed[:, None]
    return allocated, consumed


def success_rate(allocated, consumed):
    """Fraction of intervals where every resource's allocation covers its consumption."""
    allocated, consumed = _pair(allocated, consumed)
    if allocated.shape[0] == 0:
        raise ValueError("no intervals")
    return float(np.all(allocated >= consumed, axis=1).mean())


def utilization(allocated, consumed):
    """Per-resource ``sum(consumed) / sum(allocated)``."""
    allocated, consumed = _pair(allocated, consumed)
    if np.any(allocated <= 0):
        raise ValueError("every interval needs a positive allocation")
    return consumed.sum(axis=0) / allocated.sum(axis=0)
