"""Expected-cost choice of the number of computational units.

For every candidate count ``N`` in an inclusive range the allocation is
``N * O``. The probability that predicted demand exceeds it (``p_short``)
and falls below it (``p_excess``) are weighted and summed over resources;
the cheapest ``N`` wins, ties going to the smaller count.

By default ``w_excess`` weights ``p_excess`` and ``w_short`` weights
``p_short``. ``strict_paper=True`` swaps that binding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .encoder import GaussianForecast
from .exceptions import ConfigurationError, DimensionError


@dataclass(frozen=True)
class DecisionWeights:
    w_excess: np.ndarray
    w_short: np.ndarray

    def __post_init__(self):
        we = np.atleast_1d(np.asarray(self.w_excess, dtype=float))
        ws = np.atleast_1d(np.asarray(self.w_short, dtype=float))
        if we.shape != ws.shape:
            raise DimensionError("w_excess and w_short must have the same length")
        if not (np.all(we > 0) and np.all(ws > 0)):
            raise ValueError("decision weights must be strictly positive")
        object.__setattr__(self, "w_excess", we)
        object.__setattr__(self, "w_short", ws)

    @classmethod
    def uniform(cls, n_resources, w_excess=1.0, w_short=4.0):
        return cls(np.full(n_resources, w_excess), np.full(n_resources, w_short))

    def scaled(self, factor):
        return DecisionWeights(self.w_excess * factor, self.w_short * factor)


@dataclass(frozen=True)
class SlaPolicy:
    """Discount the excess-allocation penalty when predicted quality nears the SLA.

    ``quality_index`` indexes the quality-role indicators; ``sla_threshold``
    is in the same units as the samples handed to :func:`decide`.
    """

    quality_index: int
    sla_threshold: float
    proximity_band: float = 0.2
    excess_discount: float = 0.5

    def __post_init__(self):
        if not np.isfinite(self.sla_threshold):
            raise ValueError("SLA threshold must be finite")
        if not 0 < self.proximity_band < 1:
            raise ValueError("proximity band must lie in (0, 1)")
        if not 0 < self.excess_discount <= 1:
            raise ValueError("excess discount must lie in (0, 1]")


@dataclass(frozen=True)
class CostPoint:
    n_units: int
    p_short: np.ndarray
    p_excess: np.ndarray
    cost: float


@dataclass(frozen=True)
class DecisionOutcome:
    n_optimal: int
    cost_curve: list
    weights: DecisionWeights
    adjusted: bool = False

    def costs(self):
        return np.array([p.cost for p in self.cost_curve])


def provisioning_probs(demand, allocation):
    """Empirical shortfall and excess probabilities per resource.

    ``demand`` is ``C x S`` in raw units and ``allocation`` a length-``C``
    vector. Samples equal to the allocation count toward neither side.
    """
    d = np.atleast_2d(np.asarray(demand, dtype=float))
    a = np.asarray(allocation, dtype=float).reshape(-1)
    if d.shape[0] != a.size:
        raise DimensionError(f"{d.shape[0]} demand rows for {a.size} allocations")
    s = d.shape[1]
    p_short = (d > a[:, None]).sum(axis=1) / s
    p_excess = (d < a[:, None]).sum(axis=1) / s
    return p_short, p_excess


def _sorted_probs(sorted_demand, allocations):
    """Probabilities for many allocations at once; ``allocations`` is ``R x C``."""
    s = sorted_demand.shape[1]
    p_short = np.empty(allocations.shape)
    p_excess = np.empty(allocations.shape)
    for c in range(sorted_demand.shape[0]):
        row = sorted_demand[c]
        p_excess[:, c] = np.searchsorted(row, allocations[:, c], side="left") / s
        p_short[:, c] = (s - np.searchsorted(row, allocations[:, c], side="right")) / s
    return p_short, p_excess


def gaussian_provisioning_probs(mean, variance, allocation):
    """Normal-CDF version of :func:`provisioning_probs` for a Gaussian demand forecast."""
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(variance, dtype=float))
    z = (np.asarray(allocation, dtype=float) - mean) / sd
    p_excess = ndtr(z)
    return 1.0 - p_excess, p_excess


def cost(p_short, p_excess, weights, strict_paper=False):
    """Weighted provisioning cost summed over resources."""
    p_short = np.asarray(p_short, dtype=float)
    p_excess = np.asarray(p_excess, dtype=float)
    if p_short.shape[-1] != weights.w_excess.size or p_excess.shape != p_short.shape:
        raise DimensionError("probabilities and weights must have one entry per resource")
    on_short, on_excess = (weights.w_excess, weights.w_short) if strict_paper else (weights.w_short, weights.w_excess)
    total = np.zeros(p_short.shape[:-1])
    for c in range(p_short.shape[-1]):
        total = total + (on_excess[c] * p_excess[..., c] + on_short[c] * p_short[..., c])
    return total if total.ndim else float(total)


def adjust_weights(base, quality_samples, policy):
    """Apply the SLA discount to ``w_excess`` when the quality mean is within the band.

    Returns ``(weights, adjusted)``.
    """
    q = np.atleast_2d(np.asarray(quality_samples, dtype=float))
    if not 0 <= policy.quality_index < q.shape[0]:
        raise ValueError(f"quality index {policy.quality_index} outside [0, {q.shape[0]})")
    level = q[policy.quality_index].mean()
    if level >= (1.0 - policy.proximity_band) * policy.sla_threshold:
        return replace(base, w_excess=base.w_excess * policy.excess_discount), True
    return base, False


def decide(forecast, roles, cu, n_range, weights, sla=None, strict_paper=False):
    """Pick the cost-minimizing CU count over the inclusive ``n_range``.

    Parameters
    ----------
    forecast : ndarray (N, S) or GaussianForecast
        Predictive samples of all indicators in raw units, or a Gaussian
        forecast (raw units) for the closed-form probability path.
    roles : sequence of str
        Role of each of the ``N`` rows.
    cu : CUConfig
    n_range : (int, int)
    weights : DecisionWeights
    sla : SlaPolicy, optional
    strict_paper : bool
        Bind ``w_excess`` to the shortfall probability instead.
    """
    roles = list(roles)
    consumption = [i for i, r in enumerate(roles) if r == "consumption"]
    quality = [i for i, r in enumerate(roles) if r == "quality"]
    if not consumption:
        raise ConfigurationError("no consumption-role indicator to provision for")
    n_low, n_high = int(n_range[0]), int(n_range[1])
    if n_low < 1 or n_low > n_high:
        raise ValueError(f"invalid CU range [{n_low}, {n_high}]")
    caps = cu.capacities
    if caps.size != len(consumption) or weights.w_excess.size != len(consumption):
        raise DimensionError("capacities and weights need one entry per consumption indicator")

    gaussian = isinstance(forecast, GaussianForecast)
    if gaussian:
        mean = np.asarray(forecast.mean, dtype=float)
        var = np.asarray(forecast.variance, dtype=float)
        if mean.shape != (len(roles),):
            raise DimensionError(f"forecast covers {mean.size} indicators, roles list {len(roles)}")
        quality_samples = mean[quality][:, None] if quality else None
    else:
        d = np.asarray(forecast, dtype=float)
        if d.ndim != 2 or d.shape[0] != len(roles):
            raise DimensionError(f"samples shape {d.shape} does not match {len(roles)} roles")
        quality_samples = d[quality] if quality else None

    adjusted = False
    if sla is not None:
        if quality_samples is None:
            raise ConfigurationError("SLA policy given but no quality-role indicator")
        weights, adjusted = adjust_weights(weights, quality_samples, sla)

    counts = np.arange(n_low, n_high + 1)
    allocations = counts[:, None] * caps[None, :]
    if gaussian:
        p_short, p_excess = gaussian_provisioning_probs(mean[consumption], var[consumption], allocations)
    else:
        p_short, p_excess = _sorted_probs(np.sort(d[consumption], axis=1), allocations)
    totals = cost(p_short, p_excess, weights, strict_paper)
    curve = [CostPoint(int(n), p_short[i].copy(), p_excess[i].copy(), float(totals[i])) for i, n in enumerate(counts)]
    best = int(np.argmin(totals))  # first minimum, i.e. smallest N on ties
    return DecisionOutcome(int(counts[best]), curve, weights, adjusted)


@dataclass
class DecisionConfig:
    """Everything :func:`decide` needs besides the forecast."""

    n_low: int = 1
    n_high: int = 64
    w_excess: list = field(default_factory=lambda: [1.0])
    w_short: list = field(default_factory=lambda: [4.0])
    sla: SlaPolicy | None = None
    strict_paper: bool = False

    def weights(self, n_resources):
        we = np.broadcast_to(np.asarray(self.w_excess, dtype=float), (n_resources,))
        ws = np.broadcast_to(np.asarray(self.w_short, dtype=float), (n_resources,))
        return DecisionWeights(we.copy(), ws.copy())

    def run(self, forecast, roles, cu):
        n_res = sum(1 for r in roles if r == "consumption")
        return decide(forecast, roles, cu, (self.n_low, self.n_high), self.weights(n_res), self.sla, self.strict_paper)


def _fmt_vec(v):
    return ",".join(repr(float(x)) for x in np.atleast_1d(v))


def outcome_document(outcome, config=None, capacities=None):
    """Flat ``key = value`` lines describing a decision and its full cost curve."""
    lines = []
    if config is not None:
        lines += [
            f"n_low = {config.n_low}",
            f"n_high = {config.n_high}",
            f"strict_paper = {str(config.strict_paper).lower()}",
        ]
        if config.sla is not None:
            lines += [
                f"sla.quality_index = {config.sla.quality_index}",
                f"sla.threshold = {config.sla.sla_threshold!r}",
                f"sla.proximity_band = {config.sla.proximity_band!r}",
                f"sla.excess_discount = {config.sla.excess_discount!r}",
            ]
    if capacities is not None:
        lines.append(f"cu_capacity = {_fmt_vec(capacities)}")
    lines += [
        f"n_optimal = {outcome.n_optimal}",
        f"weights.adjusted = {str(outcome.adjusted).lower()}",
        f"weights.w_excess = {_fmt_vec(outcome.weights.w_excess)}",
        f"weights.w_short = {_fmt_vec(outcome.weights.w_short)}",
    ]
    for point in outcome.cost_curve:
        lines += [
            f"curve.{point.n_units}.p_short = {_fmt_vec(point.p_short)}",
            f"curve.{point.n_units}.p_excess = {_fmt_vec(point.p_excess)}",
            f"curve.{point.n_units}.cost = {point.cost!r}",
        ]
    return "\n".join(lines) + "\n"
