"""Trace replay of scaling policies and Table-style usage reports.

Every policy decides the CU count for interval ``t`` from panel data at
intervals ``< t`` only. Allocated resources are ``units * O``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .decision import DecisionConfig
from .exceptions import GateError, SizeError
from .indicators import (
    CUConfig,
    IndicatorPanel,
    chronological_split,
    make_windows,
    minmax_fit_transform,
    time_features,
)
from .metrics import success_rate, utilization
from .training import validate_90_90

logger = logging.getLogger(__name__)

POLICY_KINDS = ("no_scale", "rule_based", "autopilot", "harmony")
INTERVAL_HOURS = 1.0 / 6.0
_ROUND_GUARD = 1e-9


@dataclass
class SynthSpec:
    """Generative model of a three-level service trace.

    Requests follow a daily sinusoid with AR(1) noise and occasional
    multiplicative spikes. Each resource consumes ``offset + gain * sat(r)``
    of the request level ``lag`` intervals earlier, where ``sat`` is a soft
    cap at ``saturation`` (``None`` keeps it linear). Response time grows
    convexly with the ratio of CPU-like consumption to ``reference_capacity``.
    """

    n_intervals: int = 4032
    interval_seconds: int = 600
    start: int = 1717372800  # 2024-06-03 00:00 UTC, a Monday
    period: int = 144
    request_base: float = 100.0
    request_amplitude: float = 50.0
    ar_coef: float = 0.7
    ar_noise: float = 1.5
    spike_prob: float = 0.01
    spike_scale: float = 0.6
    resource_names: tuple = ("cpu", "gpu")
    gains: tuple = (0.2, 0.05)
    offsets: tuple = (4.0, 1.0)
    consumption_noise: tuple = (0.3, 0.08)
    lag: int = 1
    saturation: float | None = 400.0
    cu_capacities: tuple = (4.0, 1.0)
    quality_base: float = 50.0
    quality_gain: float = 40.0
    quality_power: float = 3.0
    quality_noise: float = 0.5
    reference_capacity: float = 48.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.spike_prob <= 1:
            raise ValueError("spike probability must lie in [0, 1]")
        k = len(self.resource_names)
        if not (len(self.gains) == len(self.offsets) == len(self.consumption_noise) == len(self.cu_capacities) == k):
            raise ValueError("per-resource settings must all have one entry per resource")
        values = [self.request_base, self.request_amplitude, self.ar_coef, self.ar_noise, self.spike_scale,
                  *self.gains, *self.offsets, *self.consumption_noise, self.quality_base, self.quality_gain]
        if not np.all(np.isfinite(values)):
            raise ValueError("all gains must be finite")
        if self.lag < 0 or self.n_intervals < 1:
            raise ValueError("lag must be >= 0 and n_intervals >= 1")

    def cu_config(self):
        return CUConfig(np.asarray(self.cu_capacities, dtype=float))


def synth_trace(spec):
    """Generate a raw panel ``[requests, *resources, response_time]`` from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    t_total = spec.n_intervals + spec.lag
    steps = np.arange(t_total)
    cycle = spec.request_base + spec.request_amplitude * np.sin(2 * np.pi * steps / spec.period)
    shocks = rng.standard_normal(t_total) * spec.ar_noise
    ar = np.zeros(t_total)
    for t in range(1, t_total):
        ar[t] = spec.ar_coef * ar[t - 1] + shocks[t]
    spikes = (rng.random(t_total) < spec.spike_prob) * rng.uniform(0.5, 1.0, t_total) * spec.spike_scale
    requests = np.maximum(cycle + ar, 0.0) * (1.0 + spikes)
    if spec.saturation is None:
        driven = requests
    else:
        driven = spec.saturation * np.tanh(requests / spec.saturation)
    # consumption at t follows requests at t - lag
    driver = driven[: spec.n_intervals]
    resources = []
    for gain, offset, noise in zip(spec.gains, spec.offsets, spec.consumption_noise):
        series = offset + gain * driver + rng.standard_normal(spec.n_intervals) * noise
        resources.append(np.maximum(series, 0.0))
    ratio = resources[0] / spec.reference_capacity
    quality = spec.quality_base * (1.0 + spec.quality_gain / spec.quality_base * ratio ** spec.quality_power)
    quality = quality + rng.standard_normal(spec.n_intervals) * spec.quality_noise
    values = np.vstack([requests[spec.lag:], *resources, quality])
    names = ("requests", *spec.resource_names, "response_time")
    roles = ("request",) + ("consumption",) * len(resources) + ("quality",)
    levels = [1] + [2] * len(resources) + [3]
    timestamps = spec.start + spec.interval_seconds * np.arange(spec.n_intervals, dtype=np.int64)
    return IndicatorPanel(values, names, roles, levels, timestamps)


@dataclass
class ScalingPolicy:
    """A policy and its parameters.

    ``no_scale`` holds ``units`` fixed. ``rule_based`` covers the all-history
    maximum plus ``buffer``; ``autopilot`` does the same over the last
    ``window`` intervals, refreshed every ``window`` intervals. ``harmony``
    forecasts with ``model`` (inputs normalized by ``norm``), and feeds the
    raw-unit samples to ``decision``.
    """

    kind: str
    buffer: float = 0.10
    window: int = 144
    units: int | None = None
    model: object = None
    norm: object = None
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    n_samples: int = 100
    seed: int = 0
    retrain_interval: int | None = None
    gate_windows: object = None
    skip_gate: bool = False
    gate_thresholds: tuple = (0.9, 0.9)
    name: str | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.buffer < 0 or self.window < 1:
            raise ValueError("buffer must be >= 0 and window >= 1")

    @property
    def label(self):
        return self.name or self.kind


@dataclass
class AllocationLog:
    policy: str
    intervals: np.ndarray
    units: np.ndarray
    allocated: np.ndarray
    consumed: np.ndarray

    def to_csv(self, path_or_buffer, resource_names):
        is_path = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
        fh = open(path_or_buffer, "w", newline="") if is_path else path_or_buffer
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["policy", "interval", "units", *(f"alloc_{r}" for r in resource_names),
                             *(f"consumed_{r}" for r in resource_names)])
            for i, t in enumerate(self.intervals):
                writer.writerow([self.policy, int(t), int(self.units[i]),
                                 *(repr(float(v)) for v in self.allocated[i]),
                                 *(repr(float(v)) for v in self.consumed[i])])
        finally:
            if fh is not path_or_buffer:
                fh.close()


def units_for(demand, capacities, buffer=0.0):
    """Smallest CU count covering ``demand * (1 + buffer)`` on every resource."""
    need = np.asarray(demand, dtype=float) * (1.0 + buffer) / capacities
    return max(1, int(np.max(np.ceil(need - _ROUND_GUARD))))


def _consumption(panel):
    rows = panel.role_index("consumption")
    if rows.size == 0:
        raise ValueError("panel has no consumption indicators")
    return panel.values[rows]


def _history_max(cons, lo, hi):
    return cons[:, lo:hi].max(axis=1)


def _rule_units(cons, t, caps, buffer, fallback):
    if t == 0:
        return fallback
    return units_for(_history_max(cons, 0, t), caps, buffer)


def _autopilot_units(cons, t, caps, buffer, window, fallback):
    refreshed = (t // window) * window
    if refreshed == 0:
        return _rule_units(cons, t, caps, buffer, fallback)
    return units_for(_history_max(cons, max(0, refreshed - window), refreshed), caps, buffer)


def _harmony_units(policy, panel, cu, horizon, cons, caps, fallback):
    model = policy.model
    t_in = model.t_in_
    norm_values = policy.norm.transform(panel.values)
    n_features = model.n_time_features_
    feats = time_features(panel.timestamps)[:n_features]
    units = []
    for t in horizon:
        if policy.retrain_interval and t > horizon[0] and (t - horizon[0]) % policy.retrain_interval == 0:
            model = _retrain(model, panel, norm_values, t)
        if t < t_in:
            units.append(_rule_units(cons, t, caps, policy.buffer, fallback))
            continue
        window = norm_values[None, :, t - t_in:t]
        tf = feats[None, :, t - t_in:t]
        samples = model.sample(window, tf, n_samples=policy.n_samples, random_state=[[policy.seed, int(t)]])[0]
        raw = policy.norm.inverse_transform(samples)
        units.append(policy.decision.run(raw, panel.roles, cu).n_optimal)
    return np.array(units, dtype=int)


def _retrain(model, panel, norm_values, t):
    prefix = IndicatorPanel(norm_values[:, :t], panel.names, panel.roles, model.levels_, panel.timestamps[:t])
    windows = make_windows(prefix, model.t_in_)
    fresh = clone(model)
    fresh.levels = list(model.levels_)
    return fresh.fit(windows.inputs, windows.targets, windows.time_features[:, : model.n_time_features_])


def run_policy(panel, policy, cu, horizon=None):
    """Replay ``policy`` over ``horizon`` (default: the whole panel).

    ``panel`` is in raw units. Returns an :class:`AllocationLog`.

    Raises
    ------
    GateError
        For a ``harmony`` policy whose model fails the 90-90 gate on
        ``policy.gate_windows`` (skipped with ``skip_gate``).
    """
    cu.check_panel(panel)
    horizon = np.arange(panel.n_timestamps) if horizon is None else np.asarray(list(horizon), dtype=int)
    if horizon.size and (horizon.min() < 0 or horizon.max() >= panel.n_timestamps):
        raise ValueError("horizon reaches outside the panel")
    cons = _consumption(panel)
    caps = cu.capacities
    fallback = policy.units if policy.units is not None else policy.decision.n_low
    if policy.kind == "no_scale":
        units = np.full(horizon.size, policy.units if policy.units is not None else policy.decision.n_high)
    elif policy.kind == "rule_based":
        units = np.array([_rule_units(cons, t, caps, policy.buffer, fallback) for t in horizon], dtype=int)
    elif policy.kind == "autopilot":
        units = np.array([_autopilot_units(cons, t, caps, policy.buffer, policy.window, fallback) for t in horizon],
                         dtype=int)
    else:
        if policy.model is None or policy.norm is None:
            raise ValueError("a harmony policy needs a fitted model and its NormState")
        if not policy.skip_gate:
            if policy.gate_windows is None:
                raise ValueError("harmony policy needs gate_windows unless skip_gate is set")
            verdict = validate_90_90(policy.model, policy.gate_windows, norm=policy.norm,
                                     thresholds=policy.gate_thresholds)
            if not verdict.passed:
                raise GateError(f"model failed the 90-90 gate (fraction {verdict.fraction:.4f})", verdict.fraction)
        units = _harmony_units(policy, panel, cu, horizon, cons, caps, fallback)
    allocated = units[:, None] * caps[None, :]
    return AllocationLog(policy.label, horizon, units, allocated, cons[:, horizon].T.copy())


@dataclass(frozen=True)
class ReportRow:
    policy: str
    resource: str
    allocated_unit_hours: float
    consumed_unit_hours: float
    utilization: float
    succr: float


@dataclass
class SimReport:
    rows: list
    logs: list
    resource_names: tuple

    def policies(self):
        return list(dict.fromkeys(r.policy for r in self.rows))

    def row(self, policy, resource):
        for r in self.rows:
            if r.policy == policy and r.resource == resource:
                return r
        raise KeyError((policy, resource))

    def to_csv(self, path=None):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["policy", "resource", "allocated_unit_hours", "consumed_unit_hours", "utilization", "succr"])
        for r in self.rows:
            writer.writerow([r.policy, r.resource, repr(r.allocated_unit_hours), repr(r.consumed_unit_hours),
                             repr(r.utilization), repr(r.succr)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def table(self):
        head = f"{'policy':<12}{'resource':<10}{'alloc_h':>12}{'used_h':>12}{'util':>9}{'SuccR':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.policy:<12}{r.resource:<10}{r.allocated_unit_hours:>12.1f}{r.consumed_unit_hours:>12.1f}"
                         f"{r.utilization:>9.2%}{r.succr:>9.2%}")
        return "\n".join(lines)

    def allocation_csv(self):
        buf = io.StringIO()
        for i, log in enumerate(self.logs):
            part = io.StringIO()
            log.to_csv(part, self.resource_names)
            text = part.getvalue()
            buf.write(text if i == 0 else text.split("\n", 1)[1])
        return buf.getvalue()


def report(logs, panel, interval_hours=INTERVAL_HOURS):
    """Usage hours, utilization and SuccR per policy and consumption resource."""
    if not logs:
        raise ValueError("no allocation logs")
    first = logs[0].intervals
    for log in logs[1:]:
        if not np.array_equal(log.intervals, first):
            raise ValueError("allocation logs cover different horizons")
    names = tuple(panel.names[i] for i in panel.role_index("consumption"))
    rows = []
    for log in logs:
        util = utilization(log.allocated, log.consumed)
        succ = success_rate(log.allocated, log.consumed)
        for c, name in enumerate(names):
            rows.append(ReportRow(
                log.policy, name,
                float(log.allocated[:, c].sum() * interval_hours),
                float(log.consumed[:, c].sum() * interval_hours),
                float(util[c]), succ,
            ))
    return SimReport(rows, list(logs), names)


@dataclass
class PipelineResult:
    panel: IndicatorPanel
    norm: object
    windows: object
    model: object
    gate: object
    report: SimReport
    horizon: np.ndarray


def run_pipeline(panel, cu, forecaster, policies=("no_scale", "rule_based", "autopilot", "harmony"),
                 decision=None, t_in=72, n_samples=100, seed=0, buffer=0.10, window=144,
                 no_scale_units=None, skip_gate=False, horizon=None, retrain_interval=None,
                 gate_thresholds=(0.9, 0.9)):
    """Split, normalize, train, gate and replay policies over the post-training horizon.

    ``forecaster`` is an unfitted :class:`~harmony.forecaster.HarmonyForecaster`;
    its ``levels`` are taken from the panel. The default horizon is every
    interval after the training segment.
    """
    if panel.n_timestamps < 10:
        raise SizeError("panel too short for the chronological split")
    decision = decision or DecisionConfig()
    splits = chronological_split(panel)
    normed, norm = minmax_fit_transform(panel, splits.train)
    model, gate, windows = None, None, None
    if "harmony" in policies:
        windows = make_windows(normed, t_in, splits)
        model = clone(forecaster).set_params(levels=[int(v) for v in panel.levels])
        model.fit_windows(windows)
        gate = validate_90_90(model, windows.subset("validation"), norm=norm, thresholds=gate_thresholds)
    if horizon is None:
        horizon = np.arange(splits.train[1], panel.n_timestamps)
    logs = []
    for kind in policies:
        policy = ScalingPolicy(kind, buffer=buffer, window=window, units=no_scale_units, model=model, norm=norm,
                               decision=decision, n_samples=n_samples, seed=seed, retrain_interval=retrain_interval,
                               gate_windows=windows.subset("validation") if windows is not None else None,
                               skip_gate=skip_gate, gate_thresholds=gate_thresholds)
        logs.append(run_policy(panel, policy, cu, horizon))
    return PipelineResult(panel, norm, windows, model, gate, report(logs, panel), np.asarray(horizon))
