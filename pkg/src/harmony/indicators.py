"""Indicator panels, trace ingestion and preprocessing.

A panel holds one service's indicators as an ``N x T`` matrix together with
the role (request / consumption / quality) and hierarchy level of every row.
Everything in here is a pure transformation: inputs are never mutated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import OrderingError, SchemaError, SizeError

ROLES = ("request", "consumption", "quality")
DEFAULT_LEVELS = {"request": 1, "consumption": 2, "quality": 3}
SPLIT_NAMES = ("train", "test", "validation")
TIME_FEATURES = ("minute", "hour", "weekday", "monthday")


@dataclass(frozen=True)
class IndicatorPanel:
    """Historical indicators of one service.

    Attributes
    ----------
    values : ndarray of shape (N, T)
    names : tuple of str, length N
    roles : tuple of str, length N, each one of ``ROLES``
    levels : ndarray of int, length N, each >= 1
    timestamps : ndarray of int64 epoch seconds, length T
    """

    values: np.ndarray
    names: tuple
    roles: tuple
    levels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise SchemaError(f"panel values must be 2-D, got shape {values.shape}")
        n, t = values.shape
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "roles", tuple(self.roles))
        object.__setattr__(self, "levels", np.asarray(self.levels, dtype=int))
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.int64))
        if len(self.names) != n or len(self.roles) != n or self.levels.shape != (n,):
            raise SchemaError("names, roles and levels must all have one entry per indicator")
        for name, role in zip(self.names, self.roles):
            if role not in ROLES:
                raise SchemaError(f"indicator {name!r} has unknown role {role!r}")
        if n and self.levels.min() < 1:
            bad = self.names[int(np.argmin(self.levels))]
            raise SchemaError(f"indicator {bad!r} has level < 1")
        if self.timestamps.shape != (t,):
            raise SchemaError("one timestamp per column is required")
        _check_timestamps(self.timestamps)

    @property
    def n_indicators(self):
        return self.values.shape[0]

    @property
    def n_timestamps(self):
        return self.values.shape[1]

    @property
    def stride(self):
        if self.n_timestamps < 2:
            return None
        return int(self.timestamps[1] - self.timestamps[0])

    @property
    def max_level(self):
        return int(self.levels.max())

    def role_index(self, role):
        """Row indices carrying ``role``, in panel order."""
        return np.array([i for i, r in enumerate(self.roles) if r == role], dtype=int)

    def role_counts(self):
        return {role: len(self.role_index(role)) for role in ROLES}

    def slice_time(self, start, stop):
        return replace(self, values=self.values[:, start:stop], timestamps=self.timestamps[start:stop])

    def with_values(self, values):
        return replace(self, values=values)


@dataclass(frozen=True)
class CUConfig:
    """Per-unit resource capacities, ordered like the consumption indicators."""

    capacities: np.ndarray

    def __post_init__(self):
        caps = np.atleast_1d(np.asarray(self.capacities, dtype=float))
        if caps.ndim != 1 or caps.size == 0:
            raise SchemaError("CU capacities must be a non-empty vector")
        if not np.all(caps > 0) or not np.all(np.isfinite(caps)):
            raise SchemaError("CU capacities must be finite and strictly positive")
        object.__setattr__(self, "capacities", caps)

    def check_panel(self, panel):
        c = len(panel.role_index("consumption"))
        if c != self.capacities.size:
            raise SchemaError(
                f"CU config has {self.capacities.size} capacities but panel has {c} consumption indicators"
            )


@dataclass(frozen=True)
class NormState:
    """Per-indicator MinMax statistics."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "minimum", np.asarray(self.minimum, dtype=float))
        object.__setattr__(self, "maximum", np.asarray(self.maximum, dtype=float))
        if np.any(self.maximum < self.minimum):
            raise ValueError("max must be >= min for every indicator")

    @property
    def span(self):
        return self.maximum - self.minimum

    def _select(self, rows):
        if rows is None:
            return self.minimum, self.span
        return self.minimum[rows], self.span[rows]

    def transform(self, values, rows=None):
        """Normalize ``values`` whose first axis indexes indicators.

        ``rows`` restricts the statistics to a subset of indicators. Constant
        indicators map to 0.
        """
        lo, span = self._select(rows)
        values = np.asarray(values, dtype=float)
        shape = (-1,) + (1,) * (values.ndim - 1)
        safe = np.where(span > 0, span, 1.0).reshape(shape)
        out = (values - lo.reshape(shape)) / safe
        return np.where((span > 0).reshape(shape), out, 0.0)

    def inverse_transform(self, values, rows=None):
        lo, span = self._select(rows)
        values = np.asarray(values, dtype=float)
        shape = (-1,) + (1,) * (values.ndim - 1)
        return values * span.reshape(shape) + lo.reshape(shape)

    def inverse_variance(self, variance, rows=None):
        _, span = self._select(rows)
        variance = np.asarray(variance, dtype=float)
        shape = (-1,) + (1,) * (variance.ndim - 1)
        return variance * span.reshape(shape) ** 2


class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """MinMax scaling on ``(n_samples, n_indicators)`` arrays.

    Thin estimator wrapper around :class:`NormState` so the preprocessing
    step composes with sklearn pipelines. Constant columns map to 0.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.state_ = NormState(X.min(axis=0), X.max(axis=0))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        return self.state_.transform(X.T).T

    def inverse_transform(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=float)
        return self.state_.inverse_transform(X.T).T


@dataclass(frozen=True)
class SplitBoundaries:
    """Half-open index ranges of the chronological train / test / validation split."""

    train: tuple
    test: tuple
    validation: tuple

    def segments(self):
        return {"train": self.train, "test": self.test, "validation": self.validation}

    def segment_of(self, index):
        for name, (lo, hi) in self.segments().items():
            if lo <= index < hi:
                return name
        raise IndexError(f"index {index} outside the split range")


@dataclass(frozen=True)
class WindowSet:
    """Sliding input windows and their one-step-ahead targets.

    ``inputs[w]`` covers panel columns ``[target_index[w] - T_in, target_index[w])``
    and ``targets[w]`` is panel column ``target_index[w]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    time_features: np.ndarray
    target_index: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.split is None:
            object.__setattr__(self, "split", np.full(len(self.target_index), "train", dtype=object))

    def __len__(self):
        return len(self.target_index)

    def subset(self, name):
        keep = self.split == name
        return WindowSet(
            self.inputs[keep],
            self.targets[keep],
            self.time_features[keep],
            self.target_index[keep],
            self.split[keep],
        )


def _check_timestamps(ts):
    if ts.size < 2:
        return
    steps = np.diff(ts)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 1
        raise OrderingError(f"timestamps must be strictly increasing (row {bad})")
    if np.any(steps != steps[0]):
        bad = int(np.argmax(steps != steps[0])) + 1
        raise OrderingError(f"timestamps must have a constant stride (row {bad})")


def parse_timestamp(text):
    """Parse integer epoch seconds or an ISO-8601 instant (naive means UTC)."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        moment = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise SchemaError(f"unparseable timestamp {text!r}") from exc
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp())


def read_kv(path):
    """Read a flat ``key = value`` text file; ``#`` starts a comment."""
    entries = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


@dataclass(frozen=True)
class TraceSchema:
    """Column roles, levels and optional CU capacities of a trace."""

    roles: dict
    levels: dict
    capacities: dict

    @classmethod
    def from_mapping(cls, entries):
        roles, levels, capacities = {}, {}, {}
        for key, value in entries.items():
            name, _, attr = key.rpartition(".")
            if not name:
                raise SchemaError(f"schema key {key!r} must look like '<column>.<attribute>'")
            if attr == "role":
                if value not in ROLES:
                    raise SchemaError(f"column {name!r}: role must be one of {ROLES}, got {value!r}")
                roles[name] = value
            elif attr == "level":
                try:
                    level = int(value)
                except ValueError as exc:
                    raise SchemaError(f"column {name!r}: level must be an integer") from exc
                if level < 1:
                    raise SchemaError(f"column {name!r}: levels start at 1, got {level}")
                levels[name] = level
            elif attr == "cu_capacity":
                capacities[name] = float(value)
            else:
                raise SchemaError(f"unknown schema attribute {attr!r} for column {name!r}")
        for name in set(levels) | set(capacities):
            if name not in roles:
                raise SchemaError(f"column {name!r} has no role")
        for name, role in roles.items():
            levels.setdefault(name, DEFAULT_LEVELS[role])
        return cls(roles, levels, capacities)

    @classmethod
    def read(cls, path):
        return cls.from_mapping(read_kv(path))

    def to_lines(self, names):
        lines = []
        for name in names:
            lines.append(f"{name}.role = {self.roles[name]}")
            lines.append(f"{name}.level = {self.levels[name]}")
            if name in self.capacities:
                lines.append(f"{name}.cu_capacity = {self.capacities[name]!r}")
        return lines

    def cu_config(self, panel):
        names = [panel.names[i] for i in panel.role_index("consumption")]
        missing = [n for n in names if n not in self.capacities]
        if missing:
            raise SchemaError(f"consumption column {missing[0]!r} has no cu_capacity")
        return CUConfig([self.capacities[n] for n in names])


def load_trace(path, schema):
    """Read a trace CSV into a raw (unnormalized) panel.

    Parameters
    ----------
    path : path-like
        CSV with header ``timestamp,<name1>,<name2>,...``.
    schema : TraceSchema, mapping or path-like
        Role and level of every value column.

    Raises
    ------
    SchemaError
        On a missing column, a column without a role, a missing or
        non-numeric value, or an unparseable timestamp.
    OrderingError
        If timestamps are not strictly increasing with constant stride.
    """
    if not isinstance(schema, TraceSchema):
        schema = TraceSchema.read(schema) if isinstance(schema, (str, Path)) else TraceSchema.from_mapping(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as exc:
            raise SchemaError(f"{path}: empty trace file") from exc
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not header or header[0] != "timestamp":
        raise SchemaError("first column must be 'timestamp'")
    names = header[1:]
    for name in schema.roles:
        if name not in names:
            raise SchemaError(f"schema column {name!r} missing from trace")
    for name in names:
        if name not in schema.roles:
            raise SchemaError(f"trace column {name!r} has no role in the schema")
    timestamps = []
    values = np.empty((len(names), len(rows)))
    for j, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"row {j + 2}: expected {len(header)} fields, got {len(row)}")
        timestamps.append(parse_timestamp(row[0]))
        for i, cell in enumerate(row[1:]):
            try:
                values[i, j] = float(cell)
            except ValueError as exc:
                raise SchemaError(f"row {j + 2}, column {names[i]!r}: non-numeric value {cell!r}") from exc
            if not math.isfinite(values[i, j]):
                raise SchemaError(f"row {j + 2}, column {names[i]!r}: missing or non-finite value")
    return IndicatorPanel(
        values=values,
        names=names,
        roles=[schema.roles[n] for n in names],
        levels=[schema.levels[n] for n in names],
        timestamps=np.array(timestamps, dtype=np.int64),
    )


def write_trace(panel, path):
    """Write ``panel`` in the trace CSV format (epoch-second timestamps)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *panel.names])
        for j, ts in enumerate(panel.timestamps):
            writer.writerow([int(ts), *(repr(float(v)) for v in panel.values[:, j])])


def aggregate(panel, bucket):
    """Max-aggregate ``panel`` into buckets of ``bucket`` seconds.

    Buckets are aligned to the first timestamp and each output column is
    stamped with its bucket start. A partial trailing bucket is dropped.
    """
    stride = panel.stride
    if stride is None:
        raise SizeError("aggregation needs at least two timestamps")
    if bucket < stride or bucket % stride:
        raise ValueError(f"bucket {bucket}s must be a positive multiple of the stride {stride}s")
    k = bucket // stride
    n_out = panel.n_timestamps // k
    if n_out == 0:
        raise SizeError("panel shorter than one bucket")
    kept = panel.values[:, : n_out * k].reshape(panel.n_indicators, n_out, k)
    return replace(panel, values=kept.max(axis=2), timestamps=panel.timestamps[: n_out * k : k])


def chronological_split(n_timestamps):
    """Contiguous 7:1:2 train / test / validation boundaries over ``T`` columns."""
    t = int(getattr(n_timestamps, "n_timestamps", n_timestamps))
    if t < 10:
        raise SizeError(f"need at least 10 timestamps to split, got {t}")
    n_train = 7 * t // 10
    n_test = t // 10
    return SplitBoundaries((0, n_train), (n_train, n_train + n_test), (n_train + n_test, t))


def minmax_fit_transform(panel, fit_range=None):
    """Fit MinMax statistics on ``fit_range`` columns and normalize the whole panel.

    ``fit_range`` defaults to the training segment of the chronological split
    when the panel is long enough, otherwise to the full panel.
    """
    if panel.n_timestamps == 0:
        raise SizeError("cannot normalize an empty panel")
    if fit_range is None:
        fit_range = chronological_split(panel).train if panel.n_timestamps >= 10 else (0, panel.n_timestamps)
    lo, hi = fit_range
    fitted = panel.values[:, lo:hi]
    state = NormState(fitted.min(axis=1), fitted.max(axis=1))
    return panel.with_values(state.transform(panel.values)), state


def time_features(timestamps, features=TIME_FEATURES):
    """Calendar features of UTC epoch-second ``timestamps``, one row per feature.

    Rows are minute-of-hour/60, hour-of-day/24, day-of-week/7 (Monday = 0)
    and (day-of-month - 1)/31, each in ``[0, 1)``.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    days = ts // 86400
    seconds = ts % 86400
    rows = {}
    if "minute" in features:
        rows["minute"] = (seconds // 60 % 60) / 60.0
    if "hour" in features:
        rows["hour"] = (seconds // 3600) / 24.0
    if "weekday" in features:
        # 1970-01-01 was a Thursday (weekday 3).
        rows["weekday"] = ((days + 3) % 7) / 7.0
    if "monthday" in features:
        dom = np.array([datetime.fromtimestamp(int(t), timezone.utc).day for t in ts])
        rows["monthday"] = (dom - 1) / 31.0
    unknown = set(features) - set(TIME_FEATURES)
    if unknown:
        raise ValueError(f"unknown time features {sorted(unknown)}")
    if not features:
        return np.zeros((0, ts.size))
    return np.stack([rows[f] for f in features]).astype(float)


def make_windows(panel, t_in, splits=None, features=TIME_FEATURES):
    """Stride-1 sliding windows of length ``t_in`` with one-step-ahead targets.

    Each window is tagged with the split segment containing its target index,
    so windows whose inputs straddle a boundary belong to the later segment.
    Without ``splits`` every window is tagged ``"train"``.
    """
    t_in = int(t_in)
    if t_in < 1:
        raise ValueError("t_in must be positive")
    segments = splits.segments() if splits is not None else {"train": (0, panel.n_timestamps)}
    for name, (lo, hi) in segments.items():
        if t_in >= hi - lo:
            raise SizeError(f"t_in={t_in} must be shorter than the {name} segment ({hi - lo} steps)")
    targets = np.arange(t_in, panel.n_timestamps)
    starts = targets - t_in
    idx = starts[:, None] + np.arange(t_in)[None, :]
    inputs = np.transpose(panel.values[:, idx], (1, 0, 2))
    tf_all = time_features(panel.timestamps, features)
    tf = np.transpose(tf_all[:, idx], (1, 0, 2))
    if splits is None:
        tags = np.full(targets.size, "train", dtype=object)
    else:
        tags = np.array([splits.segment_of(int(t)) for t in targets], dtype=object)
    return WindowSet(inputs, panel.values[:, targets].T.copy(), tf, targets, tags)
