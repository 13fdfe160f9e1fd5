"""Estimator front-end for the hierarchical flow forecaster."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .encoder import GaussianForecast, encoder_forward
from .exceptions import DimensionError, ModelError
from .flows import flow_rows_forward
from .training import (
    TrainConfig,
    fit_arrays,
    load_checkpoint,
    point_forecast,
    save_checkpoint,
)

_CONFIG_FIELDS = tuple(TrainConfig.__dataclass_fields__)


def check_windows(X, time_features=None, n_indicators=None, t_in=None):
    """Validate and coerce window arrays to ``(B, N, T_in)`` and ``(B, F, T_in)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionError(f"windows must be (n_windows, N, T_in), got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain non-finite values")
    if time_features is None:
        tf = np.zeros((X.shape[0], 0, X.shape[2]))
    else:
        tf = np.asarray(time_features, dtype=float)
        if tf.ndim == 2:
            tf = tf[None]
        if tf.shape[0] != X.shape[0] or tf.shape[2] != X.shape[2]:
            raise DimensionError(f"time features {tf.shape} do not match windows {X.shape}")
    if n_indicators is not None and X.shape[1] != n_indicators:
        raise DimensionError(f"model was fitted on {n_indicators} indicators, got {X.shape[1]}")
    if t_in is not None and X.shape[2] != t_in:
        raise DimensionError(f"model was fitted on T_in={t_in}, got {X.shape[2]}")
    return X, tf


class HarmonyForecaster(RegressorMixin, BaseEstimator):
    """One-step-ahead probabilistic forecaster over a panel of indicators.

    ``fit`` takes windows ``X`` of shape ``(n_windows, N, T_in)`` with targets
    ``y`` of shape ``(n_windows, N)``; calendar features travel alongside as
    ``time_features`` of shape ``(n_windows, F, T_in)``. ``levels`` gives the
    hierarchy level of each of the ``N`` indicators (all 1 when omitted).

    ``predict`` returns the mean of ``n_predict_samples`` predictive samples,
    ``sample`` the samples themselves and ``predict_gaussian`` the encoder's
    latent Gaussian.
    """

    def __init__(
        self,
        levels=None,
        d_model=32,
        d_ff=None,
        n_blocks=2,
        n_flows=2,
        n_heads=1,
        flow_hidden=None,
        learning_rate=0.001,
        batch_size=128,
        epochs=20,
        optimizer="adam",
        loss="mse",
        quantile=0.5,
        n_samples=1,
        variance_bias=-7.0,
        n_predict_samples=100,
        random_state=0,
    ):
        self.levels = levels
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_blocks = n_blocks
        self.n_flows = n_flows
        self.n_heads = n_heads
        self.flow_hidden = flow_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.optimizer = optimizer
        self.loss = loss
        self.quantile = quantile
        self.n_samples = n_samples
        self.variance_bias = variance_bias
        self.n_predict_samples = n_predict_samples
        self.random_state = random_state

    def train_config(self):
        values = {name: getattr(self, name) for name in _CONFIG_FIELDS if hasattr(self, name)}
        values["seed"] = int(self.random_state or 0)
        return TrainConfig(**values)

    def _levels(self, n):
        levels = np.ones(n, dtype=int) if self.levels is None else np.asarray(self.levels, dtype=int)
        if levels.shape != (n,):
            raise DimensionError(f"{levels.size} levels for {n} indicators")
        return levels

    def fit(self, X, y, time_features=None, validation=None):
        """Train on windows; ``validation`` is an optional ``(X, y, time_features)`` triple."""
        X, tf = check_windows(X, time_features)
        y = np.asarray(y, dtype=float)
        if y.shape != X.shape[:2]:
            raise DimensionError(f"targets {y.shape} do not match windows {X.shape}")
        levels = self._levels(X.shape[1])
        val = None
        if validation is not None:
            xv, yv, *rest = validation
            xv, fv = check_windows(xv, rest[0] if rest else None, X.shape[1], X.shape[2])
            val = (xv, np.asarray(yv, dtype=float), fv)
        self.params_, self.training_log_ = fit_arrays(X, y, tf, levels, self.train_config(), validation=val)
        self.levels_ = levels
        self.n_indicators_ = X.shape[1]
        self.n_time_features_ = tf.shape[1]
        self.t_in_ = X.shape[2]
        return self

    def fit_windows(self, windows):
        """Fit on the ``train`` windows of a :class:`WindowSet`, selecting on ``validation``."""
        tr, va = windows.subset("train"), windows.subset("validation")
        validation = (va.inputs, va.targets, va.time_features) if len(va) else None
        return self.fit(tr.inputs, tr.targets, tr.time_features, validation=validation)

    def _checked(self, X, time_features):
        try:
            check_is_fitted(self, "params_")
        except NotFittedError as exc:
            raise ModelError("forecaster is not fitted") from exc
        for name, value in self.params_.items():
            if not np.all(np.isfinite(value)):
                raise ModelError(f"parameter {name} is not finite")
        X, tf = check_windows(X, time_features, self.n_indicators_, self.t_in_)
        if tf.shape[1] != self.n_time_features_:
            raise DimensionError(f"model expects {self.n_time_features_} time features, got {tf.shape[1]}")
        return X, tf

    def predict_gaussian(self, X, time_features=None):
        X, tf = self._checked(X, time_features)
        g, _ = encoder_forward(X, tf, self.levels_, self.params_, self.n_heads)
        return g

    def sample(self, X, time_features=None, n_samples=None, random_state=None):
        """Predictive samples of shape ``(n_windows, N, S)``.

        ``random_state`` may be a single seed or one seed per window; in the
        latter case each window's draw is independent of the others.
        """
        X, tf = self._checked(X, time_features)
        s = int(n_samples or self.n_predict_samples)
        g = self.predict_gaussian(X, tf)
        seeds = self.random_state if random_state is None else random_state
        if np.ndim(seeds) == 0:
            rng = np.random.default_rng(seeds)
            eps = rng.standard_normal((len(X), s, self.n_indicators_))
        else:
            if len(seeds) != len(X):
                raise ValueError("need one seed per window")
            eps = np.stack([np.random.default_rng(sd).standard_normal((s, self.n_indicators_)) for sd in seeds])
        z0 = g.mean[:, None, :] + np.sqrt(g.variance)[:, None, :] * eps
        z, _ = flow_rows_forward(z0, self.params_, strict=True)
        return np.transpose(z, (0, 2, 1))

    def predict(self, X, time_features=None):
        return self.sample(X, time_features).mean(axis=-1)

    def predict_point(self, X, time_features=None):
        """Flow image of the latent mean (no sampling)."""
        X, tf = self._checked(X, time_features)
        return point_forecast(self.params_, X, tf, self.levels_, self.n_heads)

    def save(self, path, extra=None):
        check_is_fitted(self, "params_")
        meta = {
            "estimator": self.get_params(),
            "levels": [int(v) for v in self.levels_],
            "n_indicators": self.n_indicators_,
            "n_time_features": self.n_time_features_,
            "t_in": self.t_in_,
        }
        if extra:
            meta.update(extra)
        meta["estimator"]["levels"] = meta["levels"]
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def load(cls, path):
        """Rebuild a fitted forecaster from a checkpoint; returns ``(model, meta)``."""
        params, meta = load_checkpoint(path)
        model = cls(**meta["estimator"])
        model.params_ = params
        model.levels_ = np.asarray(meta["levels"], dtype=int)
        model.n_indicators_ = meta["n_indicators"]
        model.n_time_features_ = meta["n_time_features"]
        model.t_in_ = meta["t_in"]
        return model, meta


__all__ = ["GaussianForecast", "HarmonyForecaster", "check_windows"]
