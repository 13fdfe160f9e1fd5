"""Loss, reverse-mode gradients and the training loop for encoder plus flows."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import encoder_backward, encoder_forward, init_encoder_params
from .exceptions import DimensionError, ModelError, NumericError, TrainingError
from .flows import flow_rows_backward, flow_rows_forward, init_flow_params

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HARMONY-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Hyperparameters of the forecaster and its training loop.

    ``d_model`` defaults to a desk-scale 32; 512 reproduces the large setting.
    ``loss`` is ``"mse"`` or ``"pinball"`` (at ``quantile``). ``n_samples``
    latent draws per window are averaged into the step loss.
    """

    learning_rate: float = 0.001
    batch_size: int = 128
    d_model: int = 32
    d_ff: int | None = None
    epochs: int = 20
    n_blocks: int = 2
    n_flows: int = 2
    n_heads: int = 1
    flow_hidden: int | None = None
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mse"
    quantile: float = 0.5
    n_samples: int = 1
    variance_bias: float = -7.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.n_blocks < 1 or self.n_flows < 1 or self.d_model < 1:
            raise ValueError("n_blocks, n_flows and d_model must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("mse", "pinball"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")


def init_params(n_indicators, n_time_features, t_in, config):
    """Fresh encoder and flow parameters, seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    d_ff = config.d_ff or config.d_model
    params = init_encoder_params(t_in, config.d_model, d_ff, config.n_blocks, rng, config.variance_bias)
    params.update(init_flow_params(n_indicators, config.n_flows, rng, config.flow_hidden))
    return params


def mse_loss(prediction, truth):
    """Mean squared error over the last axis, averaged over any leading axes."""
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise DimensionError(f"prediction {prediction.shape} and truth {truth.shape} differ")
    return float(np.mean((truth - prediction) ** 2))


def pinball_loss(prediction, truth, quantile):
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise DimensionError(f"prediction {prediction.shape} and truth {truth.shape} differ")
    u = truth - prediction
    return float(np.mean(np.maximum(quantile * u, (quantile - 1.0) * u)))


def loss_gradient(prediction, truth, config):
    """Loss value and its gradient with respect to ``prediction``."""
    size = prediction.size
    if config.loss == "mse":
        return mse_loss(prediction, truth), 2.0 * (prediction - truth) / size
    u = truth - prediction
    grad = -np.where(u > 0, config.quantile, config.quantile - 1.0) / size
    return pinball_loss(prediction, truth, config.quantile), grad


def model_forward(params, x, tf, levels, eps, n_heads=1, strict=False):
    """Full forward pass with a fixed standard-normal draw ``eps``.

    ``x`` is ``(B, N, T_in)``, ``tf`` ``(B, F, T_in)`` and ``eps`` ``(B, N)``.
    The latent sample is ``mean + sqrt(variance) * eps``. Returns the flow
    output ``(B, N)`` and a cache for :func:`backward`.
    """
    g, enc_cache = encoder_forward(x, tf, levels, params, n_heads)
    sd = np.sqrt(g.variance)
    z0 = g.mean + sd * eps
    z, flow_caches = flow_rows_forward(z0, params, strict)
    return z, {"enc": enc_cache, "flows": flow_caches, "eps": eps, "sd": sd}


def backward(params, cache, dz):
    """Gradients of a scalar loss for every parameter given ``dL/dz``.

    Raises :class:`NumericError` naming the first non-finite gradient.
    """
    dz0, grads = flow_rows_backward(dz, cache["flows"], params)
    dmean = dz0
    dvar = dz0 * cache["eps"] / (2.0 * cache["sd"])
    grads.update(encoder_backward(dmean, dvar, cache["enc"], params))
    for name in params:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
        elif not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}")
    return {name: grads[name] for name in params}


def loss_and_grad(params, x, tf, y, levels, eps, config):
    z, cache = model_forward(params, x, tf, levels, eps, config.n_heads)
    loss, dz = loss_gradient(z, y, config)
    return loss, backward(params, cache, dz), z


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, params, grads):
        for name in params:
            params[name] -= self.learning_rate * grads[name]


class Adam:
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in params:
            g = grads[name]
            m = self.m.get(name, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)


def point_forecast(params, x, tf, levels, n_heads=1, batch=512):
    """Flow image of the Gaussian mean; the deterministic validation forecast."""
    out = []
    for lo in range(0, len(x), batch):
        g, _ = encoder_forward(x[lo:lo + batch], tf[lo:lo + batch], levels, params, n_heads)
        z, _ = flow_rows_forward(g.mean, params)
        out.append(z)
    return np.concatenate(out) if out else np.zeros((0, len(levels)))


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int | None = None

    def append(self, epoch, train_mse, val_mse):
        self.epochs.append(epoch)
        self.train_mse.append(train_mse)
        self.val_mse.append(val_mse)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_mse", "val_mse"])
            for row in zip(self.epochs, self.train_mse, self.val_mse):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def fit_arrays(x, y, tf, levels, config, validation=None, params=None):
    """Mini-batch training on window arrays.

    ``validation`` is an optional ``(x, y, tf)`` triple; when given, the
    returned parameters are those of the epoch with the lowest validation
    MSE of the deterministic forecast.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    tf = np.zeros((len(x), 0, x.shape[2])) if tf is None else np.asarray(tf, dtype=float)
    if len(x) == 0:
        raise ValueError("no training windows")
    if x.shape[:2] != y.shape or tf.shape[0] != len(x):
        raise DimensionError(f"inconsistent window shapes {x.shape}, {y.shape}, {tf.shape}")
    n = x.shape[1]
    if params is None:
        params = init_params(n, tf.shape[1], x.shape[2], config)
    else:
        params = {k: v.copy() for k, v in params.items()}
    rng = np.random.default_rng(config.seed + 1)
    optimizer = make_optimizer(config)
    log = TrainingLog()
    best, best_score = None, np.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        sq_err, count = 0.0, 0
        for lo in range(0, len(x), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb, yb, fb = x[idx], y[idx], tf[idx]
            if config.n_samples > 1:
                xb = np.repeat(xb, config.n_samples, axis=0)
                yb = np.repeat(yb, config.n_samples, axis=0)
                fb = np.repeat(fb, config.n_samples, axis=0)
            eps = rng.standard_normal(yb.shape)
            z, cache = model_forward(params, xb, fb, levels, eps, config.n_heads)
            loss, dz = loss_gradient(z, yb, config)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch)
            try:
                grads = backward(params, cache, dz)
            except NumericError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}", epoch) from exc
            optimizer.step(params, grads)
            sq_err += float(np.sum((z - yb) ** 2))
            count += yb.size
        train_mse = sq_err / count
        if validation is not None:
            xv, yv, fv = validation
            pred = point_forecast(params, xv, fv, levels, config.n_heads)
            val_mse = score = mse_loss(pred, yv)
        else:
            val_mse = float("nan")
            score = -epoch
        if not np.isfinite(score):
            raise TrainingError(f"validation loss diverged at epoch {epoch}", epoch)
        log.append(epoch, train_mse, val_mse)
        logger.info("epoch %d train_mse=%.6g val_mse=%.6g", epoch, train_mse, val_mse)
        if score < best_score:
            best_score = score
            best = {k: v.copy() for k, v in params.items()}
            log.best_epoch = epoch
    return best, log


def train(windows, levels, config):
    """Train on the ``train`` windows, selecting by ``validation`` windows.

    Returns the selected parameters and the per-epoch :class:`TrainingLog`.
    """
    tr = windows.subset("train")
    va = windows.subset("validation")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    return fit_arrays(
        tr.inputs, tr.targets, tr.time_features, levels, config,
        validation=(va.inputs, va.targets, va.time_features),
    )


def default_accuracy(prediction, truth, floor=1e-6):
    """Per-window accuracy ``1 - |pred - truth| / max(truth, floor)`` averaged over indicators."""
    prediction = np.atleast_2d(prediction)
    truth = np.atleast_2d(truth)
    rel = np.abs(prediction - truth) / np.maximum(truth, floor)
    return 1.0 - rel.mean(axis=-1)


@dataclass(frozen=True)
class GateResult:
    passed: bool
    fraction: float
    n_windows: int


def gate_from_accuracies(accuracies, accuracy_threshold=0.9, fraction_threshold=0.9):
    """Pass iff at least ``fraction_threshold`` of windows exceed ``accuracy_threshold``."""
    acc = np.asarray(accuracies, dtype=float)
    if acc.size == 0:
        raise ValueError("the 90-90 gate needs at least one validation window")
    fraction = float(np.count_nonzero(acc > accuracy_threshold)) / acc.size
    return GateResult(fraction >= fraction_threshold, fraction, int(acc.size))


def validate_90_90(model, windows, accuracy_fn=None, *, norm=None, thresholds=(0.9, 0.9)):
    """Run the 90-90 deployment gate on ``windows``.

    ``model`` needs ``predict(X, time_features=...)``. With ``norm`` the
    predictions and truths are mapped back to raw units before scoring.
    """
    if len(windows) == 0:
        raise ValueError("the 90-90 gate needs at least one validation window")
    accuracy_fn = accuracy_fn or default_accuracy
    pred = model.predict(windows.inputs, time_features=windows.time_features)
    truth = windows.targets
    if norm is not None:
        pred = norm.inverse_transform(pred.T).T
        truth = norm.inverse_transform(truth.T).T
    return gate_from_accuracies(accuracy_fn(pred, truth), *thresholds)


def save_checkpoint(path, params, meta=None):
    """Write a versioned checkpoint: header, JSON metadata, then tensor records.

    Each record is a ``name ndim dims...`` text line followed by the
    row-major little-endian float64 payload.
    """
    meta = meta or {}
    body = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(b"meta %d\n" % len(body))
        fh.write(body + b"\n")
        fh.write(b"records %d\n" % len(params))
        for name, value in params.items():
            arr = np.ascontiguousarray(value, dtype="<f8")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`; returns ``(params, meta)``."""
    data = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = data.index(b"\n", pos)
        text = data[pos:end].decode()
        pos = end + 1
        return text

    head = line().split()
    if len(head) != 2 or head[0].encode() != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint file")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {head[1]}")
    tag, size = line().split()
    meta = json.loads(data[pos:pos + int(size)])
    pos += int(size) + 1
    tag, count = line().split()
    params = {}
    for _ in range(int(count)):
        fields = line().split()
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(d) for d in fields[2:2 + ndim])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).astype(float)
        pos += nbytes
    return params, meta


def config_to_meta(config):
    return asdict(config)
