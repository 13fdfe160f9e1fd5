"""Affine-coupling normalizing flows that reshape the encoder's Gaussian.

Each flow is two coupling layers: the first rescales and shifts the second
half of the vector conditioned on the first half, the second does the
reverse. With an odd ``N`` the first half has ``ceil(N/2)`` entries.

Internally vectors are rows (``(..., N)``); the public ``flow_forward`` /
``flow_inverse`` / ``sample_gaussian`` take and return ``N x S`` matrices,
one column per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import GaussianForecast, encoder_forward
from .exceptions import DimensionError, NumericError

SCALE_LIMIT = 40.0


@dataclass(frozen=True)
class PredictiveSamples:
    """Predictive distribution as an ``N x S`` sample matrix."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] < 1:
            raise DimensionError(f"samples must be N x S with S >= 1, got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self):
        return self.samples.shape[1]

    def mean(self):
        return self.samples.mean(axis=1)


def halves(n):
    """Sizes of the first and second half of an ``n``-vector."""
    if n < 2:
        raise DimensionError("coupling layers need at least two indicators")
    first = (n + 1) // 2
    return first, n - first


def flow_hidden_width(n):
    return max(n, 8)


def flow_param_shapes(n, n_flows, hidden=None):
    hidden = flow_hidden_width(n) if hidden is None else hidden
    first, second = halves(n)
    shapes = {}
    for k in range(n_flows):
        # layer 1 transforms half 2 from half 1; layer 2 the other way round
        for c, (n_in, n_out) in ((1, (first, second)), (2, (second, first))):
            p = f"flow{k}.c{c}."
            for net in ("s", "t"):
                shapes[p + net + "_w1"] = (n_in, hidden)
                shapes[p + net + "_b1"] = (hidden,)
                shapes[p + net + "_w2"] = (hidden, n_out)
                shapes[p + net + "_b2"] = (n_out,)
    return shapes


def init_flow_params(n, n_flows, rng, hidden=None, identity=True):
    """Glorot first layers; zero output layers when ``identity`` so every flow starts as the identity."""
    params = {}
    for name, shape in flow_param_shapes(n, n_flows, hidden).items():
        if len(shape) == 1 or (identity and name.endswith("_w2")):
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def count_flows(params):
    return sum(1 for key in params if key.startswith("flow") and key.endswith(".c1.s_w1"))


def layer_params(params, k, c):
    p = f"flow{k}.c{c}."
    return {key[len(p):]: value for key, value in params.items() if key.startswith(p)}


def _mlp(x, lp, net):
    pre = x @ lp[net + "_w1"] + lp[net + "_b1"]
    act = np.maximum(pre, 0.0)
    return act @ lp[net + "_w2"] + lp[net + "_b2"], (pre, act)


def _mlp_backward(dout, x, mlp_cache, lp, net):
    pre, act = mlp_cache
    flat_act = act.reshape(-1, act.shape[-1])
    flat_dout = dout.reshape(-1, dout.shape[-1])
    grads = {net + "_w2": flat_act.T @ flat_dout, net + "_b2": flat_dout.sum(axis=0)}
    dpre = (dout @ lp[net + "_w2"].T) * (pre > 0)
    flat_dpre = dpre.reshape(-1, dpre.shape[-1])
    grads[net + "_w1"] = x.reshape(-1, x.shape[-1]).T @ flat_dpre
    grads[net + "_b1"] = flat_dpre.sum(axis=0)
    return dpre @ lp[net + "_w1"].T, grads


def _parts(z, which_half):
    first, _ = halves(z.shape[-1])
    if which_half == 2:
        return z[..., :first], z[..., first:]
    if which_half == 1:
        return z[..., first:], z[..., :first]
    raise ValueError("which_half must be 1 or 2")


def _join(cond, moved, which_half):
    return np.concatenate([cond, moved] if which_half == 2 else [moved, cond], axis=-1)


def _scale(raw, strict):
    if strict:
        if np.any(np.abs(raw) > SCALE_LIMIT):
            raise NumericError(f"coupling log-scale exceeds {SCALE_LIMIT}")
        return raw, None
    return np.clip(raw, -SCALE_LIMIT, SCALE_LIMIT), np.abs(raw) <= SCALE_LIMIT


def coupling_forward(z, lp, which_half, strict=False):
    """Affine coupling on the ``which_half`` half of ``z`` (rows are vectors).

    ``lp`` holds the layer's ``s_*`` and ``t_*`` MLP weights. Returns the
    output and a cache holding the log-scale. With ``strict`` a log-scale
    outside ``[-40, 40]`` raises; otherwise it is clamped.
    """
    z = np.asarray(z, dtype=float)
    cond, target = _parts(z, which_half)
    raw, s_cache = _mlp(cond, lp, "s")
    scale, inside = _scale(raw, strict)
    tran, t_cache = _mlp(cond, lp, "t")
    e = np.exp(scale)
    moved = target * e + tran
    cache = {"cond": cond, "target": target, "exp": e, "inside": inside,
             "s": s_cache, "t": t_cache, "scale": scale, "which": which_half}
    return _join(cond, moved, which_half), cache


def coupling_inverse(x, lp, which_half, strict=False):
    x = np.asarray(x, dtype=float)
    cond, moved = _parts(x, which_half)
    scale, _ = _scale(_mlp(cond, lp, "s")[0], strict)
    tran = _mlp(cond, lp, "t")[0]
    return _join(cond, (moved - tran) * np.exp(-scale), which_half)


def coupling_backward(dy, cache, lp):
    which = cache["which"]
    dcond, dmoved = _parts(dy, which)
    dtarget = dmoved * cache["exp"]
    dscale = dmoved * cache["target"] * cache["exp"]
    if cache["inside"] is not None:
        dscale = dscale * cache["inside"]
    dc_s, grads = _mlp_backward(dscale, cache["cond"], cache["s"], lp, "s")
    dc_t, g_t = _mlp_backward(dmoved, cache["cond"], cache["t"], lp, "t")
    grads.update(g_t)
    return _join(dcond + dc_s + dc_t, dtarget, which), grads


def flow_rows_forward(z, params, strict=False):
    """Apply every flow to row vectors ``z`` of shape ``(..., N)``."""
    caches = []
    for k in range(count_flows(params)):
        for c, which in ((1, 2), (2, 1)):
            z, cache = coupling_forward(z, layer_params(params, k, c), which, strict)
            caches.append((k, c, cache))
    return z, caches


def flow_rows_backward(dz, caches, params):
    grads = {}
    for k, c, cache in reversed(caches):
        dz, g = coupling_backward(dz, cache, layer_params(params, k, c))
        grads.update({f"flow{k}.c{c}.{name}": value for name, value in g.items()})
    return dz, grads


def flow_rows_inverse(x, params, strict=False):
    for k in range(count_flows(params) - 1, -1, -1):
        for c, which in ((2, 1), (1, 2)):
            x = coupling_inverse(x, layer_params(params, k, c), which, strict)
    return x


def _check_matrix(z, params):
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise DimensionError(f"expected an N x S matrix, got shape {z.shape}")
    if not count_flows(params):
        return z
    expected = params["flow0.c1.s_w1"].shape[0] + params["flow0.c1.s_w2"].shape[1]
    if z.shape[0] != expected:
        raise DimensionError(f"flow parameters expect N={expected}, got {z.shape[0]}")
    return z


def flow_forward(z0, params, strict=True):
    """Push an ``N x S`` sample matrix through all flows."""
    z0 = _check_matrix(z0, params)
    out, _ = flow_rows_forward(z0.T, params, strict)
    return PredictiveSamples(out.T)


def flow_inverse(x, params, strict=True):
    x = _check_matrix(x, params)
    return flow_rows_inverse(x.T, params, strict).T


def standard_normal_columns(n, n_samples, seed):
    """``N x S`` standard normals; column ``j`` depends only on ``seed`` and ``j``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((int(n_samples), int(n))).T


def sample_gaussian(g, n_samples, seed):
    """Draw ``S`` independent columns from the per-indicator Gaussian ``g``."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    mean = np.asarray(g.mean, dtype=float)
    eps = standard_normal_columns(mean.size, n_samples, seed)
    return mean[:, None] + np.sqrt(np.asarray(g.variance))[:, None] * eps


def predict_distribution(window, tf, levels, params, n_samples, seed, n_heads=1):
    """Encoder, Gaussian sampling and flows for one input window."""
    g, _ = encoder_forward(window, tf, levels, params, n_heads)
    if np.ndim(g.mean) != 1:
        raise DimensionError("predict_distribution takes a single window")
    return flow_forward(sample_gaussian(g, n_samples, seed), params)


__all__ = [
    "GaussianForecast",
    "PredictiveSamples",
    "coupling_forward",
    "coupling_inverse",
    "flow_forward",
    "flow_inverse",
    "predict_distribution",
    "sample_gaussian",
]
