"""Indicator embedding, level-masked hierarchical attention and the Gaussian projector.

All functions work on batched arrays with a leading window axis ``B``:
histories are ``(B, N, T_in)``, calendar features ``(B, F, T_in)`` and hidden
states ``(B, N + F, D)``. Parameters live in a flat ``dict[str, ndarray]``
whose keys are listed by :func:`encoder_param_shapes`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, NumericError

LN_EPS = 1e-5
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianForecast:
    """Per-indicator mean and variance; arrays of shape ``(N,)`` or ``(B, N)``."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean) != np.shape(self.variance):
            raise DimensionError("mean and variance must have the same shape")
        if not np.all(np.asarray(self.variance) > 0):
            raise NumericError("Gaussian variance must be strictly positive")

    def __getitem__(self, item):
        return GaussianForecast(self.mean[item], self.variance[item])


def encoder_param_shapes(t_in, d_model, d_ff, n_blocks, d_proj=None):
    d_proj = d_model if d_proj is None else d_proj
    shapes = {"embed.weight": (t_in, d_model), "embed.bias": (d_model,)}
    for k in range(n_blocks):
        p = f"block{k}."
        shapes.update({
            p + "wq": (d_model, d_model),
            p + "wk": (d_model, d_model),
            p + "wv": (d_model, d_model),
            p + "ln_gain": (d_model,),
            p + "ln_bias": (d_model,),
            p + "ffn_w1": (d_model, d_ff),
            p + "ffn_b1": (d_ff,),
            p + "ffn_w2": (d_ff, d_model),
            p + "ffn_b2": (d_model,),
        })
    shapes.update({
        "proj.w1": (d_model, d_proj),
        "proj.b1": (d_proj,),
        "proj.w2": (d_proj, 2),
        "proj.b2": (2,),
    })
    return shapes


def init_encoder_params(t_in, d_model, d_ff, n_blocks, rng, variance_bias=0.0):
    """Glorot-uniform weights, zero biases, unit LayerNorm gain.

    ``variance_bias`` seeds the projector bias of the variance channel.
    """
    params = {}
    for name, shape in encoder_param_shapes(t_in, d_model, d_ff, n_blocks).items():
        if name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    params["proj.b2"][1] = variance_bias
    return params


def count_blocks(params):
    return sum(1 for key in params if key.startswith("block") and key.endswith(".wq"))


def level_mask(levels, n_time_features, level):
    """Binary row mask of the extended level vector at ``level``.

    Time-feature rows are appended to the indicator levels with level 1.
    """
    levels = np.asarray(levels, dtype=int)
    l_max = int(levels.max())
    if not 1 <= level <= l_max:
        raise ValueError(f"level {level} outside [1, {l_max}]")
    extended = np.concatenate([levels, np.ones(int(n_time_features), dtype=int)])
    return (extended == level).astype(float)


def level_masks(levels, n_time_features):
    """All level masks stacked as an ``(L_max, N + F)`` array."""
    l_max = int(np.max(levels))
    return np.stack([level_mask(levels, n_time_features, l) for l in range(1, l_max + 1)])


def _batched(x):
    x = np.asarray(x, dtype=float)
    return (x[None], True) if x.ndim == 2 else (x, False)


def embed(window, tf, params):
    """Project each row of the stacked ``[window; tf]`` history to ``D`` dims."""
    x, single = _batched(window)
    f, _ = _batched(tf) if tf is not None else (np.zeros(x.shape[:1] + (0, x.shape[2])), False)
    if f.shape[0] == 1 and x.shape[0] > 1:
        f = np.broadcast_to(f, (x.shape[0],) + f.shape[1:])
    w = params["embed.weight"]
    if x.shape[2] != w.shape[0] or f.shape[2] != w.shape[0] or f.shape[0] != x.shape[0]:
        raise DimensionError(
            f"history length mismatch: window {x.shape}, time features {f.shape}, embedding {w.shape}"
        )
    stacked = np.concatenate([x, f], axis=1)
    out = stacked @ w + params["embed.bias"]
    return out[0] if single else out


def _split_heads(x, n_heads):
    b, m, d = x.shape
    return x.reshape(b, m, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, m, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, m, h * dh)


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def block_forward(h, masks, params, prefix, n_heads=1):
    """One hierarchical attention block.

    Level ``l`` attends over ``Q*M_l + H_l`` (and likewise K, V) where
    ``H_l`` is the previous level's masked output and ``H_1 = 0``; the
    level outputs are summed, layer-normalized and passed through the FFN.

    Returns the block output and a cache for :func:`block_backward`. The
    cache's ``"level_outputs"`` holds each ``H_{l+1}``.
    """
    h, single = _batched(h)
    b, m, d = h.shape
    if d % n_heads:
        raise DimensionError(f"d_model={d} not divisible by n_heads={n_heads}")
    if masks.shape[1] != m:
        raise DimensionError(f"masks cover {masks.shape[1]} rows, hidden state has {m}")
    scale = 1.0 / np.sqrt(d // n_heads)
    q = h @ params[prefix + "wq"]
    k = h @ params[prefix + "wk"]
    v = h @ params[prefix + "wv"]
    prev = np.zeros_like(h)
    total = np.zeros_like(h)
    levels = []
    level_outputs = []
    for li, mask in enumerate(masks):
        mcol = mask[:, None]
        qh = _split_heads(q * mcol + prev, n_heads)
        kh = _split_heads(k * mcol + prev, n_heads)
        vh = _split_heads(v * mcol + prev, n_heads)
        scores = (qh @ kh.swapaxes(-1, -2)) * scale
        if not np.all(np.isfinite(scores)):
            raise NumericError(f"non-finite attention scores at level {li + 1}")
        attn = _softmax(scores)
        out = _merge_heads(attn @ vh) * mcol
        levels.append((qh, kh, vh, attn))
        level_outputs.append(out)
        total = total + out
        prev = out
    mu = total.mean(axis=-1, keepdims=True)
    var = total.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    normed = (total - mu) * rstd
    y = normed * params[prefix + "ln_gain"] + params[prefix + "ln_bias"]
    pre = y @ params[prefix + "ffn_w1"] + params[prefix + "ffn_b1"]
    act = np.maximum(pre, 0.0)
    out = act @ params[prefix + "ffn_w2"] + params[prefix + "ffn_b2"]
    cache = {
        "h": h, "masks": masks, "levels": levels, "scale": scale, "n_heads": n_heads,
        "normed": normed, "rstd": rstd, "y": y, "pre": pre, "act": act,
        "level_outputs": level_outputs,
    }
    return (out[0] if single else out), cache


def block_backward(dout, cache, params, prefix):
    """Gradients of a block given the upstream gradient of its output."""
    grads = {}
    h, masks, scale, n_heads = cache["h"], cache["masks"], cache["scale"], cache["n_heads"]
    act, pre, y, normed, rstd = cache["act"], cache["pre"], cache["y"], cache["normed"], cache["rstd"]

    grads[prefix + "ffn_w2"] = np.einsum("bmf,bmd->fd", act, dout)
    grads[prefix + "ffn_b2"] = dout.sum(axis=(0, 1))
    dpre = (dout @ params[prefix + "ffn_w2"].T) * (pre > 0)
    grads[prefix + "ffn_w1"] = np.einsum("bmd,bmf->df", y, dpre)
    grads[prefix + "ffn_b1"] = dpre.sum(axis=(0, 1))
    dy = dpre @ params[prefix + "ffn_w1"].T

    grads[prefix + "ln_gain"] = (dy * normed).sum(axis=(0, 1))
    grads[prefix + "ln_bias"] = dy.sum(axis=(0, 1))
    dnormed = dy * params[prefix + "ln_gain"]
    dtotal = rstd * (
        dnormed
        - dnormed.mean(axis=-1, keepdims=True)
        - normed * (dnormed * normed).mean(axis=-1, keepdims=True)
    )

    dq = np.zeros_like(h)
    dk = np.zeros_like(h)
    dv = np.zeros_like(h)
    dprev_out = np.zeros_like(h)
    for li in range(len(masks) - 1, -1, -1):
        qh, kh, vh, attn = cache["levels"][li]
        mcol = masks[li][:, None]
        dlevel_out = (dtotal + dprev_out) * mcol
        dctx = _split_heads(dlevel_out, n_heads)
        dattn = dctx @ vh.swapaxes(-1, -2)
        dvh = attn.swapaxes(-1, -2) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dqh = dscores @ kh
        dkh = dscores.swapaxes(-1, -2) @ qh
        dql, dkl, dvl = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        dq += dql * mcol
        dk += dkl * mcol
        dv += dvl * mcol
        # Q_l, K_l and V_l all add the previous level's output.
        dprev_out = dql + dkl + dvl

    grads[prefix + "wq"] = np.einsum("bmi,bmj->ij", h, dq)
    grads[prefix + "wk"] = np.einsum("bmi,bmj->ij", h, dk)
    grads[prefix + "wv"] = np.einsum("bmi,bmj->ij", h, dv)
    dh = dq @ params[prefix + "wq"].T + dk @ params[prefix + "wk"].T + dv @ params[prefix + "wv"].T
    return dh, grads


def project(h_rows, params):
    """Map indicator embeddings ``(B, N, D)`` to a :class:`GaussianForecast`.

    Two dense layers with a ReLU between them; the variance channel goes
    through softplus plus a ``1e-6`` floor.
    """
    h_rows, single = _batched(h_rows)
    pre = h_rows @ params["proj.w1"] + params["proj.b1"]
    act = np.maximum(pre, 0.0)
    out = act @ params["proj.w2"] + params["proj.b2"]
    raw = out[..., 1]
    g = GaussianForecast(out[..., 0], np.logaddexp(0.0, raw) + VARIANCE_FLOOR)
    cache = {"h": h_rows, "pre": pre, "act": act, "raw": raw}
    return (g[0] if single else g), cache


def project_backward(dmean, dvar, cache, params):
    grads = {}
    dsoft = dvar * (1.0 / (1.0 + np.exp(-cache["raw"])))
    dout = np.stack([dmean, dsoft], axis=-1)
    grads["proj.w2"] = np.einsum("bnf,bno->fo", cache["act"], dout)
    grads["proj.b2"] = dout.sum(axis=(0, 1))
    dpre = (dout @ params["proj.w2"].T) * (cache["pre"] > 0)
    grads["proj.w1"] = np.einsum("bnd,bnf->df", cache["h"], dpre)
    grads["proj.b1"] = dpre.sum(axis=(0, 1))
    return dpre @ params["proj.w1"].T, grads


def encoder_forward(window, tf, levels, params, n_heads=1):
    """Embedding, every attention block, then the projector on the first N rows.

    Accepts a single window ``(N, T_in)`` or a batch ``(B, N, T_in)``.
    """
    x, single = _batched(window)
    n = x.shape[1]
    if len(levels) != n:
        raise DimensionError(f"{len(levels)} levels for {n} indicators")
    if tf is None:
        tf = np.zeros((x.shape[0], 0, x.shape[2]))
    f, _ = _batched(tf)
    masks = level_masks(levels, f.shape[1])
    e = embed(x, f, params)
    h = e
    block_caches = []
    for k in range(count_blocks(params)):
        h, c = block_forward(h, masks, params, f"block{k}.", n_heads)
        block_caches.append(c)
    g, proj_cache = project(h[:, :n], params)
    cache = {"x": x, "tf": f, "blocks": block_caches, "proj": proj_cache, "n": n, "h_final": h}
    return (g[0] if single else g), cache


def encoder_backward(dmean, dvar, cache, params):
    """Parameter gradients of the encoder from gradients on mean and variance."""
    dh_rows, grads = project_backward(dmean, dvar, cache["proj"], params)
    h_final = cache["h_final"]
    dh = np.zeros_like(h_final)
    dh[:, : cache["n"]] = dh_rows
    for k in range(len(cache["blocks"]) - 1, -1, -1):
        dh, g = block_backward(dh, cache["blocks"][k], params, f"block{k}.")
        grads.update(g)
    stacked = np.concatenate([cache["x"], cache["tf"]], axis=1)
    grads["embed.weight"] = np.einsum("bmt,bmd->td", stacked, dh)
    grads["embed.bias"] = dh.sum(axis=(0, 1))
    return grads
