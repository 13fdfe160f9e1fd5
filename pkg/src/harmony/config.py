"""Flat ``key = value`` configuration covering every tunable default."""

from __future__ import annotations

from dataclasses import fields

from .decision import DecisionConfig, SlaPolicy
from .exceptions import ConfigurationError
from .indicators import read_kv
from .simulator import SynthSpec

_TRAIN_KEYS = {
    "learning_rate": ("train.learning_rate", float, 0.001),
    "batch_size": ("train.batch_size", int, 128),
    "epochs": ("train.epochs", int, 20),
    "optimizer": ("train.optimizer", str, "adam"),
    "loss": ("train.loss", str, "mse"),
    "quantile": ("train.quantile", float, 0.5),
    "n_samples": ("train.n_samples", int, 1),
    "d_model": ("model.d_model", int, 32),
    "d_ff": ("model.d_ff", "opt_int", None),
    "n_blocks": ("model.n_blocks", int, 2),
    "n_flows": ("model.n_flows", int, 2),
    "n_heads": ("model.n_heads", int, 1),
    "flow_hidden": ("model.flow_hidden", "opt_int", None),
    "variance_bias": ("model.variance_bias", float, -7.0),
}

DEFAULTS = {
    "seed": (int, 0),
    "data.t_in": (int, 24),
    "data.aggregate_seconds": ("opt_int", None),
    "gate.accuracy": (float, 0.9),
    "gate.fraction": (float, 0.9),
    "gate.floor": (float, 1e-6),
    "decision.n_low": (int, 1),
    "decision.n_high": (int, 64),
    "decision.w_excess": ("floats", [1.0]),
    "decision.w_short": ("floats", [4.0]),
    "decision.strict_paper": (bool, False),
    "sla.quality_index": ("opt_int", None),
    "sla.threshold": ("opt_float", None),
    "sla.proximity_band": (float, 0.2),
    "sla.excess_discount": (float, 0.5),
    "sim.policies": ("strs", ["no_scale", "rule_based", "autopilot", "harmony"]),
    "sim.buffer": (float, 0.10),
    "sim.window": (int, 144),
    "sim.no_scale_units": ("opt_int", None),
    "sim.n_samples": (int, 100),
    "sim.retrain_interval": ("opt_int", None),
    "sim.skip_gate": (bool, False),
    "eval.n_samples": (int, 100),
}
for _key, _kind, _value in _TRAIN_KEYS.values():
    DEFAULTS[_key] = (_kind, _value)
for _f in fields(SynthSpec):
    if _f.name == "seed":
        continue
    _kind = {"int": int, "float": float, "tuple": "tuple", "float | None": "opt_float"}[str(_f.type)]
    DEFAULTS[f"synth.{_f.name}"] = (_kind, _f.default)


def _coerce(key, kind, text):
    text = text.strip()
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if kind in ("opt_int", "opt_float"):
            if text.lower() in ("", "none"):
                return None
            return int(text) if kind == "opt_int" else float(text)
        if kind == "floats":
            return [float(v) for v in text.split(",")]
        if kind == "strs":
            return [v.strip() for v in text.split(",") if v.strip()]
        if kind == "tuple":
            parts = [v.strip() for v in text.split(",") if v.strip()]
            try:
                return tuple(float(v) for v in parts)
            except ValueError:
                return tuple(parts)
        return kind(text)
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: cannot parse {text!r}") from exc


def _render(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


class Settings(dict):
    """Resolved configuration: defaults overlaid with file entries and overrides."""

    @classmethod
    def load(cls, path=None, overrides=None):
        settings = cls({key: value for key, (_, value) in DEFAULTS.items()})
        entries = dict(read_kv(path)) if path else {}
        entries.update({k: _render(v) for k, v in (overrides or {}).items()})
        for key, text in entries.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            settings[key] = _coerce(key, DEFAULTS[key][0], text)
        return settings

    def to_text(self):
        return "".join(f"{key} = {_render(self[key])}\n" for key in sorted(self))

    def estimator_params(self):
        params = {name: self[key] for name, (key, _, _) in _TRAIN_KEYS.items()}
        params["random_state"] = self["seed"]
        params["n_predict_samples"] = self["eval.n_samples"]
        return params

    def decision_config(self):
        sla = None
        if self["sla.threshold"] is not None:
            if self["sla.quality_index"] is None:
                raise ConfigurationError("sla.threshold needs sla.quality_index")
            sla = SlaPolicy(self["sla.quality_index"], self["sla.threshold"],
                            self["sla.proximity_band"], self["sla.excess_discount"])
        return DecisionConfig(self["decision.n_low"], self["decision.n_high"], self["decision.w_excess"],
                              self["decision.w_short"], sla, self["decision.strict_paper"])

    def synth_spec(self):
        values = {f.name: self[f"synth.{f.name}"] for f in fields(SynthSpec) if f.name != "seed"}
        return SynthSpec(seed=self["seed"], **values)

    def gate_thresholds(self):
        return self["gate.accuracy"], self["gate.fraction"]
