"""Hierarchical probabilistic forecasting and cost-aware CU provisioning."""

from .decision import DecisionConfig, DecisionOutcome, DecisionWeights, SlaPolicy, decide
from .encoder import GaussianForecast
from .exceptions import (
    ConfigurationError,
    DimensionError,
    GateError,
    HarmonyError,
    ModelError,
    NumericError,
    OrderingError,
    SchemaError,
    SizeError,
    TrainingError,
)
from .flows import PredictiveSamples, flow_forward, flow_inverse, predict_distribution
from .forecaster import HarmonyForecaster
from .indicators import (
    CUConfig,
    IndicatorPanel,
    MinMaxNormalizer,
    NormState,
    TraceSchema,
    WindowSet,
    chronological_split,
    load_trace,
    make_windows,
    minmax_fit_transform,
)
from .metrics import EvalReport, crps_empirical, evaluate, success_rate, utilization
from .simulator import ScalingPolicy, SimReport, SynthSpec, report, run_pipeline, run_policy, synth_trace
from .training import TrainConfig, save_checkpoint, load_checkpoint, train, validate_90_90

__version__ = "0.1.0"

__all__ = [
    "DecisionConfig",
    "DecisionOutcome",
    "DecisionWeights",
    "SlaPolicy",
    "decide",
    "GaussianForecast",
    "ConfigurationError",
    "DimensionError",
    "GateError",
    "HarmonyError",
    "ModelError",
    "NumericError",
    "OrderingError",
    "SchemaError",
    "SizeError",
    "TrainingError",
    "PredictiveSamples",
    "flow_forward",
    "flow_inverse",
    "predict_distribution",
    "HarmonyForecaster",
    "CUConfig",
    "IndicatorPanel",
    "MinMaxNormalizer",
    "NormState",
    "TraceSchema",
    "WindowSet",
    "chronological_split",
    "load_trace",
    "make_windows",
    "minmax_fit_transform",
    "EvalReport",
    "crps_empirical",
    "evaluate",
    "success_rate",
    "utilization",
    "ScalingPolicy",
    "SimReport",
    "SynthSpec",
    "report",
    "run_pipeline",
    "run_policy",
    "synth_trace",
    "TrainConfig",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "validate_90_90",
]
