"""Command-line entry point: ``harmony <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import functools
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Settings
from .decision import outcome_document
from .encoder import GaussianForecast
from .exceptions import GateError, HarmonyError
from .forecaster import HarmonyForecaster
from .indicators import (
    CUConfig,
    NormState,
    TraceSchema,
    aggregate,
    chronological_split,
    load_trace,
    make_windows,
    minmax_fit_transform,
    time_features,
    write_trace,
)
from .metrics import evaluate
from .simulator import run_pipeline, synth_trace
from .training import default_accuracy, validate_90_90

logger = logging.getLogger("harmony")

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (overrides config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return common


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="harmony", parents=[common],
                                     description="Hierarchical probabilistic forecasting and CU provisioning.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    def panel_args(p):
        p.add_argument("--panel", required=True, help="trace CSV")
        p.add_argument("--schema", required=True, help="schema sidecar")

    p = add("ingest", "validate a trace and write the canonical panel")
    panel_args(p)
    p.add_argument("--aggregate", type=int, default=None, help="max-aggregate into buckets of this many seconds")

    p = add("train", "train a forecaster on a panel")
    panel_args(p)

    p = add("evaluate", "MSE and CRPS of a checkpoint on a split")
    panel_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="validation", choices=("train", "test", "validation"))

    p = add("forecast", "predictive samples for the interval after the panel")
    panel_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=None, help="number of samples S")

    p = add("decide", "choose a CU count from samples or a Gaussian forecast")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--samples", help="CSV name,role,level,sample_0,...")
    src.add_argument("--gaussian", help="CSV name,role,mean,variance")
    p.add_argument("--capacity", required=True, help="comma-separated CU capacity per consumption indicator")
    p.add_argument("--strict-paper", action="store_true", help="swap the weight binding")

    p = add("simulate", "replay scaling policies over a panel or a synthetic trace")
    p.add_argument("--panel", help="trace CSV (omit to synthesize)")
    p.add_argument("--schema", help="schema sidecar with cu_capacity entries")
    p.add_argument("--policies", help="comma-separated policy kinds")
    p.add_argument("--skip-gate", action="store_true")

    p = add("gate", "run the 90-90 gate on the validation split")
    panel_args(p)
    p.add_argument("--checkpoint", required=True)
    return parser


def _settings(args):
    overrides = {"seed": args.seed} if hasattr(args, "seed") else {}
    return Settings.load(getattr(args, "config", None), overrides)


def _out_dir(args):
    out = Path(getattr(args, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _panel(args, settings):
    panel = load_trace(args.panel, args.schema)
    bucket = getattr(args, "aggregate", None) or settings["data.aggregate_seconds"]
    return aggregate(panel, bucket) if bucket else panel


def _norm_from(meta):
    return NormState(meta["norm"]["minimum"], meta["norm"]["maximum"])


def _load_model(args, panel):
    model, meta = HarmonyForecaster.load(args.checkpoint)
    if list(meta.get("names", panel.names)) != list(panel.names):
        raise HarmonyError("panel columns differ from the checkpoint's")
    return model, _norm_from(meta)


def cmd_ingest(args, settings):
    panel = _panel(args, settings)
    out = _out_dir(args)
    write_trace(panel, out / "panel.csv")
    schema = TraceSchema.read(args.schema)
    (out / "schema.txt").write_text("\n".join(schema.to_lines(panel.names)) + "\n")
    print(f"{panel.n_indicators} indicators x {panel.n_timestamps} timestamps -> {out / 'panel.csv'}")
    return EXIT_OK


def cmd_train(args, settings):
    panel = _panel(args, settings)
    splits = chronological_split(panel)
    normed, norm = minmax_fit_transform(panel, splits.train)
    windows = make_windows(normed, settings["data.t_in"], splits)
    model = HarmonyForecaster(levels=[int(v) for v in panel.levels], **settings.estimator_params())
    model.fit_windows(windows)
    out = _out_dir(args)
    model.save(out / "model.ckpt", _checkpoint_extra(panel, norm))
    model.training_log_.to_csv(out / "training_log.csv")
    print(f"best epoch {model.training_log_.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _checkpoint_extra(panel, norm):
    return {
        "names": list(panel.names),
        "roles": list(panel.roles),
        "norm": {"minimum": norm.minimum.tolist(), "maximum": norm.maximum.tolist()},
    }


def _windows(panel, norm, model):
    splits = chronological_split(panel)
    normed = panel.with_values(norm.transform(panel.values))
    return make_windows(normed, model.t_in_, splits)


def cmd_evaluate(args, settings):
    panel = _panel(args, settings)
    model, norm = _load_model(args, panel)
    windows = _windows(panel, norm, model).subset(args.split)
    result = evaluate(model, windows, settings["eval.n_samples"], settings["seed"], panel.names)
    result.to_csv(_out_dir(args) / "eval.csv")
    print(result.table())
    return EXIT_OK


def cmd_forecast(args, settings):
    panel = _panel(args, settings)
    model, norm = _load_model(args, panel)
    t_in = model.t_in_
    if panel.n_timestamps < t_in:
        raise HarmonyError(f"panel has {panel.n_timestamps} timestamps, the model needs {t_in}")
    normed = norm.transform(panel.values)
    feats = time_features(panel.timestamps)[: model.n_time_features_]
    x = normed[None, :, -t_in:]
    tf = feats[None, :, -t_in:]
    s = args.samples or settings["eval.n_samples"]
    samples = norm.inverse_transform(model.sample(x, tf, n_samples=s, random_state=settings["seed"])[0])
    path = _out_dir(args) / "samples.csv"
    write_samples(path, panel.names, panel.roles, panel.levels, samples)
    print(f"{s} samples for {panel.n_indicators} indicators -> {path}")
    return EXIT_OK


def write_samples(path, names, roles, levels, samples):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "role", "level", *(f"sample_{j}" for j in range(samples.shape[1]))])
        for name, role, level, row in zip(names, roles, levels, samples):
            writer.writerow([name, role, int(level), *(repr(float(v)) for v in row)])


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise HarmonyError(f"{path}: no data rows")
    return rows[0], rows[1:]


def read_samples(path):
    header, rows = _read_rows(path)
    if header[:3] != ["name", "role", "level"]:
        raise HarmonyError(f"{path}: expected header name,role,level,sample_0,...")
    try:
        values = np.array([[float(v) for v in r[3:]] for r in rows])
    except ValueError as exc:
        raise HarmonyError(f"{path}: non-numeric sample") from exc
    return [r[1] for r in rows], values


def read_gaussian(path):
    header, rows = _read_rows(path)
    if header != ["name", "role", "mean", "variance"]:
        raise HarmonyError(f"{path}: expected header name,role,mean,variance")
    try:
        mean = np.array([float(r[2]) for r in rows])
        var = np.array([float(r[3]) for r in rows])
    except ValueError as exc:
        raise HarmonyError(f"{path}: non-numeric mean or variance") from exc
    return [r[1] for r in rows], GaussianForecast(mean, var)


def cmd_decide(args, settings):
    config = settings.decision_config()
    if args.strict_paper:
        config.strict_paper = True
    roles, forecast = read_samples(args.samples) if args.samples else read_gaussian(args.gaussian)
    try:
        cu = CUConfig([float(v) for v in args.capacity.split(",")])
    except ValueError as exc:
        raise HarmonyError(f"bad --capacity {args.capacity!r}") from exc
    outcome = config.run(forecast, roles, cu)
    text = outcome_document(outcome, config, cu.capacities)
    (_out_dir(args) / "decision.txt").write_text(text)
    print(f"n_optimal = {outcome.n_optimal}")
    return EXIT_OK


def cmd_simulate(args, settings):
    if args.panel:
        if not args.schema:
            raise HarmonyError("--panel needs --schema with cu_capacity entries")
        panel = _panel(args, settings)
        cu = TraceSchema.read(args.schema).cu_config(panel)
    else:
        spec = settings.synth_spec()
        panel = synth_trace(spec)
        cu = spec.cu_config()
    policies = args.policies.split(",") if args.policies else settings["sim.policies"]
    forecaster = HarmonyForecaster(**settings.estimator_params())
    result = run_pipeline(
        panel, cu, forecaster, policies=tuple(p.strip() for p in policies),
        decision=settings.decision_config(), t_in=settings["data.t_in"], n_samples=settings["sim.n_samples"],
        seed=settings["seed"], buffer=settings["sim.buffer"], window=settings["sim.window"],
        no_scale_units=settings["sim.no_scale_units"], skip_gate=args.skip_gate or settings["sim.skip_gate"],
        retrain_interval=settings["sim.retrain_interval"], gate_thresholds=settings.gate_thresholds(),
    )
    out = _out_dir(args)
    result.report.to_csv(out / "report.csv")
    (out / "allocations.csv").write_text(result.report.allocation_csv())
    if result.model is not None:
        result.model.save(out / "model.ckpt", _checkpoint_extra(panel, result.norm))
        result.model.training_log_.to_csv(out / "training_log.csv")
    print(result.report.table())
    return EXIT_OK


def cmd_gate(args, settings):
    panel = _panel(args, settings)
    model, norm = _load_model(args, panel)
    windows = _windows(panel, norm, model).subset("validation")
    accuracy_fn = functools.partial(default_accuracy, floor=settings["gate.floor"])
    verdict = validate_90_90(model, windows, accuracy_fn, norm=norm, thresholds=settings.gate_thresholds())
    print(f"fraction = {verdict.fraction!r}")
    print(f"passed = {str(verdict.passed).lower()}")
    return EXIT_OK if verdict.passed else EXIT_INVALID


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "decide": cmd_decide,
    "simulate": cmd_simulate,
    "gate": cmd_gate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, _settings(args))
    except GateError as exc:
        print(f"gate refused the model: fraction {exc.fraction!r}", file=sys.stderr)
        return EXIT_INVALID
    except (HarmonyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
