"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a PASS/FAIL line; the lines are printed in the pytest
terminal summary and when this file is run as a script.
"""

import time

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from harmony.decision import DecisionConfig, DecisionWeights, decide
from harmony.encoder import encoder_forward, level_masks
from harmony.flows import flow_forward, flow_inverse, init_flow_params
from harmony.forecaster import HarmonyForecaster
from harmony.indicators import CUConfig
from harmony.metrics import crps_empirical
from harmony.simulator import SynthSpec, run_pipeline, synth_trace
from harmony.training import (
    TrainConfig,
    gate_from_accuracies,
    init_params,
    loss_and_grad,
    model_forward,
    mse_loss,
    validate_90_90,
)
from oracles import brute_force_decide, random_instance

RESULTS = []

PIPELINE = dict(
    forecaster=dict(d_model=32, epochs=20, loss="pinball", quantile=0.9, learning_rate=0.003, batch_size=64,
                    random_state=0),
    t_in=24,
    n_samples=100,
    seed=0,
)


def record(label, ok, detail):
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, detail


def run_criterion7(seed=0):
    spec = SynthSpec(seed=seed)
    panel = synth_trace(spec)
    forecaster = HarmonyForecaster(**PIPELINE["forecaster"])
    return run_pipeline(panel, spec.cu_config(), forecaster, t_in=PIPELINE["t_in"], n_samples=PIPELINE["n_samples"],
                        seed=PIPELINE["seed"], decision=DecisionConfig(), skip_gate=True)


def artifacts(result, tmp_path, tag):
    path = tmp_path / f"{tag}.ckpt"
    result.model.save(path)
    return path.read_bytes(), result.report.allocation_csv(), result.report.to_csv()


@pytest.fixture(scope="module")
def pipeline():
    start = time.perf_counter()
    result = run_criterion7()
    return result, time.perf_counter() - start


def test_c1_gradient_oracle():
    start = time.perf_counter()
    config = TrainConfig(d_model=8, n_blocks=2, n_flows=2, seed=1, variance_bias=0.0)
    params = init_params(3, 4, 8, config)
    rng = np.random.default_rng(2)
    for name in params:
        params[name] = params[name] + 0.2 * rng.standard_normal(params[name].shape)
    x, tf = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 4, 8))
    y, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    levels = np.array([1, 2, 3])
    _, grads, _ = loss_and_grad(params, x, tf, y, levels, eps, config)

    def loss():
        return mse_loss(model_forward(params, x, tf, levels, eps)[0], y)

    worst, h = 0.0, 1e-4
    for name, value in params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            up = loss()
            value[idx] = orig - h
            down = loss()
            value[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-8))
    elapsed = time.perf_counter() - start
    record("C1 gradient oracle", worst < 1e-3 and elapsed < 10,
           f"worst relative error {worst:.2e} over {len(params)} tensors (< 1e-3), {elapsed:.2f}s (< 10s)")


def test_c2_flow_invertibility():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(100):
        n = (2, 3, 5, 8)[i % 4]
        params = init_flow_params(n, 2, rng)
        for k in params:
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        z = rng.standard_normal((n, 1))
        worst = max(worst, np.max(np.abs(flow_inverse(flow_forward(z, params).samples, params) - z)))
    elapsed = time.perf_counter() - start
    record("C2 flow invertibility", worst < 1e-10 and elapsed < 1,
           f"max |inverse(forward(z)) - z| = {worst:.2e} (< 1e-10), {elapsed:.3f}s (< 1s)")


def test_c3_mask_causality():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    levels = np.array([1, 2, 3, 2, 1])
    identical, supported = True, True
    for trial in range(20):
        params = init_params(5, 4, 12, TrainConfig(d_model=16, n_blocks=2, seed=trial))
        x, tf = rng.standard_normal((5, 12)), rng.standard_normal((4, 12))
        _, base = encoder_forward(x, tf, levels, params)
        for row in np.flatnonzero(levels == 2):
            bumped = x.copy()
            bumped[row] += rng.standard_normal(12)
            _, other = encoder_forward(bumped, tf, levels, params)
            for b0, b1 in zip(base["blocks"], other["blocks"]):
                identical &= b0["level_outputs"][0].tobytes() == b1["level_outputs"][0].tobytes()
        masks = level_masks(levels, 4)
        for block in base["blocks"]:
            for mask, out in zip(masks, block["level_outputs"]):
                supported &= not out[0][mask == 0].any()
    elapsed = time.perf_counter() - start
    record("C3 mask causality", identical and supported and elapsed < 1,
           f"level-1 outputs bit-identical: {identical}, exact supports: {supported}, {elapsed:.3f}s (< 1s)")


def quadrature_crps(mu, sigma, y):
    below = integrate.quad(lambda t: norm.cdf(t, mu, sigma) ** 2, -np.inf, y)[0]
    above = integrate.quad(lambda t: norm.sf(t, mu, sigma) ** 2, y, np.inf)[0]
    return below + above


def test_c4_crps_estimator():
    oracle = quadrature_crps(0.0, 1.0, 0.0)
    estimate = crps_empirical(np.random.default_rng(5).standard_normal(100_000), 0.0)
    rel = abs(estimate - oracle) / oracle
    singles = np.random.default_rng(6).standard_normal((200, 2))
    exact = all(crps_empirical([x], y) == abs(x - y) for x, y in singles)
    record("C4 CRPS estimator", rel < 0.02 and exact,
           f"S=1e5 estimate {estimate:.5f} vs quadrature {oracle:.5f} (rel {rel:.2e} < 0.02), S=1 exact: {exact}")


def test_c5_decision_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        demand, caps, lo, hi, we, ws = random_instance(rng)
        out = decide(demand, ["consumption"] * len(demand), CUConfig(caps), (lo, hi), DecisionWeights(we, ws))
        n_opt, curve = brute_force_decide(demand, caps, lo, hi, we, ws)
        same = out.n_optimal == n_opt and len(out.cost_curve) == len(curve) and all(
            p.n_units == n and p.cost == c and p.p_short.tolist() == ps and p.p_excess.tolist() == pe
            for p, (n, ps, pe, c) in zip(out.cost_curve, curve)
        )
        mismatches += not same
    elapsed = time.perf_counter() - start
    record("C5 decision oracle", mismatches == 0 and elapsed < 5,
           f"{mismatches} mismatches over 1000 instances, {elapsed:.2f}s (< 5s)")


def test_c6_monotonicity():
    rng = np.random.default_rng(8)
    failures = {"probabilities": 0, "weights": 0, "rescaling": 0}

    def solve(demand, caps, lo, hi, we, ws):
        return decide(demand, ["consumption"] * len(demand), CUConfig(caps), (lo, hi), DecisionWeights(we, ws))

    for _ in range(100):
        inst = random_instance(rng)
        out = solve(*inst)
        ps = np.array([p.p_short for p in out.cost_curve])
        pe = np.array([p.p_excess for p in out.cost_curve])
        failures["probabilities"] += not (np.all(np.diff(ps, axis=0) <= 0) and np.all(np.diff(pe, axis=0) >= 0))
    for _ in range(100):
        demand, caps, lo, hi, we, ws = random_instance(rng)
        base = solve(demand, caps, lo, hi, we, ws).n_optimal
        bump = rng.uniform(1.0, 3.0, size=len(we))
        failures["weights"] += not (solve(demand, caps, lo, hi, we * bump, ws).n_optimal <= base
                                    and solve(demand, caps, lo, hi, we, ws * bump).n_optimal >= base)
    for _ in range(100):
        demand, caps, lo, hi, we, ws = random_instance(rng)
        factor = 2.0 ** int(rng.integers(-4, 5))
        failures["rescaling"] += solve(demand, caps, lo, hi, we, ws).n_optimal != solve(
            demand, caps, lo, hi, we * factor, ws * factor).n_optimal
    record("C6 monotonicity suite", not any(failures.values()), f"failures per property {failures} over 100 each")


def test_c7_end_to_end(pipeline):
    result, elapsed = pipeline
    rep = result.report
    ratios = {r: rep.row("harmony", r).utilization / rep.row("rule_based", r).utilization for r in rep.resource_names}
    succr = rep.row("harmony", rep.resource_names[0]).succr
    ok = all(v >= 1.10 for v in ratios.values()) and succr >= 0.97 and elapsed < 600
    ok &= result.panel.n_timestamps >= 4032 and len(result.model.training_log_.epochs) <= 20
    detail = ", ".join(f"{r} utilization x{v:.3f}" for r, v in ratios.items())
    record("C7 end-to-end improvement", ok,
           f"{detail} (>= 1.10), harmony SuccR {succr:.4f} (>= 0.97), {elapsed:.1f}s (< 600s)")
    RESULTS.append(rep.table())


class _Offset:
    def __init__(self, model, offset):
        self.model, self.offset = model, offset

    def predict(self, X, time_features=None):
        return self.model.predict(X, time_features=time_features) + self.offset


def test_c8_gate(pipeline):
    result, _ = pipeline
    val = result.windows.subset("validation")
    trained = validate_90_90(result.model, val, norm=result.norm)
    corrupted = validate_90_90(_Offset(result.model, 0.5), val, norm=result.norm)
    acc = np.full(1000, 0.95)
    acc[:100] = 0.5
    at_boundary = gate_from_accuracies(acc)
    acc[100] = 0.5
    below = gate_from_accuracies(acc)
    ok = trained.passed and not corrupted.passed and at_boundary.passed and not below.passed
    record("C8 90-90 gate", ok,
           f"trained fraction {trained.fraction:.4f} passes: {trained.passed}, +0.5 offset fraction "
           f"{corrupted.fraction:.4f} fails: {not corrupted.passed}, 90.0% passes: {at_boundary.passed}, "
           f"89.9% fails: {not below.passed}")


def test_c9_determinism(pipeline, tmp_path):
    first = artifacts(pipeline[0], tmp_path, "a")
    second = artifacts(run_criterion7(), tmp_path, "b")
    same = [a == b for a, b in zip(first, second)]
    record("C9 determinism", all(same),
           f"checkpoint identical: {same[0]}, allocation log identical: {same[1]}, report identical: {same[2]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
