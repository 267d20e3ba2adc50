"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; the last criterion needs a real large-vocabulary annotation file and
is skipped unless LVIS_TRAIN_ANNOTATIONS points at one.
"""

import math
import os
import time

import numpy as np
import pytest

from fracal.annotations import compute_class_frequencies, load_annotations
from fracal.calibration import (
    CalibrationWeights,
    LogitRecord,
    apply_method,
    class_calibrate,
    fracal,
    fracal_binary,
    grid_calibrate,
    softmax,
    space_calibrate,
)
from fracal.evalharness import (
    Detection,
    average_precision,
    detections_from_scores,
    iou,
    nms,
    run_pipeline,
)
from fracal.fractal import estimate_class, pearson_correlation
from fracal.synthetic import PointProcessSpec, ScenarioSpec, generate_points, simulate_scenario
from conftest import make_dataset


def _line(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _scenario_reports(spec: ScenarioSpec, methods, max_per_image, grid_sizes=()):
    batch = simulate_scenario(spec)
    ds = batch.ground_truth
    groups = compute_class_frequencies(ds)
    weights = CalibrationWeights.from_dataset(ds, grid_sizes=grid_sizes)
    reports = {}
    for method, kwargs in methods:
        scored = [apply_method(r, weights, method, **kwargs) for r in batch.proposals]
        dets = detections_from_scores(scored, weights.class_ids)
        key = method if not kwargs else f"{method}{kwargs.get('grid_size')}"
        reports[key] = run_pipeline(dets, ds, groups, max_per_image=max_per_image)
    return reports


def test_criterion_1_dimension_oracles():
    t0 = time.perf_counter()
    uniform = estimate_class(generate_points(PointProcessSpec("uniform", 10_000, seed=11)), 0)
    line = estimate_class(
        generate_points(
            PointProcessSpec("line", 10_000, seed=12, params={"endpoints": (0.0, 0.0, 1.0, 1.0)})
        ),
        0,
    )
    sierpinski = estimate_class(
        generate_points(PointProcessSpec("sierpinski", 50_000, seed=13)), 0
    )
    colocated = estimate_class(
        generate_points(PointProcessSpec("single_cell", 100, seed=14)), 0
    )
    tiny = estimate_class(np.array([[0.2, 0.2], [0.4, 0.4], [0.6, 0.6]]), 0)
    elapsed = time.perf_counter() - t0

    checks = [
        (1.85 <= uniform.phi <= 2.0, f"uniform phi={uniform.phi:.3f}"),
        (0.9 <= line.phi <= 1.1, f"line phi={line.phi:.3f}"),
        (abs(sierpinski.phi - 1.585) <= 0.12, f"sierpinski phi={sierpinski.phi:.3f}"),
        (colocated.phi == 0.0 and not colocated.fallback, f"colocated phi={colocated.phi}"),
        (tiny.phi == 1.0 and tiny.fallback, f"n<4 phi={tiny.phi} fallback={tiny.fallback}"),
        (elapsed < 30.0, f"elapsed={elapsed:.1f}s"),
    ]
    _line(
        "criterion 1 (dimension oracles)",
        all(ok for ok, _ in checks),
        "; ".join(d for _, d in checks),
    )


def test_criterion_2_quadratic_rule(rng):
    est12 = estimate_class(rng.random((12, 2)), 0)
    est4 = estimate_class(rng.random((4, 2)), 0)
    ok = est12.t == 3 and est12.pair_count == 3 and est4.t == 2
    _line(
        "criterion 2 (quadratic rule)",
        ok,
        f"n=12 -> t={est12.t} pairs={est12.pair_count}; n=4 -> t={est4.t}",
    )


def test_criterion_3_calibration_identities(rng):
    results = []

    # equal frequencies make the class adjustment vanish
    w_eq = CalibrationWeights([0, 1, 2], [5, 5, 5], [1.3, 0.7, 1.0])
    z = rng.normal(0, 2, 4)
    r = LogitRecord(0, (0.5, 0.5, 0.1, 0.1), z)
    results.append(np.max(np.abs(class_calibrate(r, w_eq) - z)) <= 1e-9)

    # lambda = 0 makes the space reweighting vanish
    w_l0 = CalibrationWeights([0, 1], [3, 30], [1.9, 0.4], lam=0.0)
    p = np.array([0.2, 0.5, 0.3])
    results.append(np.max(np.abs(space_calibrate(p, w_l0) - p)) <= 1e-9)

    # grid priors at G=1 reduce to the class adjustment
    ds = make_dataset({c: [tuple(v) for v in rng.random((12, 2))] for c in (0, 1, 2)})
    w_g = CalibrationWeights.from_dataset(ds, grid_sizes=(1,))
    rg = LogitRecord(0, (0.3, 0.8, 0.1, 0.1), rng.normal(0, 2, 4))
    results.append(
        np.max(np.abs(grid_calibrate(rg, w_g, 1) - class_calibrate(rg, w_g))) <= 1e-9
    )

    # fracal output is a distribution
    w = CalibrationWeights(range(4), [100, 10, 5, 2], [1.9, 1.2, 0.8, 1.0])
    rf = LogitRecord(0, (0.5, 0.5, 0.1, 0.1), rng.normal(0, 2, 5))
    results.append(abs(fracal(rf, w).sum() - 1.0) <= 1e-9)

    # uniform rescaling of phi changes nothing
    w_half = CalibrationWeights(range(4), [100, 10, 5, 2], 0.5 * np.array([1.9, 1.2, 0.8, 1.0]))
    results.append(np.max(np.abs(fracal(rf, w) - fracal(rf, w_half))) <= 1e-12)
    rb = LogitRecord(0, (0.5, 0.5, 0.1, 0.1), rng.normal(0, 2, 4))
    wb = CalibrationWeights(range(4), [100, 10, 5, 2], [1.9, 1.2, 0.8, 1.0])
    wb_half = CalibrationWeights(range(4), [100, 10, 5, 2], 0.5 * np.array([1.9, 1.2, 0.8, 1.0]))
    results.append(np.max(np.abs(fracal_binary(rb, wb) - fracal_binary(rb, wb_half))) <= 1e-12)

    _line(
        "criterion 3 (calibration identities)",
        all(results),
        f"{sum(results)}/6 identities hold",
    )


def test_criterion_4_worked_arithmetic():
    checks = []

    w_c = CalibrationWeights([0, 1], [10, 90], [1.0, 1.0], beta=10.0)
    out = class_calibrate(LogitRecord(0, (0.5, 0.5, 0.1, 0.1), np.array([1.0, 2.0, 0.5])), w_c)
    checks.append(np.max(np.abs(out - [1.6989700, 1.7447275, 0.5])) <= 1e-6)

    w_s = CalibrationWeights([0, 1], [50, 50], [2.0, 1.0], lam=2.0)
    s_out = space_calibrate(np.array([0.2, 0.5, 0.3]), w_s)
    checks.append(np.max(np.abs(s_out - [0.05, 0.5, 0.3])) <= 1e-6)
    f_out = fracal(LogitRecord(0, (0.5, 0.5, 0.1, 0.1), np.log([0.2, 0.5, 0.3])), w_s)
    checks.append(np.max(np.abs(f_out - [0.0588235, 0.5882353, 0.3529412])) <= 1e-6)

    from fracal.calibration import baseline_calibrate

    w_n = CalibrationWeights([0, 1], [10, 100], [1.0, 1.0])
    n_out = baseline_calibrate(
        LogitRecord(0, (0.5, 0.5, 0.1, 0.1), np.log([0.2, 0.3, 0.5])), w_n, "norcal", gamma=1.0
    )
    checks.append(np.max(np.abs(n_out - [0.038241, 0.005736, 0.956023])) <= 1e-6)

    w_b = CalibrationWeights([0, 1], [30, 30], [1.0, 1.0], lam=2.0)
    b_out = fracal_binary(LogitRecord(0, (0.5, 0.5, 0.1, 0.1), np.array([0.0, 0.0])), w_b)
    checks.append(abs(b_out[0] - 0.25) <= 1e-6)

    _line(
        "criterion 4 (worked arithmetic)",
        all(checks),
        f"{sum(checks)}/5 oracle values reproduced to 1e-6",
    )


def test_criterion_5_direction_of_effect():
    t0 = time.perf_counter()
    methods = [("none", {}), ("class-only", {}), ("fracal", {}), ("opposite", {})]
    # a tight per-image detection budget creates the cross-class competition
    # that post-calibration must resolve on long-tailed data
    reports = _scenario_reports(ScenarioSpec(seed=0), methods, max_per_image=10)
    elapsed = time.perf_counter() - t0

    rare_gain = reports["fracal"].ap_rare > reports["none"].ap_rare
    beats_class = reports["fracal"].ap_overall >= reports["class-only"].ap_overall
    beats_opposite = reports["fracal"].ap_overall > reports["opposite"].ap_overall
    detail = (
        f"rare: fracal={reports['fracal'].ap_rare:.3f} vs none={reports['none'].ap_rare:.3f}; "
        f"overall: fracal={reports['fracal'].ap_overall:.3f}, "
        f"class-only={reports['class-only'].ap_overall:.3f}, "
        f"opposite={reports['opposite'].ap_overall:.3f}; elapsed={elapsed:.1f}s"
    )
    _line(
        "criterion 5 (direction of effect)",
        rare_gain and beats_class and beats_opposite and elapsed <= 60.0,
        detail,
    )


def test_criterion_6_grid_sparsity():
    # sparse setting: a wide band of rare classes spread uniformly, so the
    # empty-cell fraction of the estimated grid prior grows with G
    spec = ScenarioSpec(
        seed=0,
        num_classes=24,
        freq_max=120,
        freq_exponent=1.2,
        images=400,
        spatial_law={c: ("uniform", {}) for c in range(24)},
    )
    methods = [("grid", {"grid_size": g}) for g in (1, 2, 4)]
    reports = _scenario_reports(spec, methods, max_per_image=300, grid_sizes=(1, 2, 4))
    r1, r2, r4 = (reports[f"grid{g}"].ap_rare for g in (1, 2, 4))
    _line(
        "criterion 6 (grid sparsity)",
        r4 < r2 < r1,
        f"rare AP: G=4 {r4:.4f} < G=2 {r2:.4f} < G=1 {r1:.4f}",
    )


def test_criterion_7_harness_oracles(rng):
    checks = []
    checks.append(abs(iou((0, 0, 2, 2), (1, 1, 2, 2)) - 1 / 7) <= 1e-12)

    gts = make_dataset({0: [(0.5, 0.5)]})
    fp_then_tp = [
        Detection(1, 0, (0.9, 0.1, 0.05, 0.05), 0.9),
        Detection(1, 0, (0.5, 0.5, 0.1, 0.1), 0.5),
    ]
    checks.append(abs(average_precision(fp_then_tp, gts, 0) - 0.5) <= 1e-12)

    dets = [
        Detection(
            int(rng.integers(0, 3)),
            int(rng.integers(0, 2)),
            (*rng.uniform(0.3, 0.7, 2), 0.3, 0.3),
            float(rng.random()),
        )
        for _ in range(60)
    ]
    once = nms(dets)
    checks.append(nms(once) == once)

    gts2 = make_dataset(
        {0: [tuple(v) for v in rng.uniform(0.2, 0.8, (10, 2))]},
        images={k: (10, 10) for k in range(5)},
    )
    mixed = [
        Detection(inst.image_id, 0, inst.box, float(rng.random())) for inst in gts2.instances
    ] + [
        Detection(int(rng.integers(0, 5)), 0, (*rng.uniform(0.2, 0.8, 2), 0.02, 0.02), float(rng.random()))
        for _ in range(15)
    ]
    base = average_precision(mixed, gts2, 0)
    warped = [Detection(d.image_id, d.class_id, d.box, math.exp(2 * d.score)) for d in mixed]
    checks.append(abs(average_precision(warped, gts2, 0) - base) <= 1e-12)

    _line(
        "criterion 7 (harness oracles)",
        all(checks),
        f"{sum(checks)}/4 oracles hold",
    )


@pytest.mark.skipif(
    "LVIS_TRAIN_ANNOTATIONS" not in os.environ,
    reason="set LVIS_TRAIN_ANNOTATIONS to a large-vocabulary train annotation file",
)
def test_criterion_8_real_dataset_correlation():
    path = os.environ["LVIS_TRAIN_ANNOTATIONS"]
    t0 = time.perf_counter()
    ds = load_annotations(path)
    weights = CalibrationWeights.from_dataset(ds, workers=os.cpu_count() or 1)
    elapsed = time.perf_counter() - t0
    keep = weights.counts >= 1
    corr = pearson_correlation(np.log(weights.counts[keep]), weights.phi[keep])
    _line(
        "criterion 8 (real dataset)",
        abs(corr - 0.35) <= 0.10 and elapsed < 120.0,
        f"correlation={corr:.3f} (target 0.35 +/- 0.10), elapsed={elapsed:.1f}s",
    )
