"""Error-report oracles and benchmark-batch behaviour.

Evaluation tests inject hand-built residuals onto the true motion, so
every expected field value is known in closed form.
"""
from __future__ import annotations

import numpy as np
import pytest

from fragtrack.errors import EstimateFailed
from fragtrack.geometry import RigidTransform, euler_compose
from fragtrack.metrics import (
    BenchmarkConfig,
    ErrorReport,
    evaluate,
    run_benchmark,
    run_seed,
)
from fragtrack.pipeline import FragmentPoseEstimate, StageCounts
from fragtrack.simulate import NOISE_PROFILES, NoiseModel, generate_scene
from helpers import random_rotation


def fake_estimate(delta, status="success") -> FragmentPoseEstimate:
    return FragmentPoseEstimate(
        status=status,
        delta_app=delta,
        ilium_pose=None,
        fragment_pose=None,
        n_ilium_matched=4,
        n_frag_matched=4,
        lce_deg=0.0,
        ilium_counts=StageCounts(),
        fragment_counts=StageCounts(),
        timings={"total": 0.1},
    )


def moved_scene(seed=0, delta=None):
    from fragtrack.simulate import apply_fragment_motion, sample_fragment_motion

    scene = generate_scene(seed=seed)
    if delta is None:
        delta = sample_fragment_motion(np.random.default_rng((2, seed)))
    return apply_fragment_motion(scene, delta)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def test_truth_estimate_scores_zero():
    scene = moved_scene(seed=1)
    report = evaluate(fake_estimate(scene.true_delta_app), scene)
    assert report.rot_total == pytest.approx(0.0, abs=1e-9)
    assert report.trans_total == pytest.approx(0.0, abs=1e-9)
    assert report.lce_error == pytest.approx(0.0, abs=1e-9)
    assert report.status == "success"


def test_pure_is_rotation_residual_decomposes_exactly():
    scene = moved_scene(seed=2)
    true = scene.true_delta_app
    # perturb the rotation only; keep the true translation so the
    # translation error stays exactly zero
    est = RigidTransform(
        euler_compose(0.0, 3.0, 0.0) @ true.rotation, true.translation, "app", "app"
    )
    report = evaluate(fake_estimate(est), scene)
    assert report.rot_total == pytest.approx(3.0, abs=1e-9)
    assert report.rot_is == pytest.approx(3.0, abs=1e-9)
    assert report.rot_lr == pytest.approx(0.0, abs=1e-9)
    assert report.rot_ap == pytest.approx(0.0, abs=1e-9)
    assert report.trans_total == pytest.approx(0.0, abs=1e-12)


def test_pure_lr_translation_residual_signed():
    scene = moved_scene(seed=3)
    true = scene.true_delta_app
    est = RigidTransform(
        true.rotation, true.translation + np.array([2.0, 0.0, 0.0]), "app", "app"
    )
    report = evaluate(fake_estimate(est), scene)
    assert report.trans_total == pytest.approx(2.0, abs=1e-12)
    assert report.trans_lr == pytest.approx(2.0, abs=1e-12)
    assert report.trans_is == pytest.approx(0.0, abs=1e-12)
    assert report.trans_ap == pytest.approx(0.0, abs=1e-12)
    # arccos conditioning near zero leaves ~1e-6 deg of noise
    assert report.rot_total == pytest.approx(0.0, abs=1e-5)


def test_totals_bound_components():
    scene = moved_scene(seed=4)
    true = scene.true_delta_app
    for k in range(30):
        rng = np.random.default_rng(k)
        resid = RigidTransform(
            random_rotation(rng, max_angle_deg=30.0),
            rng.uniform(-10.0, 10.0, size=3),
            "app",
            "app",
        )
        report = evaluate(fake_estimate(resid @ true), scene)
        comps = (report.rot_lr, report.rot_is, report.rot_ap)
        assert report.rot_total + 1e-9 >= max(abs(c) for c in comps)
        t_comps = (report.trans_lr, report.trans_is, report.trans_ap)
        assert report.trans_total + 1e-12 >= max(abs(c) for c in t_comps)


def test_evaluate_rejects_failures():
    scene = moved_scene(seed=5)
    with pytest.raises(EstimateFailed):
        evaluate(fake_estimate(None, status="failed_ilium"), scene)


# ---------------------------------------------------------------------------
# benchmark batches
# ---------------------------------------------------------------------------

def test_zero_noise_seed_outcome():
    out = run_seed(0, BenchmarkConfig())
    assert out.status == "success"
    assert out.n_recon_points == 8
    assert out.recon_rms_mm < 1e-6
    assert out.report.rot_total < 0.01
    assert out.report.trans_total < 0.01
    assert out.ilium_counts[0] > out.ilium_counts[1] > 0
    assert out.estimate_s > 0.0


def test_benchmark_parallel_matches_sequential():
    seq = run_benchmark(BenchmarkConfig(n_seeds=3, deterministic=True))
    par = run_benchmark(BenchmarkConfig(n_seeds=3, threads=2))
    assert [o.status for o in seq.outcomes] == [o.status for o in par.outcomes]
    assert np.array_equal(
        seq.field_values("rot_total"), par.field_values("rot_total")
    )
    assert np.array_equal(
        seq.field_values("trans_total"), par.field_values("trans_total")
    )


def test_benchmark_repeat_identical():
    config = BenchmarkConfig(
        n_seeds=3, view_noise=NOISE_PROFILES["calibrated"], deterministic=True
    )
    a = run_benchmark(config)
    b = run_benchmark(config)
    for name in ("rot_total", "trans_total", "lce_error"):
        assert np.array_equal(a.field_values(name), b.field_values(name))


def test_jitter_monotonicity_in_median_rotation_error():
    medians = []
    for jitter in (0.0, 0.75):
        summary = run_benchmark(
            BenchmarkConfig(n_seeds=12, view_noise=NoiseModel(detection_jitter_px=jitter))
        )
        assert not summary.failures
        medians.append(float(np.median(summary.field_values("rot_total"))))
    assert medians[0] <= medians[1]


def test_format_table_layout():
    summary = run_benchmark(BenchmarkConfig(n_seeds=2))
    table = summary.format_table()
    assert "Rotation Errors (deg)" in table
    assert "Translation Errors (mm)" in table
    assert "LCE (deg)" in table
    lines = table.splitlines()
    assert lines[2].startswith("Mean")
    assert lines[3].startswith("Std.")
    assert "2/2 seeds succeeded" in table
    assert summary.mean("rot_total") == pytest.approx(
        float(summary.field_values("rot_total").mean())
    )
