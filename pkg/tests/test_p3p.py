"""Bounded P3P solver tests.

The grid-search oracle and the from-scratch solution verifier live in
``oracles.py``; nothing here trusts the solver's own arithmetic.
"""
from __future__ import annotations

import numpy as np
import pytest

from fragtrack.errors import ColinearModel
from fragtrack.geometry import RigidTransform, default_carm, rotation_angle_deg
from fragtrack.p3p import (
    P3PCandidateSet,
    P3PConfig,
    min_length_roots,
    solve_p3p,
    solve_p3p_grid,
)
from helpers import random_rotation, random_triangle
from oracles import assert_solutions_admissible, grid_search_length_minima

GRID_129 = tuple(0.6 + 0.003125 * k for k in range(129))
CONFIG = P3PConfig(ratios=GRID_129)


def place_model(rng, model, ratio, lateral=40.0, camera=None):
    """Rigidly place ``model`` so its first point sits at ``ratio`` depth."""
    cam = camera or default_carm()
    r = random_rotation(rng, 40.0)
    rotated = model @ r.T
    offset = rng.uniform(-lateral, lateral, size=2)
    t = np.array([offset[0], offset[1], ratio * cam.sdd]) - rotated[0]
    pose = RigidTransform(r, t)
    return pose, pose.apply(model)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        P3PConfig(ratios=())
    with pytest.raises(ValueError):
        P3PConfig(ratios=(0.5,))  # below t_bounds
    with pytest.raises(ValueError):
        P3PConfig(ratios=(0.7,), t_bounds=(0.9, 0.6))
    with pytest.raises(ValueError):
        P3PConfig(ratios=(0.7,), epsilon=0.0)
    cfg = P3PConfig(ratios=(0.6, 1.0))
    assert cfg.t_bounds == (0.6, 1.0)


# ---------------------------------------------------------------------------
# min_length_roots vs grid-search oracle
# ---------------------------------------------------------------------------

def test_roots_match_grid_search_oracle():
    rng = np.random.default_rng(71)
    cam = default_carm()
    checked = 0
    while checked < 60:
        pix = rng.uniform(300, 1200, size=2)
        line = (cam.source, cam.detector_point_cam(pix))
        b1 = np.array([rng.uniform(-60, 60), rng.uniform(-60, 60), rng.uniform(600, 950)])
        length = rng.uniform(10.0, 45.0)
        roots = min_length_roots(line, b1, length)
        # skip near-tangent geometry where both methods are ill-conditioned
        if len(roots) == 2 and abs(roots[0][0] - roots[1][0]) < 1e-3:
            continue
        oracle = grid_search_length_minima(line, b1, length)
        assert len(roots) == len(oracle)
        for (t, _), t_oracle in zip(roots, sorted(oracle)):
            assert abs(t - t_oracle) < 1e-6
        checked += 1


def test_roots_achieved_lengths():
    cam = default_carm()
    line = (cam.source, cam.detector_point_cam(np.array([900.0, 700.0])))
    b1 = np.array([10.0, -5.0, 800.0])
    # reachable length: both roots achieve it exactly
    roots = min_length_roots(line, b1, 30.0)
    assert len(roots) == 2
    for t, ach in roots:
        assert ach == pytest.approx(30.0, abs=1e-9)
    assert roots[0][0] < roots[1][0]
    # unreachable length: perpendicular foot, shorter achieved length
    roots = min_length_roots(line, b1, 0.5)
    assert len(roots) == 1
    t_star, ach = roots[0]
    assert ach > 0.5  # line never gets that close
    s, bhat = line
    d = bhat - s
    foot = -float((s - b1) @ d) / float(d @ d)
    assert t_star == pytest.approx(foot, abs=1e-12)


def test_roots_degenerate_line():
    with pytest.raises(ValueError):
        min_length_roots((np.zeros(3), np.zeros(3)), np.ones(3), 10.0)


# ---------------------------------------------------------------------------
# solve_p3p
# ---------------------------------------------------------------------------

def test_truth_recovered_at_grid_ratio():
    rng = np.random.default_rng(72)
    cam = default_carm()
    for _ in range(25):
        model = random_triangle(rng, 22.0)
        # interior grid points: the whole triple must stay inside t-bounds
        ratio = GRID_129[int(rng.integers(16, len(GRID_129) - 16))]
        pose, posed = place_model(rng, model, ratio)
        dets, _ = cam.project_cam(posed)
        sols = solve_p3p(model, dets, cam, CONFIG)
        assert sols, "no solutions returned for an exact configuration"
        errs = [
            max(
                rotation_angle_deg(s.pose.rotation @ pose.rotation.T),
                float(np.linalg.norm(s.pose.translation - pose.translation)),
            )
            for s in sols
        ]
        assert min(errs) < 1e-4, "true pose missing from the solution set"


def test_all_solutions_pass_independent_verifier():
    rng = np.random.default_rng(73)
    cam = default_carm()
    for _ in range(25):
        model = random_triangle(rng, 25.0)
        ratio = rng.uniform(0.62, 0.98)  # generally not on the grid
        _, posed = place_model(rng, model, ratio)
        dets, _ = cam.project_cam(posed)
        sols = solve_p3p(model, dets, cam, CONFIG)
        assert_solutions_admissible(sols, model, dets, cam, CONFIG)


def test_solutions_ordered_deterministically():
    rng = np.random.default_rng(74)
    cam = default_carm()
    model = random_triangle(rng, 20.0)
    _, posed = place_model(rng, model, GRID_129[40])
    dets, _ = cam.project_cam(posed)
    sols = solve_p3p(model, dets, cam, CONFIG)
    ratios = [s.ratio for s in sols]
    assert ratios == sorted(ratios)
    again = solve_p3p(model, dets, cam, CONFIG)
    assert len(again) == len(sols)
    for a, b in zip(sols, again):
        np.testing.assert_array_equal(a.pose.rotation, b.pose.rotation)
        assert (a.ratio, a.t2, a.t3) == (b.ratio, b.t2, b.t3)


def test_pixel_gate_tightens_solution_set():
    rng = np.random.default_rng(75)
    cam = default_carm()
    model = random_triangle(rng, 24.0)
    _, posed = place_model(rng, model, GRID_129[64])
    dets, _ = cam.project_cam(posed)
    loose = P3PConfig(ratios=GRID_129, pixel_tol=50.0)
    tight = solve_p3p(model, dets, cam, CONFIG)
    wide = solve_p3p(model, dets, cam, loose)
    assert len(wide) >= len(tight)
    assert all(s.reproj_px <= 0.5 + 1e-9 for s in tight)


def test_out_of_bounds_depth_yields_no_truth():
    rng = np.random.default_rng(76)
    cam = default_carm()
    model = random_triangle(rng, 20.0)
    pose, posed = place_model(rng, model, 0.45)  # outside [0.6, 1.0]
    dets, _ = cam.project_cam(posed)
    sols = solve_p3p(model, dets, cam, CONFIG)
    for s in sols:
        # anything returned must still satisfy the bounds, hence not truth
        assert s.ratio >= 0.6
        err = rotation_angle_deg(s.pose.rotation @ pose.rotation.T)
        assert err > 1e-3


def test_colinear_model_raises():
    cam = default_carm()
    model = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
    dets = np.array([[700.0, 700.0], [750.0, 700.0], [800.0, 700.0]])
    with pytest.raises(ColinearModel):
        solve_p3p(model, dets, cam, CONFIG)


def test_input_shape_validation():
    cam = default_carm()
    with pytest.raises(ValueError):
        solve_p3p(np.zeros((4, 3)), np.zeros((3, 2)), cam, CONFIG)
    with pytest.raises(ValueError):
        solve_p3p(np.eye(3) * 10, np.zeros((2, 2)), cam, CONFIG)


# ---------------------------------------------------------------------------
# batched grid solver
# ---------------------------------------------------------------------------

def _all_ordered_triples(n):
    out = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if len({i, j, k}) == 3:
                    out.append((i, j, k))
    return np.array(out, dtype=np.intp)


def test_grid_solver_matches_single_path():
    rng = np.random.default_rng(77)
    cam = default_carm()
    models = np.stack([random_triangle(rng, 22.0) for _ in range(4)])
    _, posed = place_model(rng, models[2], GRID_129[80])
    dets, _ = cam.project_cam(posed)
    extra = rng.uniform(200, 1300, size=(2, 2))
    all_dets = np.vstack([dets, extra])
    triples = _all_ordered_triples(len(all_dets))
    batch = solve_p3p_grid(models, all_dets, triples, cam, CONFIG)
    assert len(batch) > 0

    # candidates for model 2 with the identity triple must equal solve_p3p
    want = (batch.model_idx == 2) & np.all(batch.det_triples == [0, 1, 2], axis=1)
    sub = batch.subset(want)
    single = solve_p3p(models[2], dets, cam, CONFIG)
    assert len(sub) == len(single)
    for i, sol in enumerate(single):
        np.testing.assert_allclose(sub.rotations[i], sol.pose.rotation, atol=1e-12)
        assert sub.ratios[i] == sol.ratio
        assert sub.t2[i] == sol.t2 and sub.t3[i] == sol.t3


def test_grid_solver_enumeration_order():
    rng = np.random.default_rng(78)
    cam = default_carm()
    models = np.stack([random_triangle(rng, 22.0) for _ in range(2)])
    _, posed = place_model(rng, models[0], GRID_129[30])
    dets, _ = cam.project_cam(posed)
    triples = _all_ordered_triples(3)
    batch = solve_p3p_grid(models, dets, triples, cam, CONFIG)
    keys = list(
        zip(batch.model_idx.tolist(), batch.ratio_idx.tolist())
    )
    # model-major, and ratio non-decreasing within each (model, triple) run
    assert batch.model_idx.tolist() == sorted(batch.model_idx.tolist())


def test_grid_solver_skips_colinear_when_asked():
    cam = default_carm()
    good = np.array([[0.0, 0.0, 0.0], [20.0, 5.0, 0.0], [5.0, 18.0, -4.0]])
    bad = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0]])
    models = np.stack([bad, good])
    pose = RigidTransform(np.eye(3), np.array([10.0, 5.0, 800.0]))
    dets, _ = cam.project_cam(pose.apply(good))
    triples = np.array([[0, 1, 2]])
    with pytest.raises(ColinearModel):
        solve_p3p_grid(models, dets, triples, cam, CONFIG)
    batch = solve_p3p_grid(models, dets, triples, cam, CONFIG, skip_colinear=True)
    assert np.all(batch.model_idx == 1)
    assert len(batch) > 0


def test_candidate_set_subset_and_empty():
    empty = P3PCandidateSet.empty()
    assert len(empty) == 0
    assert empty.solutions() == []
