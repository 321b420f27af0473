"""Reconstruction tests on a synthetic two-patch bone surface.

Ground truth is known by construction: BBs sit exactly on surface
samples, and detections are exact projections (optionally jittered or
shuffled), so recovered points can be matched back by nearest neighbour.
"""
from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from fragtrack.detection import DetectionSet
from fragtrack.errors import DegenerateClusters, TooFewBBs
from fragtrack.geometry import AnatomicalFrame, RigidTransform
from fragtrack.reconstruct import (
    Constellation,
    SurfaceModel,
    candidate_two_view,
    label_constellations,
    reconstruct_bbs,
    resolve_three_view,
)
from helpers import view_ring


def sphere_patch(center, radius, theta_range, phi_range, n_theta, n_phi):
    th = np.linspace(*theta_range, n_theta)
    ph = np.linspace(*phi_range, n_phi)
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack(
        [
            np.sin(tt) * np.cos(pp),
            np.sin(tt) * np.sin(pp),
            np.cos(tt),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return center + radius * pts


def make_rig(jitter_px=0.0, seed=5, shuffle=True):
    """Surface + 8 on-surface BBs + 3 views with exact/jittered detections."""
    rng = np.random.default_rng(seed)
    wing = sphere_patch([50.0, 55.0, -10.0], 55.0, (0.4, 1.6), (0.3, 2.6), 28, 30)
    cup = sphere_patch([55.0, -35.0, 5.0], 28.0, (0.5, 2.4), (-0.4, 2.2), 22, 24)
    surface_pts = np.vstack([wing, cup])
    app = AnatomicalFrame(RigidTransform.identity("app").retag("app", "volume"))
    surface = SurfaceModel(surface_pts, app)

    ilium_bbs = wing[[110, 310, 505, 760]]
    frag_bbs = cup[[60, 200, 330, 455]]
    truth = np.vstack([ilium_bbs, frag_bbs])

    center = truth.mean(axis=0)
    cams = view_ring(center, [0.0, -25.0, 30.0])
    det_sets = []
    orders = []
    for vi, cam in enumerate(cams):
        pix = np.stack([cam.project(p) for p in truth])
        pix = pix + rng.normal(scale=jitter_px, size=pix.shape) if jitter_px else pix
        order = rng.permutation(len(pix)) if shuffle else np.arange(len(pix))
        det_sets.append(
            DetectionSet(pix[order], np.ones(len(pix)), view_id=str(vi))
        )
        orders.append(order)
    return surface, truth, ilium_bbs, frag_bbs, cams, det_sets, orders


def match_to_truth(recon, truth):
    """Nearest-truth distance per reconstructed point."""
    return cdist(recon, truth).min(axis=1)


# ---------------------------------------------------------------------------
# surface model / constellation types
# ---------------------------------------------------------------------------

def test_surface_distance_matches_brute_force():
    surface, *_ = make_rig()
    rng = np.random.default_rng(9)
    queries = rng.uniform(-50, 120, size=(40, 3))
    brute = cdist(queries, surface.points).min(axis=1)
    np.testing.assert_allclose(surface.distance(queries), brute, atol=1e-12)


def test_surface_validation():
    app = AnatomicalFrame(RigidTransform.identity())
    with pytest.raises(ValueError):
        SurfaceModel(np.zeros((3, 3)), app)


def test_constellation_validation():
    with pytest.raises(ValueError):
        Constellation("ilium", np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
    line = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [20.0, 0.0, 0.0], [31.0, 0.0, 0.0]])
    with pytest.raises(ValueError):
        Constellation("ilium", line)
    good = Constellation("fragment", np.array(
        [[0.0, 0.0, 0.0], [20.0, 0.0, 0.0], [0.0, 15.0, 0.0], [5.0, 5.0, 12.0]]
    ))
    assert len(good) == 4
    lengths = good.pairwise_lengths
    assert lengths.shape == (4, 4)
    np.testing.assert_allclose(lengths, lengths.T)
    assert lengths[0, 1] == pytest.approx(20.0)


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def test_exact_reconstruction_recovers_all_bbs():
    surface, truth, _, _, cams, det_sets, _ = make_rig()
    recon = reconstruct_bbs(det_sets, cams, surface)
    assert recon.shape == (8, 3)
    errs = match_to_truth(recon, truth)
    assert errs.max() < 1e-6


def test_reconstruction_invariant_to_detection_order():
    surface, truth, _, _, cams, det_a, _ = make_rig(seed=5)
    _, _, _, _, _, det_b, _ = make_rig(seed=6)  # different shuffles, same truth
    ra = reconstruct_bbs(det_a, cams, surface)
    rb = reconstruct_bbs(det_b, cams, surface)
    a_sorted = ra[np.lexsort(ra.T)]
    b_sorted = rb[np.lexsort(rb.T)]
    np.testing.assert_allclose(a_sorted, b_sorted, atol=1e-9)


def test_candidate_two_view_contains_truth_and_prunes_ghosts():
    surface, truth, _, _, cams, det_sets, orders = make_rig()
    cands = candidate_two_view(det_sets[0], det_sets[1], cams[0], cams[1], surface)
    n_pairs = len(det_sets[0]) * len(det_sets[1])
    assert 8 <= len(cands) < n_pairs
    # the true pairs (same underlying BB in both views) all survive
    inv0 = np.argsort(orders[0])
    inv1 = np.argsort(orders[1])
    true_pairs = {(int(inv0[b]), int(inv1[b])) for b in range(8)}
    got = {(c.p, c.q) for c in cands}
    assert true_pairs <= got


def test_noisy_reconstruction_within_2mm():
    surface, truth, _, _, cams, det_sets, _ = make_rig(jitter_px=0.5, seed=11)
    recon = reconstruct_bbs(det_sets, cams, surface)
    assert recon.shape == (8, 3)
    errs = match_to_truth(recon, truth)
    assert errs.max() <= 2.0
    assert np.sqrt(np.mean(errs**2)) <= 1.0


def test_occluded_bb_is_simply_missing():
    surface, truth, _, _, cams, det_sets, orders = make_rig()
    # drop the detection of BB 3 from view 0
    drop = int(np.argsort(orders[0])[3])
    keep = np.arange(len(det_sets[0])) != drop
    det_sets[0] = DetectionSet(
        det_sets[0].points[keep], det_sets[0].scores[keep], "0"
    )
    recon = reconstruct_bbs(det_sets, cams, surface)
    assert recon.shape == (7, 3)
    errs = cdist(truth, recon).min(axis=1)
    assert np.delete(errs, 3).max() < 1e-6
    assert errs[3] > 1.0  # BB 3 genuinely absent


def test_clutter_detections_are_rejected():
    surface, truth, _, _, cams, det_sets, _ = make_rig()
    rng = np.random.default_rng(13)
    noisy = []
    for det in det_sets:
        clutter = rng.uniform(100, 400, size=(3, 2))  # far corner of the panel
        noisy.append(
            DetectionSet(
                np.vstack([det.points, clutter]),
                np.concatenate([det.scores, np.full(3, 0.5)]),
                det.view_id,
            )
        )
    recon = reconstruct_bbs(noisy, cams, surface)
    assert recon.shape == (8, 3)
    assert match_to_truth(recon, truth).max() < 1e-6


def test_identical_cameras_produce_no_candidates():
    surface, truth, _, _, cams, det_sets, _ = make_rig()
    cands = candidate_two_view(det_sets[0], det_sets[0], cams[0], cams[0], surface)
    assert cands == []


def test_resolve_three_view_empty_candidates():
    surface, _, _, _, cams, det_sets, _ = make_rig()
    out = resolve_three_view(
        [], det_sets[0], det_sets[1], det_sets[2],
        cams[0], cams[1], cams[2], surface,
    )
    assert out.shape == (0, 3)


# ---------------------------------------------------------------------------
# labelling
# ---------------------------------------------------------------------------

def test_label_constellations_splits_and_labels():
    surface, truth, ilium_bbs, frag_bbs, *_ = make_rig()
    iliac_ref = np.array([50.0, 110.0, -10.0])  # above the wing
    rng = np.random.default_rng(17)
    shuffled = truth[rng.permutation(8)]
    ilium, fragment = label_constellations(shuffled, surface, "left", iliac_ref)
    assert ilium.label == "ilium" and fragment.label == "fragment"
    assert len(ilium) == 4 and len(fragment) == 4
    assert cdist(ilium.points, ilium_bbs).min(axis=1).max() < 1e-9
    assert cdist(fragment.points, frag_bbs).min(axis=1).max() < 1e-9


def test_label_constellations_discards_contralateral():
    surface, truth, ilium_bbs, frag_bbs, *_ = make_rig()
    mirrored = truth * np.array([-1.0, 1.0, 1.0])  # contralateral copies
    pts = np.vstack([truth, mirrored])
    ilium, fragment = label_constellations(
        pts, surface, "left", np.array([50.0, 110.0, -10.0])
    )
    assert len(ilium) == 4 and len(fragment) == 4
    assert (surface.lr_coordinate(ilium.points) > 0).all()
    assert (surface.lr_coordinate(fragment.points) > 0).all()


def test_label_constellations_too_few():
    surface, truth, *_ = make_rig()
    with pytest.raises(TooFewBBs):
        label_constellations(truth[:5], surface, "left", np.zeros(3))


def test_label_constellations_uneven_split_too_few():
    surface, *_ = make_rig()
    a = np.array([[40.0, 50.0, 0.0], [44.0, 52.0, 2.0], [47.0, 49.0, -2.0], [42.0, 55.0, 1.0]])
    b = np.array([[120.0, -40.0, 5.0], [124.0, -42.0, 3.0]])
    with pytest.raises(TooFewBBs):
        label_constellations(np.vstack([a, b]), surface, "left", np.zeros(3))


def test_label_constellations_degenerate_blob():
    surface, *_ = make_rig()
    rng = np.random.default_rng(19)
    blob = np.array([55.0, 10.0, 0.0]) + rng.uniform(-12, 12, size=(8, 3))
    with pytest.raises(DegenerateClusters):
        label_constellations(blob, surface, "left", np.zeros(3))


def test_label_constellations_side_validation():
    surface, truth, *_ = make_rig()
    with pytest.raises(ValueError):
        label_constellations(truth, surface, "up", np.zeros(3))
