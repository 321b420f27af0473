"""Single-view pose pipeline: ilium alignment then fragment pose.

The pipeline mirrors the two-stage intra-operative workflow.  First the
whole pelvis is aligned to the view through the ilium constellation:
P3P candidates over every 3-BB sub-constellation / ordered detection
triple / depth ratio are pruned anatomically (plausible patient
orientation, original fragment BBs projecting near detections), the
survivor best matching the image under a point-splat similarity is
refined against its implied BB matches.  Second, the relocated fragment
is posed from the detections left over after removing ilium matches and
far-field points, pruning candidates by the plausibility of the implied
relative motion, and refining with a translation-magnitude regulariser.

All poses map volume coordinates into the C-arm frame of the supplied
camera; extrinsics are never used (single uncalibrated view).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np
from scipy.optimize import least_squares

from .detection import DetectionSet
from .errors import InsufficientMatches, TooFewDetections
from .geometry import (
    AnatomicalFrame,
    CArmCamera,
    LceLandmarks,
    RigidTransform,
    euler_decompose_batch,
    lce_angle,
    relative_fragment_pose,
    rotation_angle_deg,
    rotation_from_rotvec,
)
from .p3p import P3PCandidateSet, P3PConfig, solve_p3p_grid
from .reconstruct import Constellation, SurfaceModel

log = logging.getLogger(__name__)

# Refinement box bounds: per-axis rotation (deg) about the camera X/Y/Z
# axes and translation (mm) along them.  X/Y are the in-plane axes, Z the
# weakly observable source-detector direction, hence its wider windows.
DEFAULT_ROT_BOUNDS_DEG = (15.0, 15.0, 30.0)
DEFAULT_TRANS_BOUNDS_MM = (50.0, 50.0, 100.0)

_RATIO_STEP = 0.003125


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IliumStageConfig:
    """Ilium stage: candidate grid, anatomical gates, match thresholds."""

    ratio_start: float = 0.6
    ratio_step: float = _RATIO_STEP
    ratio_count: int = 129
    # looser than the solver default: the constellation model comes from
    # a reconstruction and detections carry jitter, so relative length
    # errors of a few percent are expected
    epsilon: float = 0.04
    t_bounds: tuple[float, float] = (0.6, 1.0)
    pixel_tol: float = 3.0
    euler_gate_deg: float = 60.0
    frag_reproj_gate_px: float = 200.0
    min_frag_in_image: int = 3
    match_gate_px: float = 10.5
    min_matches: int = 2
    rot_bounds_deg: tuple[float, float, float] = DEFAULT_ROT_BOUNDS_DEG
    trans_bounds_mm: tuple[float, float, float] = DEFAULT_TRANS_BOUNDS_MM
    similarity_downsample: int = 12
    similarity_surface_samples: int = 64

    def __post_init__(self) -> None:
        if self.ratio_count < 1 or self.ratio_step <= 0.0:
            raise ValueError("ratio grid must be non-empty with positive step")

    @property
    def ratio_grid(self) -> tuple[float, ...]:
        return tuple(
            self.ratio_start + self.ratio_step * k for k in range(self.ratio_count)
        )

    def p3p_config(self) -> P3PConfig:
        return P3PConfig(
            ratios=self.ratio_grid,
            epsilon=self.epsilon,
            t_bounds=self.t_bounds,
            pixel_tol=self.pixel_tol,
        )


@dataclass(frozen=True)
class FragmentStageConfig:
    """Fragment stage: local ratio grid, relative-motion gates, matching."""

    ratio_step: float = _RATIO_STEP
    ratio_half_count: int = 16  # grid is r_hat +/- k*step, k = 0..half_count
    # Fragment baselines are short, so relative length error from model and
    # detection noise runs higher than on the ilium, and near-tangent ray
    # geometry occasionally needs far more headroom still.  The stage runs
    # tight gates first and retries once with the fallback gates when the
    # tight attempt cannot account for every fragment BB.
    epsilon: float = 0.01
    pixel_tol: float = 2.0
    fallback_epsilon: float | None = 0.05
    fallback_pixel_tol: float = 3.0
    t_bounds: tuple[float, float] = (0.6, 1.0)
    rot_gate_deg: float = 60.0
    trans_gate_mm: float = 30.0
    det_prune_gate_px: float = 200.0
    match_gate_px: float = 10.5
    min_matches: int = 3
    regularization_weight: float = 1e-4  # per mm^2
    rot_bounds_deg: tuple[float, float, float] = DEFAULT_ROT_BOUNDS_DEG
    trans_bounds_mm: tuple[float, float, float] = DEFAULT_TRANS_BOUNDS_MM

    def ratio_grid(self, r_hat: float) -> tuple[float, ...]:
        """Symmetric grid about ``r_hat`` clipped to the depth bounds."""
        lo, hi = self.t_bounds
        grid = [
            r_hat + self.ratio_step * k
            for k in range(-self.ratio_half_count, self.ratio_half_count + 1)
        ]
        return tuple(r for r in grid if lo <= r <= hi)

    def p3p_config(
        self,
        r_hat: float,
        epsilon: float | None = None,
        pixel_tol: float | None = None,
    ) -> P3PConfig:
        grid = self.ratio_grid(r_hat)
        if not grid:
            raise ValueError("estimated fragment depth is outside t_bounds")
        return P3PConfig(
            ratios=grid,
            epsilon=self.epsilon if epsilon is None else epsilon,
            t_bounds=self.t_bounds,
            pixel_tol=self.pixel_tol if pixel_tol is None else pixel_tol,
        )


@dataclass(frozen=True)
class ScenePriors:
    """Pre-operative knowledge available to the single-view pipeline."""

    ilium: Constellation
    fragment: Constellation
    surface: SurfaceModel
    landmarks: LceLandmarks

    @property
    def app(self) -> AnatomicalFrame:
        return self.surface.app


@dataclass
class StageCounts:
    """Candidate counts through a pruning cascade."""

    before: int = 0
    after_p3p: int = 0
    after_filter: int = 0


@dataclass
class IliumStageResult:
    status: str  # "success" | "failed_ilium"
    pose: RigidTransform | None
    matches: list[tuple[int, int]]  # (ilium BB index, detection index)
    counts: StageCounts
    similarity: float = float("nan")


@dataclass
class FragmentStageResult:
    status: str  # "success" | "failed_fragment"
    pose: RigidTransform | None
    matches: list[tuple[int, int]]  # (fragment BB index, original det index)
    counts: StageCounts


@dataclass
class FragmentPoseEstimate:
    """End-to-end single-view result.

    ``delta_app`` maps pre-osteotomy fragment positions (APP frame) to
    their post-relocation positions; it is only set on success.
    """

    status: str  # "success" | "failed_ilium" | "failed_fragment"
    delta_app: RigidTransform | None
    ilium_pose: RigidTransform | None
    fragment_pose: RigidTransform | None
    n_ilium_matched: int
    n_frag_matched: int
    lce_deg: float | None
    ilium_counts: StageCounts
    fragment_counts: StageCounts
    timings: dict[str, float] = field(default_factory=dict)
    # (model BB index, detection index) pairs behind the two poses
    ilium_matches: list[tuple[int, int]] = field(default_factory=list)
    fragment_matches: list[tuple[int, int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# counting and reference pose
# ---------------------------------------------------------------------------

def count_max_candidates(n_detections: int, n_ratios: int) -> int:
    """Worst-case candidate count: C(4,3) * P(n, 3) * n_ratios.

    Raises:
        TooFewDetections: fewer than 3 detections.
    """
    if n_detections < 3:
        raise TooFewDetections(f"{n_detections} detections; need at least 3")
    if n_ratios < 1:
        raise ValueError("need at least one ratio")
    perms = n_detections * (n_detections - 1) * (n_detections - 2)
    return 4 * perms * n_ratios


def reference_ap_pose(camera: CArmCamera) -> RigidTransform:
    """Nominal APP-to-C-arm pose for a supine patient under an AP view.

    The anterior axis points source-to-detector, the superior axis up
    the image (against increasing rows), and left-right completes the
    right-handed frame.  Translation centres the patient at 3/4 SDD;
    only the orientation is used by the pruning gates.
    """
    ap = camera.depth_axis
    is_ = -camera.detector_row_dir
    lr = np.cross(is_, ap)
    rotation = np.column_stack([lr, is_, ap])
    translation = camera.source + 0.75 * camera.sdd * ap
    return RigidTransform(rotation, translation, "app", "carm")


# ---------------------------------------------------------------------------
# candidate generation and anatomical pruning
# ---------------------------------------------------------------------------

def _sub_triples(constellation: Constellation) -> np.ndarray:
    idx = np.array(list(combinations(range(len(constellation)), 3)), dtype=np.intp)
    return constellation.points[idx]


_DEDUP_ROT_DEG = 1.0
_DEDUP_TRANS_MM = 2.0


def _fold_anchor_solves(
    cands: P3PCandidateSet,
    base: np.ndarray,
) -> P3PCandidateSet:
    """Collapse duplicate solves of one correspondence across anchors.

    ``general_prune`` solves every sub-triple three times, once with
    each point depth-anchored on the grid, so a correspondence whose
    first-anchor legs run tangent to a length sphere is still recovered
    through another anchor.  A healthy correspondence then shows up to
    three times with nearly identical poses; within each (sub-triple,
    correspondence) group, solves within the merge tolerances collapse
    to the lowest-residual one, and the bookkeeping is rewritten in
    terms of the canonical sorted triples.  Genuine ratio-grid
    neighbours survive the merge because one grid step displaces the
    pose by more than the translation tolerance.
    """
    if len(cands) == 0:
        return cands
    n_base = len(base)
    rot_id, canon = np.divmod(cands.model_idx, n_base)
    trips = cands.det_triples
    k_idx = np.arange(len(cands))
    canon_trips = np.empty_like(trips)
    for q in range(3):
        canon_trips[:, q] = trips[k_idx, (q - rot_id) % 3]

    # process each group in residual order with a precomputed pairwise
    # proximity matrix; angle <= tol iff trace(Ra Rb^T) >= 1 + 2 cos(tol)
    order = np.lexsort(
        (cands.residuals, canon_trips[:, 2], canon_trips[:, 1],
         canon_trips[:, 0], canon)
    )
    sorted_keys = np.column_stack(
        [canon[order], canon_trips[order]]
    )
    starts = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
    bounds = np.concatenate([[0], starts, [len(order)]])
    keep = np.ones(len(cands), dtype=bool)
    trace_gate = 1.0 + 2.0 * np.cos(np.radians(_DEDUP_ROT_DEG))
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        if len(idx) < 2:
            continue
        rots = cands.rotations[idx]
        trans = cands.translations[idx]
        traces = np.einsum("aij,bij->ab", rots, rots)
        d2 = ((trans[:, None, :] - trans[None, :, :]) ** 2).sum(axis=2)
        prox = (traces >= trace_gate) & (d2 <= _DEDUP_TRANS_MM**2)
        kept: list[int] = []
        for g in range(len(idx)):
            if kept and prox[g, kept].any():
                keep[idx[g]] = False
            else:
                kept.append(g)

    out = cands.subset(keep)
    out.model_idx = canon[keep]
    out.det_triples = canon_trips[keep]
    return out


def general_prune(
    constellation: Constellation,
    dets: DetectionSet,
    camera: CArmCamera,
    p3p_config: P3PConfig,
    pose_filter=None,
) -> tuple[P3PCandidateSet, StageCounts]:
    """Enumerate and prune P3P candidates for one constellation.

    Every 3-BB sub-constellation is paired with every ordered detection
    triple and swept over the ratio grid, anchoring each of its three
    points in turn (see :func:`_fold_anchor_solves`); ``pose_filter`` (a
    vectorised predicate over a :class:`P3PCandidateSet`) then removes
    candidates whose pose is implausible.

    Raises:
        TooFewDetections: fewer than 3 detections.
    """
    n = len(dets)
    counts = StageCounts(before=count_max_candidates(n, len(p3p_config.ratios)))
    models = _sub_triples(constellation)
    anchors = np.concatenate(
        [models, np.roll(models, -1, axis=1), np.roll(models, -2, axis=1)]
    )
    triples = np.array(list(permutations(range(n), 3)), dtype=np.intp)
    cands = solve_p3p_grid(
        anchors, dets.points, triples, camera, p3p_config, skip_colinear=True
    )
    cands = _fold_anchor_solves(cands, models)
    counts.after_p3p = len(cands)
    if pose_filter is not None and len(cands) > 0:
        mask = np.asarray(pose_filter(cands), dtype=bool)
        cands = cands.subset(mask)
    counts.after_filter = len(cands)
    return cands, counts


def _ilium_anatomical_mask(
    cands: P3PCandidateSet,
    reference: RigidTransform,
    app: AnatomicalFrame,
    frag_points: np.ndarray,
    dets: DetectionSet,
    camera: CArmCamera,
    config: IliumStageConfig,
) -> np.ndarray:
    """Vectorised anatomical gate over a candidate set."""
    k = len(cands)
    if k == 0:
        return np.zeros(0, dtype=bool)
    r_av = app.t_app_to_volume.rotation
    dev = np.einsum(
        "ji,kjl,lm->kim", reference.rotation, cands.rotations, r_av
    )
    angles, locked = euler_decompose_batch(dev)
    ok_euler = ~locked & np.all(np.abs(angles) <= config.euler_gate_deg, axis=1)

    posed = (
        np.einsum("kij,fj->kfi", cands.rotations, frag_points)
        + cands.translations[:, None, :]
    )
    pixels, depths = camera.project_cam(posed)
    visible = (depths > 0.0) & camera.in_image(pixels)
    n_in = visible.sum(axis=1)

    diff = pixels[:, :, None, :] - dets.points[None, None, :, :]
    with np.errstate(invalid="ignore"):
        nearest = np.sqrt((diff**2).sum(axis=3)).min(axis=2)  # (K, F)
    nearest = np.where(visible, nearest, np.inf)
    smallest3 = np.sort(nearest, axis=1)[:, :3]
    with np.errstate(invalid="ignore"):
        mean3 = smallest3.mean(axis=1)
    ok_near = np.isfinite(mean3) & (mean3 <= config.frag_reproj_gate_px)

    return ok_euler & (n_in >= config.min_frag_in_image) & ok_near


def prune_ilium_anatomical(
    pose: RigidTransform,
    reference: RigidTransform,
    app: AnatomicalFrame,
    frag_points: np.ndarray,
    dets: DetectionSet,
    camera: CArmCamera,
    config: IliumStageConfig,
) -> bool:
    """True iff a single candidate pose passes the anatomical gates."""
    cands = P3PCandidateSet(
        rotations=pose.rotation[None],
        translations=pose.translation[None],
        model_idx=np.zeros(1, dtype=np.intp),
        det_triples=np.zeros((1, 3), dtype=np.intp),
        ratio_idx=np.zeros(1, dtype=np.intp),
        ratios=np.zeros(1),
        t2=np.zeros(1),
        t3=np.zeros(1),
        residuals=np.zeros(1),
        reproj_px=np.zeros(1),
    )
    return bool(
        _ilium_anatomical_mask(cands, reference, app, frag_points, dets, camera, config)[0]
    )


# ---------------------------------------------------------------------------
# splat similarity
# ---------------------------------------------------------------------------

def _downsample(image: np.ndarray, factor: int) -> np.ndarray:
    rows = image.shape[0] - image.shape[0] % factor
    cols = image.shape[1] - image.shape[1] % factor
    view = image[:rows, :cols].reshape(
        rows // factor, factor, cols // factor, factor
    )
    return view.mean(axis=(1, 3))


def _splat_scores(
    rotations: np.ndarray,
    translations: np.ndarray,
    model_points: np.ndarray,
    weights: np.ndarray,
    camera: CArmCamera,
    image: np.ndarray,
    downsample: int,
    sigma: float = 1.2,
    chunk: int = 256,
) -> np.ndarray:
    """Negative NCC between pose-splatted model points and the image.

    Splats are Gaussian blobs at the downsampled projections of the
    model points; the image is inverted so that dark (attenuating)
    structures correlate positively with splat mass.  Lower is better.
    """
    target = 1.0 - _downsample(np.asarray(image, dtype=np.float64), downsample)
    target = target - target.mean()
    t_norm = float(np.sqrt((target**2).sum()))
    h, w = target.shape
    if t_norm <= 0.0:
        return np.zeros(len(rotations))

    radius = max(1, int(np.ceil(2.5 * sigma)))
    oy, ox = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    kernel = np.exp(-(ox**2 + oy**2) / (2.0 * sigma**2)).ravel()
    n_off = kernel.size

    scores = np.empty(len(rotations))
    for start in range(0, len(rotations), chunk):
        rot = rotations[start : start + chunk]
        tr = translations[start : start + chunk]
        kk = len(rot)
        posed = np.einsum("kij,pj->kpi", rot, model_points) + tr[:, None, :]
        pixels, depths = camera.project_cam(posed)
        centers = pixels / downsample
        valid = (
            (depths > 0.0)
            & np.isfinite(centers).all(axis=2)
            & (centers[..., 0] > -radius)
            & (centers[..., 0] < w + radius)
            & (centers[..., 1] > -radius)
            & (centers[..., 1] < h + radius)
        )
        cx = np.where(valid, np.round(centers[..., 0]), 0).astype(np.intp)
        cy = np.where(valid, np.round(centers[..., 1]), 0).astype(np.intp)
        wts = np.where(valid, weights[None, :], 0.0)

        tx = cx[:, :, None] + ox.ravel()[None, None, :]
        ty = cy[:, :, None] + oy.ravel()[None, None, :]
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        k_idx = np.broadcast_to(
            np.arange(kk)[:, None, None], tx.shape
        )
        flat = (k_idx * h + np.clip(ty, 0, h - 1)) * w + np.clip(tx, 0, w - 1)
        vals = wts[:, :, None] * kernel[None, None, :] * inside
        canvas = np.zeros(kk * h * w)
        np.add.at(canvas, flat.ravel(), vals.ravel())
        renders = canvas.reshape(kk, h * w)
        renders = renders - renders.mean(axis=1, keepdims=True)
        norms = np.sqrt((renders**2).sum(axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            ncc = renders @ target.ravel() / (norms * t_norm)
        scores[start : start + kk] = np.where(norms > 0.0, -ncc, 0.0)
    return scores


def splat_similarity(
    pose: RigidTransform,
    model_points: np.ndarray,
    weights: np.ndarray,
    camera: CArmCamera,
    image: np.ndarray,
    downsample: int = 12,
) -> float:
    """Similarity score of one pose (lower is better); see _splat_scores."""
    return float(
        _splat_scores(
            pose.rotation[None],
            pose.translation[None],
            np.asarray(model_points, dtype=np.float64),
            np.asarray(weights, dtype=np.float64),
            camera,
            image,
            downsample,
        )[0]
    )


def _similarity_model(
    priors: ScenePriors, config: IliumStageConfig
) -> tuple[np.ndarray, np.ndarray]:
    surf = priors.surface.points
    n_s = config.similarity_surface_samples
    step = max(1, len(surf) // n_s)
    samples = surf[::step][:n_s]
    pts = np.vstack([priors.ilium.points, samples])
    weights = np.concatenate(
        [np.full(len(priors.ilium.points), 1.0), np.full(len(samples), 0.25)]
    )
    return pts, weights


# ---------------------------------------------------------------------------
# matching and refinement
# ---------------------------------------------------------------------------

def match_by_reprojection(
    pose: RigidTransform,
    points: np.ndarray,
    dets: DetectionSet,
    camera: CArmCamera,
    gate_px: float,
) -> list[tuple[int, int]]:
    """Greedy one-to-one BB/detection matching under a pixel gate.

    Pairs are accepted in ascending reprojection distance (ties break on
    BB index then detection index); each BB and each detection is used
    at most once.  Returned in acceptance order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0 or len(dets) == 0:
        return []
    pixels, depths = camera.project_cam(pose.apply(pts))
    valid = (depths > 0.0) & np.isfinite(pixels).all(axis=1)
    dist = np.full((len(pts), len(dets)), np.inf)
    if np.any(valid):
        diff = pixels[valid][:, None, :] - dets.points[None, :, :]
        dist[valid] = np.sqrt((diff**2).sum(axis=2))
    order = np.argsort(dist, axis=None, kind="stable")
    used_bb: set[int] = set()
    used_det: set[int] = set()
    out: list[tuple[int, int]] = []
    for flat in order:
        b, d = divmod(int(flat), len(dets))
        if dist[b, d] > gate_px or not np.isfinite(dist[b, d]):
            break
        if b in used_bb or d in used_det:
            continue
        used_bb.add(b)
        used_det.add(d)
        out.append((b, d))
    return out


def _mean_match_distance(
    pose: RigidTransform,
    points: np.ndarray,
    dets: DetectionSet,
    camera: CArmCamera,
    matches: list[tuple[int, int]],
) -> float:
    if not matches:
        return float("inf")
    bb = np.array([m[0] for m in matches])
    dd = np.array([m[1] for m in matches])
    pixels, _ = camera.project_cam(pose.apply(np.asarray(points)[bb]))
    return float(np.linalg.norm(pixels - dets.points[dd], axis=1).mean())


def refine_pose(
    initial: RigidTransform,
    model_points: np.ndarray,
    image_points: np.ndarray,
    camera: CArmCamera,
    rot_bounds_deg: tuple[float, float, float] = DEFAULT_ROT_BOUNDS_DEG,
    trans_bounds_mm: tuple[float, float, float] = DEFAULT_TRANS_BOUNDS_MM,
    regularization: tuple[float, RigidTransform, AnatomicalFrame] | None = None,
) -> RigidTransform:
    """Bounded reprojection refinement of a pose.

    Minimises the reprojection residuals of ``model_points`` against
    ``image_points`` over a 6-vector tangent parametrisation (rotation
    about the posed centroid and translation, both along the camera
    axes) inside a box.  With ``regularization = (weight, ilium_pose,
    app)`` the translation of the implied relative fragment motion is
    penalised as ``sqrt(weight) * ||trans||``.

    The objective never increases: if the optimiser cannot improve the
    initial pose, the initial pose is returned.

    Raises:
        InsufficientMatches: fewer than 2 correspondences.  Exactly 2 is
            a pass-through (too few for 6 DoF): the initial pose is
            returned unchanged.
    """
    model = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(image_points, dtype=np.float64).reshape(-1, 2)
    if len(model) != len(target):
        raise ValueError("model and image point counts differ")
    if len(model) < 2:
        raise InsufficientMatches(f"{len(model)} matches; need at least 2")
    if len(model) == 2:
        return initial

    axes = np.stack(
        [camera.detector_col_dir, camera.detector_row_dir, camera.depth_axis]
    )
    center = initial.apply(model).mean(axis=0)
    rot_rad = np.radians(np.asarray(rot_bounds_deg, dtype=np.float64))
    trans = np.asarray(trans_bounds_mm, dtype=np.float64)
    lower = np.concatenate([-rot_rad, -trans])
    upper = np.concatenate([rot_rad, trans])

    if regularization is not None:
        weight, ilium_pose, app = regularization
        sqrt_w = np.sqrt(weight)
        pre = app.t_app_to_volume.inverse().retag(None, None) @ ilium_pose.inverse().retag(None, None)
        post = app.t_app_to_volume.retag(None, None)

    def build(x: np.ndarray) -> RigidTransform:
        rotvec = x[:3] @ axes
        shift = x[3:] @ axes
        r_d = rotation_from_rotvec(rotvec)
        return RigidTransform(
            r_d @ initial.rotation,
            r_d @ (initial.translation - center) + center + shift,
        )

    def residuals(x: np.ndarray) -> np.ndarray:
        pose = build(x)
        pixels, depths = camera.project_cam(pose.apply(model))
        res = (pixels - target).ravel()
        res = np.where(np.isfinite(res) & (np.repeat(depths, 2) > 0.0), res, 1e4)
        if regularization is None:
            return res
        delta = pre @ pose @ post
        return np.concatenate([res, sqrt_w * delta.translation])

    result = least_squares(
        residuals,
        np.zeros(6),
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        xtol=1e-12,
        ftol=1e-12,
        gtol=1e-12,
    )
    initial_cost = 0.5 * float(np.sum(residuals(np.zeros(6)) ** 2))
    if result.cost > initial_cost:
        return initial
    return build(result.x)


# ---------------------------------------------------------------------------
# ilium stage
# ---------------------------------------------------------------------------

def estimate_ilium(
    dets: DetectionSet,
    camera: CArmCamera,
    priors: ScenePriors,
    image: np.ndarray,
    config: IliumStageConfig | None = None,
) -> IliumStageResult:
    """Align the whole pelvis to the view through the ilium constellation."""
    config = config or IliumStageConfig()
    counts = StageCounts()
    if len(dets) < 3:
        log.info("ilium stage: only %d detections", len(dets))
        return IliumStageResult("failed_ilium", None, [], counts)

    reference = reference_ap_pose(camera)
    frag_points = priors.fragment.points

    def anatomical(cands: P3PCandidateSet) -> np.ndarray:
        return _ilium_anatomical_mask(
            cands, reference, priors.app, frag_points, dets, camera, config
        )

    cands, counts = general_prune(
        priors.ilium, dets, camera, config.p3p_config(), anatomical
    )
    if len(cands) == 0:
        return IliumStageResult("failed_ilium", None, [], counts)

    sim_points, sim_weights = _similarity_model(priors, config)
    scores = _splat_scores(
        cands.rotations,
        cands.translations,
        sim_points,
        sim_weights,
        camera,
        image,
        config.similarity_downsample,
    )
    best = int(np.argmin(scores))
    pose = RigidTransform(cands.rotations[best], cands.translations[best])

    ilium_points = priors.ilium.points
    implied = match_by_reprojection(
        pose, ilium_points, dets, camera, config.match_gate_px
    )
    if len(implied) >= 3:
        bb = np.array([m[0] for m in implied])
        dd = np.array([m[1] for m in implied])
        pose = refine_pose(
            pose, ilium_points[bb], dets.points[dd], camera,
            config.rot_bounds_deg, config.trans_bounds_mm,
        )

    matches = match_by_reprojection(
        pose, ilium_points, dets, camera, config.match_gate_px
    )
    if len(matches) < config.min_matches:
        return IliumStageResult(
            "failed_ilium", None, matches, counts, float(scores[best])
        )
    if len(matches) >= 3:
        bb = np.array([m[0] for m in matches])
        dd = np.array([m[1] for m in matches])
        pose = refine_pose(
            pose, ilium_points[bb], dets.points[dd], camera,
            config.rot_bounds_deg, config.trans_bounds_mm,
        )
    return IliumStageResult("success", pose, matches, counts, float(scores[best]))


# ---------------------------------------------------------------------------
# fragment stage
# ---------------------------------------------------------------------------

def _relative_motion_mask(
    cands: P3PCandidateSet,
    ilium_pose: RigidTransform,
    app: AnatomicalFrame,
    config: FragmentStageConfig,
) -> np.ndarray:
    """Gate on the plausibility of the implied fragment motion."""
    if len(cands) == 0:
        return np.zeros(0, dtype=bool)
    t_av = app.t_app_to_volume
    pre_r = t_av.rotation.T @ ilium_pose.rotation.T
    pre_t = t_av.rotation.T @ (
        -ilium_pose.rotation.T @ ilium_pose.translation - t_av.translation
    )
    # delta = T_va o ilium^-1 o cand o T_av, computed batched
    r_mid = np.einsum("ij,kjl->kil", pre_r, cands.rotations)
    t_mid = np.einsum("ij,kj->ki", pre_r, cands.translations) + pre_t
    r_delta = np.einsum("kil,lm->kim", r_mid, t_av.rotation)
    t_delta = np.einsum("kil,l->ki", r_mid, t_av.translation) + t_mid
    angles = rotation_angle_deg(r_delta)
    norms = np.linalg.norm(t_delta, axis=1)
    return (angles <= config.rot_gate_deg) & (norms <= config.trans_gate_mm)


def estimate_fragment(
    dets: DetectionSet,
    camera: CArmCamera,
    priors: ScenePriors,
    ilium_result: IliumStageResult,
    config: FragmentStageConfig | None = None,
) -> FragmentStageResult:
    """Pose the relocated fragment given a successful ilium alignment.

    Runs the tight gates first.  If that attempt fails, or succeeds
    without matching every fragment BB, and fallback gates are
    configured, retries once with them and keeps the better outcome.
    """
    config = config or FragmentStageConfig()
    result = _fragment_attempt(
        dets, camera, priors, ilium_result, config,
        config.epsilon, config.pixel_tol,
    )
    complete = (
        result.status == "success"
        and len(result.matches) >= len(priors.fragment.points)
    )
    if (
        not complete
        and config.fallback_epsilon is not None
        and config.fallback_epsilon > config.epsilon
    ):
        log.info("fragment stage: retrying at epsilon %.3f", config.fallback_epsilon)
        wide = _fragment_attempt(
            dets, camera, priors, ilium_result, config,
            config.fallback_epsilon, config.fallback_pixel_tol,
        )
        if wide.status == "success" or result.status != "success":
            result = wide
    return result


def _fragment_attempt(
    dets: DetectionSet,
    camera: CArmCamera,
    priors: ScenePriors,
    ilium_result: IliumStageResult,
    config: FragmentStageConfig,
    epsilon: float,
    pixel_tol: float,
) -> FragmentStageResult:
    counts = StageCounts()
    ilium_pose = ilium_result.pose
    if ilium_pose is None:
        raise ValueError("fragment stage requires a successful ilium result")

    frag_model = priors.fragment.points
    proj, depths = camera.project_cam(ilium_pose.apply(frag_model))
    proj_ok = (depths > 0.0) & np.isfinite(proj).all(axis=1)
    matched_dets = {d for _, d in ilium_result.matches}
    keep_idx = []
    for i in range(len(dets)):
        if i in matched_dets:
            continue
        if not np.any(proj_ok):
            continue
        dist = np.linalg.norm(proj[proj_ok] - dets.points[i], axis=1).min()
        if dist <= config.det_prune_gate_px:
            keep_idx.append(i)
    keep_idx = np.array(keep_idx, dtype=np.intp)
    if len(keep_idx) < 3:
        return FragmentStageResult("failed_fragment", None, [], counts)
    sub = DetectionSet(dets.points[keep_idx], dets.scores[keep_idx], dets.view_id)

    r_hat = float(camera.depth_ratio_cam(ilium_pose.apply(frag_model.mean(axis=0))))
    try:
        p3p_cfg = config.p3p_config(r_hat, epsilon, pixel_tol)
    except ValueError:
        return FragmentStageResult("failed_fragment", None, [], counts)

    def motion_gate(cands: P3PCandidateSet) -> np.ndarray:
        return _relative_motion_mask(cands, ilium_pose, priors.app, config)

    cands, counts = general_prune(priors.fragment, sub, camera, p3p_cfg, motion_gate)
    if len(cands) == 0:
        return FragmentStageResult("failed_fragment", None, [], counts)

    # Select by match count, then by the same regularised objective the
    # refinement minimises; with few detections several correspondences
    # can fit the pixels equally well and the motion prior breaks the tie.
    t_va = priors.app.t_app_to_volume.inverse().retag(None, None)
    t_av = priors.app.t_app_to_volume.retag(None, None)
    il_inv = ilium_pose.inverse().retag(None, None)
    best_key = None
    best_pose = None
    best_matches: list[tuple[int, int]] = []
    for k in range(len(cands)):
        pose_k = RigidTransform(cands.rotations[k], cands.translations[k])
        matches = match_by_reprojection(
            pose_k, frag_model, sub, camera, config.match_gate_px
        )
        mean_d = _mean_match_distance(pose_k, frag_model, sub, camera, matches)
        delta_k = t_va @ il_inv @ pose_k @ t_av
        cost = len(matches) * mean_d**2 + config.regularization_weight * float(
            delta_k.translation @ delta_k.translation
        )
        key = (-len(matches), cost, k)
        if best_key is None or key < best_key:
            best_key = key
            best_pose = pose_k
            best_matches = matches

    if len(best_matches) < config.min_matches:
        return FragmentStageResult("failed_fragment", None, [], counts)

    bb = np.array([m[0] for m in best_matches])
    dd = np.array([m[1] for m in best_matches])
    pose = refine_pose(
        best_pose,
        frag_model[bb],
        sub.points[dd],
        camera,
        config.rot_bounds_deg,
        config.trans_bounds_mm,
        regularization=(config.regularization_weight, ilium_pose, priors.app),
    )
    matches_original = [(int(b), int(keep_idx[d])) for b, d in best_matches]
    return FragmentStageResult("success", pose, matches_original, counts)


# ---------------------------------------------------------------------------
# end-to-end single view
# ---------------------------------------------------------------------------

def estimate_single_view(
    image: np.ndarray,
    camera: CArmCamera,
    priors: ScenePriors,
    detections: DetectionSet | None = None,
    detector_config=None,
    ilium_config: IliumStageConfig | None = None,
    fragment_config: FragmentStageConfig | None = None,
) -> FragmentPoseEstimate:
    """Recover the relocated-fragment pose from a single fluoroscopy view.

    When ``detections`` is omitted the BB detector runs on ``image``
    with ``detector_config``.
    """
    timings: dict[str, float] = {}
    t_total = time.perf_counter()

    if detections is None:
        from .detection import detect_bbs_in_image

        if detector_config is None:
            raise ValueError("detector_config required when detections are not given")
        t0 = time.perf_counter()
        detections = detect_bbs_in_image(image, detector_config)
        timings["detect"] = time.perf_counter() - t0
    else:
        timings["detect"] = 0.0

    t0 = time.perf_counter()
    ilium = estimate_ilium(detections, camera, priors, image, ilium_config)
    timings["ilium"] = time.perf_counter() - t0

    if ilium.status != "success":
        timings["total"] = time.perf_counter() - t_total
        return FragmentPoseEstimate(
            status="failed_ilium",
            delta_app=None,
            ilium_pose=None,
            fragment_pose=None,
            n_ilium_matched=len(ilium.matches),
            n_frag_matched=0,
            lce_deg=None,
            ilium_counts=ilium.counts,
            fragment_counts=StageCounts(),
            timings=timings,
            ilium_matches=list(ilium.matches),
        )

    t0 = time.perf_counter()
    fragment = estimate_fragment(detections, camera, priors, ilium, fragment_config)
    timings["fragment"] = time.perf_counter() - t0

    ilium_pose = ilium.pose.retag("volume", "carm")
    if fragment.status != "success":
        timings["total"] = time.perf_counter() - t_total
        return FragmentPoseEstimate(
            status="failed_fragment",
            delta_app=None,
            ilium_pose=ilium_pose,
            fragment_pose=None,
            n_ilium_matched=len(ilium.matches),
            n_frag_matched=0,
            lce_deg=None,
            ilium_counts=ilium.counts,
            fragment_counts=fragment.counts,
            timings=timings,
            ilium_matches=list(ilium.matches),
        )

    fragment_pose = fragment.pose.retag("volume", "carm")
    delta = relative_fragment_pose(ilium_pose, fragment_pose, priors.app)
    lce = lce_angle(delta, priors.landmarks)
    timings["total"] = time.perf_counter() - t_total
    return FragmentPoseEstimate(
        status="success",
        delta_app=delta,
        ilium_pose=ilium_pose,
        fragment_pose=fragment_pose,
        n_ilium_matched=len(ilium.matches),
        n_frag_matched=len(fragment.matches),
        lce_deg=lce,
        ilium_counts=ilium.counts,
        fragment_counts=fragment.counts,
        timings=timings,
        ilium_matches=list(ilium.matches),
        fragment_matches=list(fragment.matches),
    )
