"""Three-view BB reconstruction and constellation labelling.

Detections carry no identity, so correspondences are recovered
geometrically: every cross-view detection pair is triangulated and kept
only if it lands near the patient's bone surface (segmented
pre-operatively), then the surviving two-view candidates are greedily
confirmed against the third view in order of reprojection distance.
Confirmed points are split into the ilium and fragment constellations by
2-means clustering after discarding contralateral-side points.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import cKDTree

from .detection import DetectionSet
from .errors import DegenerateClusters, RankDeficient, TooFewBBs
from .geometry import AnatomicalFrame, CArmCamera, triangulate

log = logging.getLogger(__name__)

DEFAULT_SURFACE_GATE_MM = 10.0

_KMEANS_MAX_ITER = 100
_KMEANS_TOL_MM = 1e-9
_MIN_TRIANGLE_AREA_MM2 = 1.0


@dataclass(frozen=True)
class SurfaceModel:
    """Bone surface point cloud (volume frame) with its APP frame.

    Distance queries use a k-d tree over the (dense) surface samples;
    that approximates point-to-surface distance well below the 10 mm
    gate used for candidate pruning.
    """

    points: np.ndarray  # (N, 3) volume frame, mm
    app: AnatomicalFrame

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 4:
            raise ValueError("surface model needs at least 4 points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("surface points must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_tree", cKDTree(pts))

    def distance(self, points) -> np.ndarray:
        """Nearest-surface-sample distance for one or many query points."""
        d, _ = self._tree.query(np.asarray(points, dtype=np.float64))
        return d

    def lr_coordinate(self, points) -> np.ndarray:
        """APP left-right (+X = patient left) coordinate of volume points."""
        app_pts = self.app.t_volume_to_app.apply(points)
        return np.asarray(app_pts)[..., 0]


@dataclass(frozen=True)
class Constellation:
    """A labelled rigid group of BB positions in the volume frame."""

    label: str
    points: np.ndarray  # (K, 3) mm

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 3:
            raise ValueError("constellation needs at least 3 BBs")
        if not np.all(np.isfinite(pts)):
            raise ValueError("constellation points must be finite")
        best = 0.0
        for i, j, k in combinations(range(len(pts)), 3):
            e1, e2 = pts[j] - pts[i], pts[k] - pts[i]
            best = max(best, 0.5 * float(np.linalg.norm(np.cross(e1, e2))))
            if best > _MIN_TRIANGLE_AREA_MM2:
                break
        if best <= _MIN_TRIANGLE_AREA_MM2:
            raise ValueError(
                f"constellation is (near-)colinear: max triangle area {best:.3g} mm^2"
            )
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def pairwise_lengths(self) -> np.ndarray:
        diff = self.points[:, None, :] - self.points[None, :, :]
        return np.linalg.norm(diff, axis=2)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass
class CorrespondenceCandidate:
    """A hypothesised match between detections across views.

    ``p``/``q``/``r`` index detections in views 1/2/3 (``r`` unset until
    the third view is resolved); ``point`` is the triangulated 3D
    position and ``d`` the view-3 reprojection distance in px.
    """

    p: int
    q: int
    point: np.ndarray
    r: int | None = None
    d: float | None = None


# ---------------------------------------------------------------------------
# correspondence search
# ---------------------------------------------------------------------------

def candidate_two_view(
    dets1: DetectionSet,
    dets2: DetectionSet,
    cam1: CArmCamera,
    cam2: CArmCamera,
    surface: SurfaceModel,
    gate_mm: float = DEFAULT_SURFACE_GATE_MM,
) -> list[CorrespondenceCandidate]:
    """Triangulate every cross-view detection pair and gate on surface distance.

    Candidates are returned in (p, q) lexicographic order.
    """
    out: list[CorrespondenceCandidate] = []
    for p in range(len(dets1)):
        for q in range(len(dets2)):
            try:
                x = triangulate(
                    [(cam1, dets1.points[p]), (cam2, dets2.points[q])]
                )
            except RankDeficient:
                continue
            if surface.distance(x) < gate_mm:
                out.append(CorrespondenceCandidate(p=p, q=q, point=x))
    log.debug(
        "two-view candidates: %d of %d pairs", len(out), len(dets1) * len(dets2)
    )
    return out


def resolve_three_view(
    candidates: list[CorrespondenceCandidate],
    dets1: DetectionSet,
    dets2: DetectionSet,
    dets3: DetectionSet,
    cam1: CArmCamera,
    cam2: CArmCamera,
    cam3: CArmCamera,
    surface: SurfaceModel,
    gate_mm: float = DEFAULT_SURFACE_GATE_MM,
) -> np.ndarray:
    """Confirm two-view candidates against the third view.

    Every (candidate, view-3 detection) pairing is ranked by the
    distance between the candidate's reprojection into view 3 and the
    detection (ties break lexicographically on (p, q, r)).  Walking that
    ranking greedily, pairings whose detections are all still unclaimed
    are re-triangulated from all three views and accepted if they remain
    within the surface gate.  The search stops early once any view runs
    out of unclaimed detections.

    Returns:
        (K, 3) array of reconstructed BB positions (volume frame).
    """
    entries: list[tuple[float, int, int, int, int]] = []
    if candidates and len(dets3):
        pts = np.stack([c.point for c in candidates])
        pixels, depths = cam3.project_world(pts)
        for ci, cand in enumerate(candidates):
            if depths[ci] <= 0.0 or not np.all(np.isfinite(pixels[ci])):
                continue
            dists = np.linalg.norm(dets3.points - pixels[ci], axis=1)
            for r, dist in enumerate(dists):
                entries.append((float(dist), cand.p, cand.q, r, ci))
    entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))

    used1: set[int] = set()
    used2: set[int] = set()
    used3: set[int] = set()
    accepted: list[np.ndarray] = []
    n1, n2, n3 = len(dets1), len(dets2), len(dets3)
    for dist, p, q, r, ci in entries:
        if len(used1) == n1 or len(used2) == n2 or len(used3) == n3:
            break
        if p in used1 or q in used2 or r in used3:
            continue
        try:
            y = triangulate(
                [
                    (cam1, dets1.points[p]),
                    (cam2, dets2.points[q]),
                    (cam3, dets3.points[r]),
                ]
            )
        except RankDeficient:
            continue
        if surface.distance(y) >= gate_mm:
            continue
        cand = candidates[ci]
        cand.r = r
        cand.d = dist
        used1.add(p)
        used2.add(q)
        used3.add(r)
        accepted.append(y)
    if not accepted:
        return np.empty((0, 3))
    return np.stack(accepted)


def reconstruct_bbs(
    det_sets: list[DetectionSet],
    cameras: list[CArmCamera],
    surface: SurfaceModel,
    gate_mm: float = DEFAULT_SURFACE_GATE_MM,
) -> np.ndarray:
    """Full three-view reconstruction: pair search plus confirmation."""
    if len(det_sets) != 3 or len(cameras) != 3:
        raise ValueError("reconstruction needs exactly three views")
    cands = candidate_two_view(
        det_sets[0], det_sets[1], cameras[0], cameras[1], surface, gate_mm
    )
    return resolve_three_view(
        cands, det_sets[0], det_sets[1], det_sets[2],
        cameras[0], cameras[1], cameras[2], surface, gate_mm,
    )


# ---------------------------------------------------------------------------
# constellation labelling
# ---------------------------------------------------------------------------

def _kmeans_two(points: np.ndarray) -> np.ndarray:
    """Deterministic 2-means: farthest-pair init, Lloyd iterations."""
    diffs = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    i, j = np.unravel_index(int(np.argmax(diffs)), diffs.shape)
    centroids = np.stack([points[i], points[j]])
    assign = np.zeros(len(points), dtype=np.intp)
    for _ in range(_KMEANS_MAX_ITER):
        d0 = np.linalg.norm(points - centroids[0], axis=1)
        d1 = np.linalg.norm(points - centroids[1], axis=1)
        assign = (d1 < d0).astype(np.intp)  # ties go to cluster 0
        if not np.any(assign == 0) or not np.any(assign == 1):
            raise DegenerateClusters("2-means collapsed to a single cluster")
        new = np.stack([points[assign == 0].mean(axis=0),
                        points[assign == 1].mean(axis=0)])
        shift = np.linalg.norm(new - centroids, axis=1).max()
        centroids = new
        if shift < _KMEANS_TOL_MM:
            break
    return assign


def label_constellations(
    points: np.ndarray,
    surface: SurfaceModel,
    operative_side: str,
    iliac_reference: np.ndarray,
) -> tuple[Constellation, Constellation]:
    """Split reconstructed BBs into (ilium, fragment) constellations.

    Points on the contralateral side of the APP sagittal plane are
    discarded first.  The remaining points are clustered with
    deterministic 2-means; the cluster whose centroid lies nearer
    ``iliac_reference`` (a volume-frame point on the iliac wing, taken
    from pre-operative planning) is labelled ilium.

    Raises:
        TooFewBBs: fewer than 6 operative-side points, or either cluster
            has fewer than 3 members.
        DegenerateClusters: cluster separation below twice the largest
            intra-cluster radius, so labelling would be arbitrary.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if operative_side not in ("left", "right"):
        raise ValueError("operative_side must be 'left' or 'right'")
    sign = 1.0 if operative_side == "left" else -1.0
    keep = sign * surface.lr_coordinate(pts) >= 0.0
    kept = pts[keep]
    if len(kept) < 6:
        raise TooFewBBs(
            f"{len(kept)} operative-side BBs; need at least 6 for two constellations"
        )
    assign = _kmeans_two(kept)
    clusters = [kept[assign == 0], kept[assign == 1]]
    if min(len(c) for c in clusters) < 3:
        raise TooFewBBs("a constellation cluster has fewer than 3 BBs")
    centroids = [c.mean(axis=0) for c in clusters]
    radii = [np.linalg.norm(c - ctr, axis=1).max() for c, ctr in zip(clusters, centroids)]
    separation = float(np.linalg.norm(centroids[0] - centroids[1]))
    if separation < 2.0 * max(radii):
        raise DegenerateClusters(
            f"cluster separation {separation:.1f} mm below 2x max radius"
        )
    ref = np.asarray(iliac_reference, dtype=np.float64)
    d_ref = [float(np.linalg.norm(c - ref)) for c in centroids]
    ilium_idx = 0 if d_ref[0] <= d_ref[1] else 1
    return (
        Constellation("ilium", clusters[ilium_idx]),
        Constellation("fragment", clusters[1 - ilium_idx]),
    )
