"""Bounded-depth perspective-three-point solver.

Rather than solving the classical P3P polynomial, the solver sweeps a
grid of depth ratios for the first correspondence.  Fixing the first
model point at ``B1 = s + rho * (bhat1 - s)`` (``s`` the X-ray source,
``bhat1`` the detector point of its 2D detection, ``rho`` the depth as a
fraction of the source-detector distance) leaves the other two points
constrained to their own back-projection lines ``Bj(t) = s + t * (bhat_j
- s)``.  For each the candidate depths are the minimisers of the squared
inter-point length error, which is a quadratic in ``t`` and therefore
closed form: the roots of ``q(t) = l^2`` when the line reaches the
required length, else the perpendicular foot.

Candidates are pruned by (a) depth bounds on ``t``, (b) relative length
error of each reconstructed pair within ``epsilon``, and (c) maximum
reprojection distance of the registered pose.  Rigid poses come from
Horn's closed-form registration of the model triple onto the
reconstructed points.

Everything is computed in the C-arm frame; returned poses map model
coordinates into the C-arm frame and ignore camera extrinsics, which
matches the uncalibrated single-view use case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ColinearModel
from .geometry import CArmCamera, RigidTransform, _horn_batch

_AREA_TOL_MM2 = 1e-9
_DISC_SAFEGUARD = 1e-12


@dataclass(frozen=True)
class P3PConfig:
    """Solver settings: ratio grid, gate width and depth bounds.

    Attributes:
        ratios: depth-ratio grid for the first correspondence, enumerated
            in order.  Every value must lie inside ``t_bounds``.
        epsilon: relative length-error gate half-width.
        t_bounds: closed admissible depth-ratio interval for all points.
        pixel_tol: maximum reprojection distance of a returned pose, px.
    """

    ratios: tuple[float, ...]
    epsilon: float = 0.01
    t_bounds: tuple[float, float] = (0.6, 1.0)
    pixel_tol: float = 0.5

    def __post_init__(self) -> None:
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) == 0:
            raise ValueError("ratio grid must be non-empty")
        lo, hi = self.t_bounds
        if not 0.0 < lo < hi:
            raise ValueError("t_bounds must satisfy 0 < lo < hi")
        if any(r < lo or r > hi for r in ratios):
            raise ValueError("all ratios must lie within t_bounds")
        if self.epsilon <= 0.0 or self.pixel_tol <= 0.0:
            raise ValueError("epsilon and pixel_tol must be positive")
        object.__setattr__(self, "ratios", ratios)
        object.__setattr__(self, "t_bounds", (float(lo), float(hi)))


@dataclass(frozen=True)
class P3PSolution:
    """One admissible pose for a 3-point correspondence.

    ``residual`` is the worst relative length error over the three point
    pairs; ``reproj_px`` the worst reprojection distance.  ``t2``/``t3``
    are the chosen depth ratios of the second and third points.
    """

    pose: RigidTransform
    ratio: float
    t2: float
    t3: float
    residual: float
    reproj_px: float


@dataclass
class P3PCandidateSet:
    """Struct-of-arrays output of the batched solver.

    One entry per surviving (model triple, detection triple, ratio,
    root pair) combination, in deterministic enumeration order: model
    index, then detection-triple index, then ratio index, then the two
    root indices (roots in ascending ``t``).
    """

    rotations: np.ndarray      # (S, 3, 3)
    translations: np.ndarray   # (S, 3)
    model_idx: np.ndarray      # (S,) index into the model-triple stack
    det_triples: np.ndarray    # (S, 3) detection indices
    ratio_idx: np.ndarray      # (S,)
    ratios: np.ndarray         # (S,)
    t2: np.ndarray             # (S,)
    t3: np.ndarray             # (S,)
    residuals: np.ndarray      # (S,)
    reproj_px: np.ndarray      # (S,)

    @classmethod
    def empty(cls) -> "P3PCandidateSet":
        return cls(
            np.empty((0, 3, 3)), np.empty((0, 3)),
            np.empty(0, dtype=np.intp), np.empty((0, 3), dtype=np.intp),
            np.empty(0, dtype=np.intp), np.empty(0), np.empty(0), np.empty(0),
            np.empty(0), np.empty(0),
        )

    def __len__(self) -> int:
        return len(self.ratios)

    def subset(self, mask_or_index) -> "P3PCandidateSet":
        return P3PCandidateSet(
            self.rotations[mask_or_index],
            self.translations[mask_or_index],
            self.model_idx[mask_or_index],
            self.det_triples[mask_or_index],
            self.ratio_idx[mask_or_index],
            self.ratios[mask_or_index],
            self.t2[mask_or_index],
            self.t3[mask_or_index],
            self.residuals[mask_or_index],
            self.reproj_px[mask_or_index],
        )

    def poses(self) -> list[RigidTransform]:
        return [
            RigidTransform(r, t)
            for r, t in zip(self.rotations, self.translations)
        ]

    def solutions(self) -> list[P3PSolution]:
        return [
            P3PSolution(
                pose=RigidTransform(self.rotations[i], self.translations[i]),
                ratio=float(self.ratios[i]),
                t2=float(self.t2[i]),
                t3=float(self.t3[i]),
                residual=float(self.residuals[i]),
                reproj_px=float(self.reproj_px[i]),
            )
            for i in range(len(self))
        ]


def _concat_sets(parts: list[P3PCandidateSet]) -> P3PCandidateSet:
    if not parts:
        return P3PCandidateSet.empty()
    return P3PCandidateSet(*[
        np.concatenate([getattr(p, name) for p in parts])
        for name in (
            "rotations", "translations", "model_idx", "det_triples",
            "ratio_idx", "ratios", "t2", "t3", "residuals", "reproj_px",
        )
    ])


# ---------------------------------------------------------------------------
# scalar root finder
# ---------------------------------------------------------------------------

def min_length_roots(
    line: tuple[np.ndarray, np.ndarray],
    b1_point: np.ndarray,
    length: float,
) -> list[tuple[float, float]]:
    """Depths along a back-projection line minimising the length error.

    Args:
        line: (source, detector_point) defining ``B(t) = s + t * (b - s)``.
        b1_point: fixed 3D position of the first model point.
        length: required distance between ``B(t)`` and ``b1_point``, mm.

    Returns:
        Up to two ``(t, achieved_length)`` pairs in ascending ``t``.  When
        the line never reaches ``length`` (negative discriminant, within
        a safeguard of zero), the single perpendicular-foot minimiser is
        returned with its shorter achieved length.
    """
    s, bhat = (np.asarray(v, dtype=np.float64) for v in line)
    b1 = np.asarray(b1_point, dtype=np.float64)
    d = bhat - s
    a = float(d @ d)
    if a < 1e-12:
        raise ValueError("degenerate back-projection line")
    u = s - b1
    b = 2.0 * float(u @ d)
    c = float(u @ u)
    l2 = float(length) ** 2
    disc = b * b - 4.0 * a * (c - l2)
    guard = _DISC_SAFEGUARD * max(1.0, abs(b * b), abs(4.0 * a * (c - l2)))

    def achieved(t: float) -> float:
        return float(np.sqrt(max(a * t * t + b * t + c, 0.0)))

    if disc <= guard:
        t_star = -b / (2.0 * a)
        return [(t_star, achieved(t_star))]
    sq = float(np.sqrt(disc))
    lo = (-b - sq) / (2.0 * a)
    hi = (-b + sq) / (2.0 * a)
    return [(lo, achieved(lo)), (hi, achieved(hi))]


# ---------------------------------------------------------------------------
# batched grid solver
# ---------------------------------------------------------------------------

def _triple_areas(models: np.ndarray) -> np.ndarray:
    e1 = models[:, 1] - models[:, 0]
    e2 = models[:, 2] - models[:, 0]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def solve_p3p_grid(
    models: np.ndarray,
    det_points: np.ndarray,
    triples: np.ndarray,
    camera: CArmCamera,
    config: P3PConfig,
    skip_colinear: bool = False,
) -> P3PCandidateSet:
    """Solve every (model triple, detection triple, ratio) combination.

    Args:
        models: (M, 3, 3) stack of model triples, mm.
        det_points: (n, 2) detection pixels for the view.
        triples: (T, 3) integer detection-index triples (ordered, i.e.
            correspondence order matters and permutations are distinct).
        camera: projection model; only intrinsics are used.
        config: ratio grid and gates.
        skip_colinear: silently drop colinear model triples instead of
            raising (used when sub-constellations may degenerate).

    Raises:
        ColinearModel: a model triple is colinear and skip_colinear is
            False.
    """
    models = np.asarray(models, dtype=np.float64).reshape(-1, 3, 3)
    det_points = np.asarray(det_points, dtype=np.float64).reshape(-1, 2)
    triples = np.asarray(triples, dtype=np.intp).reshape(-1, 3)
    n_det = len(det_points)
    if np.any(triples < 0) or np.any(triples >= n_det):
        raise ValueError("detection triple index out of range")

    areas = _triple_areas(models)
    degenerate = areas < _AREA_TOL_MM2
    if np.any(degenerate) and not skip_colinear:
        raise ColinearModel("model triple is colinear")

    s = camera.source
    bhat = camera.detector_point_cam(det_points)          # (n, 3)
    d = bhat - s                                          # (n, 3)
    gram = d @ d.T                                        # (n, n)
    diag = np.diag(gram)
    ratios = np.asarray(config.ratios)                    # (R,)
    n_r = len(ratios)
    lo, hi = config.t_bounds
    eps = config.epsilon

    # Quadratic coefficients of q(t) = |s + t d_j - B1(i, rho)|^2 shared
    # across model triples: a depends on j, b on (i, j, rho), c on (i, rho).
    a_j = diag[None, :, None]                                      # (1, n, 1)
    b_ij = -2.0 * gram[:, :, None] * ratios[None, None, :]         # (n, n, R)
    c_i = diag[:, None, None] * (ratios**2)[None, None, :]         # (n, 1, R)

    # Pair lengths per model triple: slot 0 pairs B1-B2, slot 1 pairs B1-B3.
    p1, p2, p3 = models[:, 0], models[:, 1], models[:, 2]
    l_first = np.stack(
        [np.linalg.norm(p2 - p1, axis=1), np.linalg.norm(p3 - p1, axis=1)], axis=1
    )                                                              # (M, 2)
    l23 = np.linalg.norm(p3 - p2, axis=1)                          # (M,)

    l2_first = (l_first**2)[:, :, None, None, None]                # (M, 2, 1, 1, 1)
    rhs = c_i[None, None] - l2_first                               # (M, 2, n, n, R)
    disc = b_ij[None, None] ** 2 - 4.0 * a_j[None, None] * rhs
    guard = _DISC_SAFEGUARD * np.maximum(
        1.0, np.maximum(b_ij[None, None] ** 2, np.abs(4.0 * a_j[None, None] * rhs))
    )
    two_roots = disc > guard
    sq = np.sqrt(np.clip(disc, 0.0, None))
    with np.errstate(invalid="ignore"):
        root_lo = np.where(
            two_roots,
            (-b_ij[None, None] - sq) / (2.0 * a_j[None, None]),
            -b_ij[None, None] / (2.0 * a_j[None, None]),
        )
        root_hi = (-b_ij[None, None] + sq) / (2.0 * a_j[None, None])
    t_roots = np.stack([root_lo, root_hi], axis=-1)                # (M, 2, n, n, R, 2)
    q_val = (
        a_j[None, None, ..., None] * t_roots**2
        + b_ij[None, None, ..., None] * t_roots
        + c_i[None, None, :, :, :, None]
    )
    ach = np.sqrt(np.clip(q_val, 0.0, None))                       # achieved lengths
    l_ref = l_first[:, :, None, None, None, None]
    ok = (
        (t_roots >= lo)
        & (t_roots <= hi)
        & (np.abs(ach / l_ref - 1.0) <= eps)
    )
    ok[..., 1] &= two_roots

    det_xy = det_points
    parts: list[P3PCandidateSet] = []
    for m in range(len(models)):
        if degenerate[m]:
            continue
        ti, tj, tk = triples[:, 0], triples[:, 1], triples[:, 2]
        ok2 = ok[m, 0][ti, tj]            # (T, R, 2)
        ok3 = ok[m, 1][ti, tk]
        t2 = t_roots[m, 0][ti, tj]
        t3 = t_roots[m, 1][ti, tk]
        pair_ok = ok2[:, :, :, None] & ok3[:, :, None, :]          # (T, R, 2, 2)
        t2b = t2[:, :, :, None]
        t3b = t3[:, :, None, :]
        a2 = diag[tj][:, None, None, None]
        a3 = diag[tk][:, None, None, None]
        g23 = gram[tj, tk][:, None, None, None]
        sep = np.sqrt(
            np.clip(t2b**2 * a2 + t3b**2 * a3 - 2.0 * t2b * t3b * g23, 0.0, None)
        )
        rel23 = np.abs(sep / l23[m] - 1.0)
        mask = pair_ok & (rel23 <= eps)
        it, ir, r2, r3 = np.nonzero(mask)
        if len(it) == 0:
            continue

        i_d, j_d, k_d = ti[it], tj[it], tk[it]
        rho = ratios[ir]
        t2v = t2[it, ir, r2]
        t3v = t3[it, ir, r3]
        b1 = s + rho[:, None] * d[i_d]
        b2 = s + t2v[:, None] * d[j_d]
        b3 = s + t3v[:, None] * d[k_d]
        dst = np.stack([b1, b2, b3], axis=1)                       # (S, 3, 3)
        src = np.broadcast_to(models[m], dst.shape)
        rot, trans = _horn_batch(np.ascontiguousarray(src), dst)

        ach2 = ach[m, 0][i_d, j_d, ir, r2]
        ach3 = ach[m, 1][i_d, k_d, ir, r3]
        residual = np.maximum(
            np.abs(ach2 / l_first[m, 0] - 1.0),
            np.maximum(np.abs(ach3 / l_first[m, 1] - 1.0), rel23[it, ir, r2, r3]),
        )

        posed = np.einsum("sij,pj->spi", rot, models[m]) + trans[:, None, :]
        pixels, _ = camera.project_cam(posed)
        targets = det_xy[np.stack([i_d, j_d, k_d], axis=1)]        # (S, 3, 2)
        with np.errstate(invalid="ignore"):
            reproj = np.linalg.norm(pixels - targets, axis=2).max(axis=1)
        keep = reproj <= config.pixel_tol                          # NaN -> False
        if not np.any(keep):
            continue

        parts.append(
            P3PCandidateSet(
                rotations=rot[keep],
                translations=trans[keep],
                model_idx=np.full(int(keep.sum()), m, dtype=np.intp),
                det_triples=np.stack([i_d, j_d, k_d], axis=1)[keep],
                ratio_idx=ir[keep],
                ratios=rho[keep],
                t2=t2v[keep],
                t3=t3v[keep],
                residuals=residual[keep],
                reproj_px=reproj[keep],
            )
        )
    return _concat_sets(parts)


def solve_p3p(
    model_points: np.ndarray,
    detections: np.ndarray,
    camera: CArmCamera,
    config: P3PConfig,
) -> list[P3PSolution]:
    """All admissible poses aligning a 3-point model with 3 detections.

    Solutions are ordered by (ratio index, t2 root index, t3 root index)
    with roots ascending; at most four solutions exist per ratio.

    Raises:
        ColinearModel: model points are colinear.
    """
    model = np.asarray(model_points, dtype=np.float64)
    dets = np.asarray(detections, dtype=np.float64)
    if model.shape != (3, 3) or dets.shape != (3, 2):
        raise ValueError("expected a (3, 3) model and (3, 2) detections")
    result = solve_p3p_grid(
        model[None], dets, np.array([[0, 1, 2]]), camera, config
    )
    return result.solutions()
