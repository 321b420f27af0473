"""Rigid 3D geometry and C-arm projection primitives.

Conventions used throughout the package:

* Lengths are millimetres, image coordinates are pixels, angles are
  degrees at API boundaries (radians internally where noted).
* Pixel coordinates are ``(x, y)`` with ``x`` along image columns and
  ``y`` along image rows; ``(0, 0)`` is the centre of the top-left pixel.
* A pose maps *model/volume* coordinates into the *C-arm* (camera)
  frame: ``p_cam = R @ p_model + t``.
* The anatomical (APP) frame has +X pointing to the patient's left
  (lateral for a left hip), +Y superior and +Z anterior, with its origin
  at the femoral head centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BehindSource,
    Colinear,
    DegenerateEdge,
    DegenerateRay,
    FrameMismatch,
    GimbalLock,
    RankDeficient,
)

# Numerical guards (dimensionless unless noted).
_ORTHONORMAL_TOL = 1e-10
_UNIT_TOL = 1e-9
_DEPTH_TOL_MM = 1e-6  # minimum |depth| for a projection ray, mm
_GIMBAL_TOL_DEG = 1e-6


def _as_array(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rotation matrix for a rotation of ``angle_deg`` about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm < _UNIT_TOL:
        raise ValueError("rotation axis must be nonzero")
    return rotation_from_rotvec(axis / norm * math.radians(angle_deg))


def rotation_from_rotvec(rotvec) -> np.ndarray:
    """Rodrigues formula; accepts a single (3,) or batched (..., 3) input."""
    rv = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = theta < 1e-30
    k = rv / np.where(small, 1.0, theta)
    th = theta[..., 0]
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    cross = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), cross.shape)
    outer = k[..., :, None] * k[..., None, :]
    c = np.cos(th)[..., None, None]
    s = np.sin(th)[..., None, None]
    return c * eye + s * cross + (1.0 - c) * outer


def rotation_angle_deg(rotation) -> np.ndarray | float:
    """Total rotation angle of one or more rotation matrices, degrees."""
    r = np.asarray(rotation, dtype=np.float64)
    trace = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    ang = np.degrees(np.arccos(np.clip((trace - 1.0) / 2.0, -1.0, 1.0)))
    return float(ang) if ang.ndim == 0 else ang


def euler_compose(lr_deg: float, is_deg: float, ap_deg: float) -> np.ndarray:
    """Rotation matrix from extrinsic LR -> IS -> AP Euler angles.

    The three rotations are applied about the fixed LR (+X), IS (+Y) and
    AP (+Z) axes in that order: ``R = Rz(ap) @ Ry(is) @ Rx(lr)``.
    """
    rx = rotation_about_axis((1.0, 0.0, 0.0), lr_deg)
    ry = rotation_about_axis((0.0, 1.0, 0.0), is_deg)
    rz = rotation_about_axis((0.0, 0.0, 1.0), ap_deg)
    return rz @ ry @ rx


def euler_decompose(rotation) -> tuple[float, float, float]:
    """Recover extrinsic LR/IS/AP Euler angles (degrees) from a rotation.

    Angles satisfy ``euler_compose(*angles) == rotation``; LR and AP lie
    in (-180, 180] and IS in [-90, 90].

    Raises:
        GimbalLock: if the IS angle is within 1e-6 deg of +/-90.
    """
    r = np.asarray(rotation, dtype=np.float64)
    is_deg = math.degrees(math.asin(np.clip(-r[2, 0], -1.0, 1.0)))
    if 90.0 - abs(is_deg) < _GIMBAL_TOL_DEG:
        raise GimbalLock(f"IS angle {is_deg:.9f} deg is singular")
    lr_deg = math.degrees(math.atan2(r[2, 1], r[2, 2]))
    ap_deg = math.degrees(math.atan2(r[1, 0], r[0, 0]))
    return lr_deg, is_deg, ap_deg


def euler_decompose_batch(rotations) -> tuple[np.ndarray, np.ndarray]:
    """Batched Euler decomposition that flags rather than raises on lock.

    Returns:
        (angles, locked): angles with shape (..., 3) ordered LR/IS/AP in
        degrees, and a boolean gimbal-lock mask.  Locked entries hold the
        clamped IS angle and an arbitrary LR/AP split.
    """
    r = np.asarray(rotations, dtype=np.float64)
    sin_is = np.clip(-r[..., 2, 0], -1.0, 1.0)
    is_deg = np.degrees(np.arcsin(sin_is))
    locked = (90.0 - np.abs(is_deg)) < _GIMBAL_TOL_DEG
    lr_deg = np.degrees(np.arctan2(r[..., 2, 1], r[..., 2, 2]))
    ap_deg = np.degrees(np.arctan2(r[..., 1, 0], r[..., 0, 0]))
    return np.stack([lr_deg, is_deg, ap_deg], axis=-1), locked


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform with optional frame tags.

    ``apply`` maps points from ``from_frame`` into ``to_frame``.  A
    ``None`` tag is a wildcard: it composes with anything.  Tagged
    transforms only compose when the inner tags chain, otherwise
    :class:`FrameMismatch` is raised.
    """

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str | None = None
    to_frame: str | None = None

    def __post_init__(self) -> None:
        r = _as_array(self.rotation, (3, 3), "rotation")
        t = _as_array(self.translation, (3,), "translation")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > _ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (deviation {err:.3e})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    # -- construction -------------------------------------------------------

    @classmethod
    def identity(cls, frame: str | None = None) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), frame, frame)

    @classmethod
    def from_rotvec(
        cls,
        rotvec_rad,
        translation,
        from_frame: str | None = None,
        to_frame: str | None = None,
    ) -> "RigidTransform":
        return cls(rotation_from_rotvec(rotvec_rad), translation, from_frame, to_frame)

    # -- algebra ------------------------------------------------------------

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self o other`` (``other`` is applied first)."""
        if (
            self.from_frame is not None
            and other.to_frame is not None
            and self.from_frame != other.to_frame
        ):
            raise FrameMismatch(
                f"cannot chain {other.from_frame}->{other.to_frame} "
                f"into {self.from_frame}->{self.to_frame}"
            )
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            other.from_frame,
            self.to_frame,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, self.to_frame, self.from_frame)

    def apply(self, points) -> np.ndarray:
        """Map one (3,) point or an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    # -- queries ------------------------------------------------------------

    def rotation_angle_deg(self) -> float:
        return float(rotation_angle_deg(self.rotation))

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self.translation))

    def retag(self, from_frame: str | None, to_frame: str | None) -> "RigidTransform":
        return RigidTransform(self.rotation, self.translation, from_frame, to_frame)


# ---------------------------------------------------------------------------
# C-arm camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CArmCamera:
    """Pinhole model of a C-arm: point source and planar detector.

    All intrinsic quantities (source position, detector origin and axes)
    live in the C-arm frame.  ``extrinsics`` maps an external world frame
    into the C-arm frame and defaults to identity, which models the
    uncalibrated single-view case where the C-arm frame *is* the world.

    The detector origin is the 3D centre of pixel ``(0, 0)``;
    ``detector_col_dir``/``detector_row_dir`` are unit vectors along
    increasing x (columns) and y (rows).
    """

    source: np.ndarray
    detector_origin: np.ndarray
    detector_row_dir: np.ndarray
    detector_col_dir: np.ndarray
    pixel_spacing: float
    image_dims: tuple[int, int]  # (rows, cols)
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        s = _as_array(self.source, (3,), "source")
        o = _as_array(self.detector_origin, (3,), "detector_origin")
        row = _as_array(self.detector_row_dir, (3,), "detector_row_dir")
        col = _as_array(self.detector_col_dir, (3,), "detector_col_dir")
        for name, v in (("detector_row_dir", row), ("detector_col_dir", col)):
            if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
                raise ValueError(f"{name} must be a unit vector")
        if abs(float(row @ col)) > _UNIT_TOL:
            raise ValueError("detector axes must be orthogonal")
        if self.pixel_spacing <= 0.0:
            raise ValueError("pixel_spacing must be positive")
        rows, cols = self.image_dims
        if rows < 2 or cols < 2:
            raise ValueError("image_dims must be at least 2x2")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "detector_origin", o)
        object.__setattr__(self, "detector_row_dir", row)
        object.__setattr__(self, "detector_col_dir", col)
        object.__setattr__(self, "image_dims", (int(rows), int(cols)))

        normal = np.cross(col, row)
        signed = float((o - s) @ normal)
        if abs(signed) < _DEPTH_TOL_MM:
            raise ValueError("source lies in the detector plane")
        depth_axis = normal * math.copysign(1.0, signed)
        depth_axis.flags.writeable = False
        object.__setattr__(self, "_depth_axis", depth_axis)
        object.__setattr__(self, "_sdd", abs(signed))

    # -- derived geometry ---------------------------------------------------

    @property
    def sdd(self) -> float:
        """Source-to-detector distance along the principal ray, mm."""
        return self._sdd

    @property
    def depth_axis(self) -> np.ndarray:
        """Unit vector from source towards the detector plane (C-arm frame)."""
        return self._depth_axis

    @property
    def principal_point_3d(self) -> np.ndarray:
        """Orthogonal projection of the source onto the detector plane."""
        return self.source + self._sdd * self._depth_axis

    @property
    def principal_pixel(self) -> np.ndarray:
        rel = self.principal_point_3d - self.detector_origin
        return np.array(
            [rel @ self.detector_col_dir, rel @ self.detector_row_dir]
        ) / self.pixel_spacing

    # -- projection ---------------------------------------------------------

    def world_to_cam(self, points) -> np.ndarray:
        return self.extrinsics.apply(points)

    def project(self, point_world) -> np.ndarray:
        """Project a single world point onto the detector, in pixels.

        Raises:
            DegenerateRay: point within 1e-6 mm of the source along the
                depth axis (no ray can be formed).
            BehindSource: point on the far side of the source.
        """
        p = self.world_to_cam(np.asarray(point_world, dtype=np.float64))
        depth = float((p - self.source) @ self._depth_axis)
        if abs(depth) < _DEPTH_TOL_MM:
            raise DegenerateRay("point coincides with the X-ray source")
        if depth < 0.0:
            raise BehindSource(f"point at depth {depth:.3f} mm behind source")
        foot = self.source + (p - self.source) * (self._sdd / depth)
        rel = foot - self.detector_origin
        return np.array(
            [rel @ self.detector_col_dir, rel @ self.detector_row_dir]
        ) / self.pixel_spacing

    def project_cam(self, points_cam) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection of C-arm-frame points; never raises.

        Returns:
            (pixels, depths) with shapes (..., 2) and (...,).  Entries
            with depth <= 1e-6 mm produce non-finite pixels; callers are
            expected to mask on ``depths``.
        """
        p = np.asarray(points_cam, dtype=np.float64)
        rel = p - self.source
        depths = rel @ self._depth_axis
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(depths > _DEPTH_TOL_MM, self._sdd / depths, np.nan)
        foot = self.source + rel * scale[..., None]
        rel_det = foot - self.detector_origin
        px = rel_det @ self.detector_col_dir / self.pixel_spacing
        py = rel_det @ self.detector_row_dir / self.pixel_spacing
        return np.stack([px, py], axis=-1), depths

    def project_world(self, points) -> tuple[np.ndarray, np.ndarray]:
        return self.project_cam(self.world_to_cam(points))

    def detector_point_cam(self, pixels) -> np.ndarray:
        """3D C-arm-frame position of detector pixel(s) ``(x, y)``."""
        px = np.asarray(pixels, dtype=np.float64)
        return (
            self.detector_origin
            + px[..., 0, None] * self.pixel_spacing * self.detector_col_dir
            + px[..., 1, None] * self.pixel_spacing * self.detector_row_dir
        )

    def backproject_ray(self, pixel) -> tuple[np.ndarray, np.ndarray]:
        """World-frame ray (origin, unit direction) through a pixel."""
        target = self.detector_point_cam(np.asarray(pixel, dtype=np.float64))
        d = target - self.source
        d = d / np.linalg.norm(d)
        inv = self.extrinsics.inverse()
        return inv.apply(self.source), inv.rotation @ d

    def in_image(self, pixels) -> np.ndarray:
        """Boolean mask for pixels inside [0, cols-1] x [0, rows-1]."""
        px = np.asarray(pixels, dtype=np.float64)
        rows, cols = self.image_dims
        ok_x = (px[..., 0] >= 0.0) & (px[..., 0] <= cols - 1.0)
        ok_y = (px[..., 1] >= 0.0) & (px[..., 1] <= rows - 1.0)
        return ok_x & ok_y

    def depth_ratio_cam(self, points_cam) -> np.ndarray:
        """Source-to-point depth as a fraction of the SDD."""
        p = np.asarray(points_cam, dtype=np.float64)
        return (p - self.source) @ self._depth_axis / self._sdd


def default_carm(
    image_dims: tuple[int, int] = (1536, 1536),
    extrinsics: RigidTransform | None = None,
) -> CArmCamera:
    """Nominal C-arm: SDD 1020 mm, 0.194 mm/px, centred principal point."""
    rows, cols = image_dims
    spacing = 0.194
    origin = np.array(
        [-(cols - 1) / 2.0 * spacing, -(rows - 1) / 2.0 * spacing, 1020.0]
    )
    return CArmCamera(
        source=np.zeros(3),
        detector_origin=origin,
        detector_row_dir=np.array([0.0, 1.0, 0.0]),
        detector_col_dir=np.array([1.0, 0.0, 0.0]),
        pixel_spacing=spacing,
        image_dims=(rows, cols),
        extrinsics=extrinsics or RigidTransform.identity(),
    )


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def triangulate(observations: Sequence[tuple[CArmCamera, np.ndarray]]) -> np.ndarray:
    """Least-squares intersection of the rays through >= 2 observations.

    Minimises the sum of squared orthogonal distances to every ray
    ``o_i + t v_i``, i.e. solves ``sum(I - v v^T) x = sum(I - v v^T) o``.

    Raises:
        RankDeficient: all rays are (anti-)parallel, so the normal system
            is singular.
    """
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for camera, pixel in observations:
        origin, direction = camera.backproject_ray(pixel)
        proj = np.eye(3) - np.outer(direction, direction)
        a += proj
        b += proj @ origin
    eigvals = np.linalg.eigvalsh(a)
    if eigvals[0] < 1e-9 * max(1.0, eigvals[-1]):
        raise RankDeficient("observation rays span fewer than two dimensions")
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# 3D/3D registration (Horn's quaternion method)
# ---------------------------------------------------------------------------

def _horn_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid fits mapping src[k] onto dst[k] for stacks of point sets.

    Args:
        src, dst: arrays of shape (K, N, 3) with N >= 3.

    Returns:
        (rotations, translations) with shapes (K, 3, 3) and (K, 3).
    """
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    a = src - cs
    b = dst - cd
    m = np.einsum("kij,kil->kjl", a, b)
    sxx, sxy, sxz = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    syx, syy, syz = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    szx, szy, szz = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    n = np.empty((src.shape[0], 4, 4))
    n[:, 0, 0] = sxx + syy + szz
    n[:, 0, 1] = n[:, 1, 0] = syz - szy
    n[:, 0, 2] = n[:, 2, 0] = szx - sxz
    n[:, 0, 3] = n[:, 3, 0] = sxy - syx
    n[:, 1, 1] = sxx - syy - szz
    n[:, 1, 2] = n[:, 2, 1] = sxy + syx
    n[:, 1, 3] = n[:, 3, 1] = szx + sxz
    n[:, 2, 2] = syy - sxx - szz
    n[:, 2, 3] = n[:, 3, 2] = syz + szy
    n[:, 3, 3] = szz - sxx - syy
    _, vecs = np.linalg.eigh(n)
    q = vecs[:, :, -1]  # unit quaternion (w, x, y, z) of the largest eigenvalue
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((src.shape[0], 3, 3))
    r[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[:, 0, 1] = 2.0 * (x * y - w * z)
    r[:, 0, 2] = 2.0 * (x * z + w * y)
    r[:, 1, 0] = 2.0 * (x * y + w * z)
    r[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[:, 1, 2] = 2.0 * (y * z - w * x)
    r[:, 2, 0] = 2.0 * (x * z - w * y)
    r[:, 2, 1] = 2.0 * (y * z + w * x)
    r[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    t = cd[:, 0, :] - np.einsum("kij,kj->ki", r, cs[:, 0, :])
    return r, t


def register_paired_3d3d(src, dst) -> tuple[RigidTransform, float]:
    """Least-squares rigid transform mapping paired points src -> dst.

    Uses Horn's closed-form quaternion solution.

    Returns:
        (transform, rms) where rms is the post-fit residual in mm.

    Raises:
        Colinear: source points are colinear (rotation about the line is
            unobservable).
    """
    s = np.asarray(src, dtype=np.float64)
    d = np.asarray(dst, dtype=np.float64)
    if s.shape != d.shape or s.ndim != 2 or s.shape[1] != 3:
        raise ValueError("src and dst must both have shape (N, 3)")
    if s.shape[0] < 3:
        raise ValueError("registration needs at least 3 point pairs")
    sv = np.linalg.svd(s - s.mean(axis=0), compute_uv=False)
    if sv[1] <= max(1e-9 * sv[0], 1e-12):
        raise Colinear("source points are colinear")
    r, t = _horn_batch(s[None], d[None])
    transform = RigidTransform(r[0], t[0])
    rms = float(np.sqrt(np.mean(np.sum((transform.apply(s) - d) ** 2, axis=1))))
    return transform, rms


# ---------------------------------------------------------------------------
# Anatomical frame and clinical angles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnatomicalFrame:
    """Anterior pelvic plane (APP) frame attached to a CT volume.

    Axes: +X patient-left (LR), +Y superior (IS), +Z anterior (AP);
    origin at the femoral head centre of the operative side.
    """

    t_app_to_volume: RigidTransform

    def __post_init__(self) -> None:
        t = self.t_app_to_volume
        if t.from_frame not in (None, "app") or t.to_frame not in (None, "volume"):
            raise FrameMismatch("anatomical frame transform must map app -> volume")
        if t.from_frame is None or t.to_frame is None:
            object.__setattr__(
                self, "t_app_to_volume", t.retag("app", "volume")
            )

    @property
    def t_volume_to_app(self) -> RigidTransform:
        return self.t_app_to_volume.inverse()


@dataclass(frozen=True)
class LceLandmarks:
    """Landmarks for the lateral centre-edge (LCE) angle, in APP mm."""

    head_center: np.ndarray
    lateral_edge: np.ndarray

    def __post_init__(self) -> None:
        h = _as_array(self.head_center, (3,), "head_center")
        e = _as_array(self.lateral_edge, (3,), "lateral_edge")
        if abs(e[0] - h[0]) < 1e-9:
            raise ValueError("lateral edge must lie strictly lateral of the head")
        object.__setattr__(self, "head_center", h)
        object.__setattr__(self, "lateral_edge", e)


def lce_angle(delta_app: RigidTransform, landmarks: LceLandmarks) -> float:
    """LCE angle (degrees) implied by a fragment motion ``delta_app``.

    The lateral acetabular edge is mapped by ``delta_app`` and the
    head-centre-to-edge vector is projected into the coronal (LR-IS)
    plane through the fixed head centre.  The angle is measured from the
    superior axis, positive towards lateral.

    Raises:
        DegenerateEdge: the projected vector is shorter than 1e-9 mm.
    """
    moved = delta_app.apply(landmarks.lateral_edge)
    v = moved - landmarks.head_center
    lateral_sign = math.copysign(
        1.0, float(landmarks.lateral_edge[0] - landmarks.head_center[0])
    )
    lat = lateral_sign * float(v[0])
    sup = float(v[1])
    if math.hypot(lat, sup) < 1e-9:
        raise DegenerateEdge("edge projects onto the head centre")
    return math.degrees(math.atan2(lat, sup))


def relative_fragment_pose(
    ilium_pose: RigidTransform,
    fragment_pose: RigidTransform,
    app: AnatomicalFrame,
) -> RigidTransform:
    """Fragment motion relative to the ilium, expressed in the APP frame.

    Both poses map volume coordinates into the same C-arm frame; the
    ilium pose carries the whole-pelvis (volume-to-C-arm) alignment while
    the fragment pose reflects the relocated fragment.  The returned
    transform maps pre-osteotomy fragment positions (APP frame) to their
    post-relocation positions (APP frame).
    """
    t_av = app.t_app_to_volume
    return t_av.inverse() @ ilium_pose.inverse() @ fragment_pose @ t_av
