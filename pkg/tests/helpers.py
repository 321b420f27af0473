"""Shared synthetic-rig builders for the test suite."""
from __future__ import annotations

import numpy as np

from fragtrack.geometry import (
    CArmCamera,
    RigidTransform,
    default_carm,
    rotation_about_axis,
    rotation_from_rotvec,
)


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle_deg, max_angle_deg)
    return rotation_about_axis(axis, angle)


def random_rigid(
    rng: np.random.Generator,
    max_angle_deg: float = 180.0,
    max_trans_mm: float = 100.0,
    from_frame: str | None = None,
    to_frame: str | None = None,
) -> RigidTransform:
    return RigidTransform(
        random_rotation(rng, max_angle_deg),
        rng.uniform(-max_trans_mm, max_trans_mm, size=3),
        from_frame,
        to_frame,
    )


def orbit_camera(
    center_world,
    depth_mm: float = 795.0,
    rotation: np.ndarray | None = None,
    image_dims: tuple[int, int] = (1536, 1536),
) -> CArmCamera:
    """Camera whose depth axis passes through ``center_world`` at ``depth_mm``.

    ``rotation`` orients the world frame relative to the C-arm frame
    (identity means the world +Z axis is the viewing direction).
    """
    r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    center = np.asarray(center_world, dtype=np.float64)
    translation = np.array([0.0, 0.0, depth_mm]) - r @ center
    return default_carm(image_dims, RigidTransform(r, translation))


def view_ring(center_world, angles_deg, axis=(0.0, 1.0, 0.0), depth_mm: float = 795.0):
    """Cameras orbiting ``center_world`` about ``axis`` at the given angles."""
    return [
        orbit_camera(center_world, depth_mm, rotation_about_axis(axis, a))
        for a in angles_deg
    ]


def random_triangle(
    rng: np.random.Generator,
    scale_mm: float = 25.0,
    min_area_mm2: float = 20.0,
    center=None,
) -> np.ndarray:
    """Non-degenerate 3-point model, optionally recentred."""
    while True:
        pts = rng.uniform(-scale_mm, scale_mm, size=(3, 3))
        e1, e2 = pts[1] - pts[0], pts[2] - pts[0]
        if 0.5 * np.linalg.norm(np.cross(e1, e2)) > min_area_mm2:
            break
    pts -= pts.mean(axis=0)
    if center is not None:
        pts += np.asarray(center, dtype=np.float64)
    return pts


def rigid_from_params(rotvec_rad, translation) -> RigidTransform:
    return RigidTransform(rotation_from_rotvec(np.asarray(rotvec_rad)), translation)
