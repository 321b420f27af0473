"""Deterministic synthetic fluoroscopy scenes for validation.

Generates a hemipelvis-like surface (iliac wing patch, acetabular cup
patch and a connecting column), places two 4-BB constellations on it,
and renders fluoroscopy views: a bone attenuation layer from Gaussian
splats of the surface samples, anti-aliased dark BB disks, low-frequency
texture and optional wire decorations.  Detections are synthesised from
the projected truth with a configurable noise model (sub-pixel jitter,
occlusions, clutter, camera miscalibration) so that every noise source
is controlled independently of the detector.

Everything is a pure function of ``(config, seed)``; per-view draws use
``default_rng((seed, view_index))`` so adding or reordering views never
changes the noise of another view.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from .detection import DetectionSet
from .errors import (
    BehindSource,
    ConstraintUnsatisfiable,
    DegenerateClusters,
    TooFewBBs,
)
from .geometry import (
    AnatomicalFrame,
    CArmCamera,
    LceLandmarks,
    RigidTransform,
    default_carm,
    euler_compose,
    rotation_about_axis,
    rotation_from_rotvec,
)
from .reconstruct import SurfaceModel, label_constellations

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Geometry and placement constraints for synthetic scenes."""

    operative_side: str = "left"
    bb_diameter_mm: float = 1.5
    wing_center: tuple[float, float, float] = (-5.0, 70.0, -12.0)
    wing_radius_mm: float = 55.0
    cup_radius_mm: float = 28.0
    n_wing_points: int = 520
    n_cup_points: int = 320
    n_column_points: int = 160
    ilium_min_separation_mm: float = 20.0
    ilium_min_area_mm2: float = 100.0
    ilium_max_radius_mm: float = 36.0
    fragment_min_separation_mm: float = 16.0
    fragment_min_area_mm2: float = 50.0
    fragment_max_radius_mm: float = 26.0
    # implant protocol: every anchor triangle is clearly scalene so that
    # a 3-detection view cannot fit a swapped correspondence
    scalene_min_excess: float = 0.10
    constellation_separation_mm: float = 40.0
    # BBs are implanted clearly on the operative side and high on the
    # wing, away from the sagittal plane and the acetabular region
    ilium_lateral_margin_mm: float = 10.0
    ilium_min_height_mm: float = 55.0
    fragment_lateral_margin_mm: float = 6.0
    max_placement_attempts: int = 2000

    def __post_init__(self) -> None:
        if self.operative_side not in ("left", "right"):
            raise ValueError("operative_side must be 'left' or 'right'")


@dataclass(frozen=True)
class Scene:
    """A synthetic hemipelvis with BB constellations and ground truth.

    The volume frame is the scene's world frame; cameras carry the
    volume-to-camera extrinsics.  ``fragment_bbs_preop`` holds the BB
    positions before relocation; the current positions follow from
    ``true_delta_app`` (an APP-frame motion).
    """

    config: SceneConfig
    surface: SurfaceModel
    ilium_bbs: np.ndarray           # (4, 3) volume frame
    fragment_bbs_preop: np.ndarray  # (4, 3) volume frame
    true_delta_app: RigidTransform  # "app" -> "app"
    landmarks: LceLandmarks
    iliac_reference: np.ndarray     # (3,) volume frame

    @property
    def app(self) -> AnatomicalFrame:
        return self.surface.app

    @property
    def operative_side(self) -> str:
        return self.config.operative_side

    @property
    def fragment_bbs(self) -> np.ndarray:
        """Current (post-motion) fragment BB positions, volume frame."""
        t_av = self.app.t_app_to_volume
        motion = t_av @ self.true_delta_app @ t_av.inverse()
        return motion.apply(self.fragment_bbs_preop)

    def fragment_pose_for(self, ilium_pose: RigidTransform) -> RigidTransform:
        """True fragment pose in the frame of a given ilium pose."""
        t_av = self.app.t_app_to_volume.retag(None, None)
        motion = t_av @ self.true_delta_app.retag(None, None) @ t_av.inverse()
        return ilium_pose @ motion.retag(None, None)


def _cap_points(
    center: np.ndarray,
    radius: float,
    direction: np.ndarray,
    half_angle_deg: float,
    n: int,
    rng: np.random.Generator,
    jitter_mm: float = 0.6,
) -> np.ndarray:
    """Even spiral sampling of a spherical cap with slight radial jitter."""
    direction = direction / np.linalg.norm(direction)
    cos_max = np.cos(np.radians(half_angle_deg))
    k = np.arange(n)
    cos_t = 1.0 - (1.0 - cos_max) * (k + 0.5) / n
    sin_t = np.sqrt(np.clip(1.0 - cos_t**2, 0.0, None))
    phi = _GOLDEN_ANGLE * k
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=1)
    # rotate +Z onto the cap direction
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, direction)
    s = np.linalg.norm(v)
    if s < 1e-12:
        rot = np.eye(3) if direction[2] > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        angle = np.arctan2(s, float(z @ direction))
        rot = rotation_from_rotvec(v / s * angle)
    radii = radius + rng.uniform(-jitter_mm, jitter_mm, size=n)
    return center + radii[:, None] * (local @ rot.T)


def _pick_constellation(
    patch: np.ndarray,
    min_sep: float,
    min_area: float,
    max_radius: float,
    scalene: float,
    rng: np.random.Generator,
    attempts: int,
) -> np.ndarray | None:
    for _ in range(attempts):
        idx = rng.choice(len(patch), size=4, replace=False)
        pts = patch[idx]
        if np.linalg.norm(pts - pts.mean(axis=0), axis=1).max() > max_radius:
            continue
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.linalg.norm(diffs, axis=2)
        if dists[np.triu_indices(4, 1)].min() < min_sep:
            continue
        ok = True
        for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
            area = 0.5 * np.linalg.norm(
                np.cross(pts[j] - pts[i], pts[k] - pts[i])
            )
            if area < min_area:
                ok = False
                break
            edges = np.sort([dists[i, j], dists[i, k], dists[j, k]])
            if edges[1] < (1.0 + scalene) * edges[0] or edges[2] < (
                1.0 + scalene
            ) * edges[1]:
                ok = False
                break
        if ok:
            return pts
    return None


def generate_scene(config: SceneConfig | None = None, seed=0) -> Scene:
    """Build a deterministic synthetic scene for the given seed.

    Raises:
        ConstraintUnsatisfiable: BB placement constraints could not be
            met within the configured attempt budget.
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    mirror = 1.0 if config.operative_side == "left" else -1.0

    wing_center = np.array(config.wing_center) * np.array([mirror, 1.0, 1.0])
    cup_center = np.zeros(3)

    wing = _cap_points(
        wing_center,
        config.wing_radius_mm,
        np.array([0.35 * mirror, 0.25, 0.9]),
        55.0,
        config.n_wing_points,
        rng,
    )
    cup = _cap_points(
        cup_center,
        config.cup_radius_mm,
        np.array([0.55 * mirror, -0.1, 0.83]),
        62.0,
        config.n_cup_points,
        rng,
    )
    k = np.arange(config.n_column_points)
    t = (k + 0.5) / config.n_column_points
    spine = wing_center * (1.0 - t[:, None]) + cup_center * t[:, None]
    ring_r = 14.0 - 6.0 * t
    phi = _GOLDEN_ANGLE * k
    column = spine + np.stack(
        [ring_r * np.cos(phi), np.zeros_like(t), ring_r * np.sin(phi)], axis=1
    )
    surface_points = np.vstack([wing, cup, column])

    # APP frame: a small rigid offset away from the volume axes, origin at
    # the (femoral head = cup) centre.
    offset_rot = rotation_from_rotvec(rng.uniform(-0.05, 0.05, size=3))
    offset_trans = cup_center + rng.uniform(-3.0, 3.0, size=3)
    t_app_to_volume = RigidTransform(offset_rot, offset_trans, "app", "volume")
    app = AnatomicalFrame(t_app_to_volume)
    surface = SurfaceModel(surface_points, app)

    lr_wing = app.t_volume_to_app.apply(wing)[:, 0] * mirror
    lr_cup = app.t_volume_to_app.apply(cup)[:, 0] * mirror
    wing_sites = wing[
        (lr_wing >= config.ilium_lateral_margin_mm)
        & (wing[:, 1] >= config.ilium_min_height_mm)
    ]
    cup_sites = cup[lr_cup >= config.fragment_lateral_margin_mm]
    if len(wing_sites) < 12 or len(cup_sites) < 12:
        raise ConstraintUnsatisfiable("too few admissible BB sites")

    ilium_bbs = fragment_bbs = None
    for _ in range(8):
        ilium_bbs = _pick_constellation(
            wing_sites,
            config.ilium_min_separation_mm,
            config.ilium_min_area_mm2,
            config.ilium_max_radius_mm,
            config.scalene_min_excess,
            rng,
            config.max_placement_attempts,
        )
        fragment_bbs = _pick_constellation(
            cup_sites,
            config.fragment_min_separation_mm,
            config.fragment_min_area_mm2,
            config.fragment_max_radius_mm,
            config.scalene_min_excess,
            rng,
            config.max_placement_attempts,
        )
        if ilium_bbs is None or fragment_bbs is None:
            continue
        # the two clusters must stay separable by any reasonable split:
        # centroid distance well beyond both cluster radii
        c_il = ilium_bbs.mean(axis=0)
        c_fr = fragment_bbs.mean(axis=0)
        sep = np.linalg.norm(c_il - c_fr)
        radius = max(
            np.linalg.norm(ilium_bbs - c_il, axis=1).max(),
            np.linalg.norm(fragment_bbs - c_fr, axis=1).max(),
        )
        if sep < max(config.constellation_separation_mm, 2.0 * radius + 5.0):
            ilium_bbs = fragment_bbs = None
            continue
        # rehearse the downstream labelling on the true positions: the
        # deterministic 2-means split must reproduce the membership, and
        # every BB must prefer its own centroid with margin to spare, or
        # a reconstructed cloud could be mislabelled even when the
        # reconstruction itself is exact
        try:
            il_check, _ = label_constellations(
                np.vstack([ilium_bbs, fragment_bbs]),
                surface,
                config.operative_side,
                wing.mean(axis=0),
            )
        except (TooFewBBs, DegenerateClusters):
            ilium_bbs = fragment_bbs = None
            continue
        truth = {tuple(np.round(p, 6)) for p in ilium_bbs}
        got = {tuple(np.round(p, 6)) for p in il_check.points}
        d_own = np.concatenate([
            np.linalg.norm(ilium_bbs - c_il, axis=1),
            np.linalg.norm(fragment_bbs - c_fr, axis=1),
        ])
        d_other = np.concatenate([
            np.linalg.norm(ilium_bbs - c_fr, axis=1),
            np.linalg.norm(fragment_bbs - c_il, axis=1),
        ])
        if got == truth and np.all(d_other - d_own >= 3.0):
            break
        ilium_bbs = fragment_bbs = None
    if ilium_bbs is None or fragment_bbs is None:
        raise ConstraintUnsatisfiable("could not place BB constellations")

    # LCE landmarks in the APP frame: head centre at the origin, lateral
    # acetabular edge 35 mm out at a 25 degree baseline angle.
    theta0 = np.radians(25.0)
    edge = 35.0 * np.array([np.sin(theta0) * mirror, np.cos(theta0), 0.0])
    landmarks = LceLandmarks(np.zeros(3), edge)

    return Scene(
        config=config,
        surface=surface,
        ilium_bbs=ilium_bbs,
        fragment_bbs_preop=fragment_bbs,
        true_delta_app=RigidTransform.identity("app"),
        landmarks=landmarks,
        iliac_reference=wing.mean(axis=0),
    )


def apply_fragment_motion(scene: Scene, delta_app: RigidTransform) -> Scene:
    """Compose an additional APP-frame fragment motion onto the scene."""
    delta = delta_app.retag("app", "app")
    return replace(scene, true_delta_app=delta @ scene.true_delta_app)


def sample_fragment_motion(rng: np.random.Generator) -> RigidTransform:
    """Random plausible PAO relocation (APP frame).

    Rotation is drawn per-axis (more about LR/AP than IS, as coverage
    corrections are), translation uniformly in a small box; both stay
    well inside the fragment-stage plausibility gates.
    """
    lr = rng.uniform(-20.0, 20.0)
    is_ = rng.uniform(-8.0, 8.0)
    ap = rng.uniform(-20.0, 20.0)
    trans = rng.uniform(-8.0, 8.0, size=3)
    return RigidTransform(euler_compose(lr, is_, ap), trans, "app", "app")


# ---------------------------------------------------------------------------
# views and noise
# ---------------------------------------------------------------------------

def make_view_cameras(
    angles_deg=(0.0, -25.0, 30.0),
    image_dims: tuple[int, int] = (1536, 1536),
    depth_mm: float = 765.0,
    center=(0.0, 30.0, -5.0),
) -> list[CArmCamera]:
    """C-arm orbit about the patient IS axis; 0 degrees is the AP view.

    The base orientation shows the patient head-up (superior against
    increasing rows), matching the nominal AP reference pose.
    """
    center = np.asarray(center, dtype=np.float64)
    base = rotation_about_axis((0.0, 0.0, 1.0), 180.0)
    cameras = []
    for angle in angles_deg:
        rot = base @ rotation_about_axis((0.0, 1.0, 0.0), float(angle))
        trans = np.array([0.0, 0.0, depth_mm]) - rot @ center
        extr = RigidTransform(rot, trans, "volume", "carm")
        cameras.append(default_carm(image_dims=image_dims, extrinsics=extr))
    return cameras


@dataclass(frozen=True)
class NoiseModel:
    """Independent noise sources applied when synthesising detections.

    ``camera_rot_deg`` / ``camera_trans_mm`` bound a uniform rigid
    miscalibration of each view (the scene is imaged by the perturbed
    camera while consumers are given the nominal one).  Exactly
    ``n_occlusions`` visible BBs are dropped per view and
    ``n_false_detections`` clutter detections added, on the
    contralateral image half when ``contralateral_clutter`` is set.
    """

    detection_jitter_px: float = 0.0
    camera_rot_deg: float = 0.0
    camera_trans_mm: float = 0.0
    n_occlusions: int = 0
    n_false_detections: int = 0
    contralateral_clutter: bool = True


NOISE_PROFILES: dict[str, NoiseModel] = {
    "zero": NoiseModel(),
    "calibrated": NoiseModel(
        detection_jitter_px=0.5,
        camera_rot_deg=0.5,
        camera_trans_mm=2.0,
        n_occlusions=1,
        n_false_detections=4,
        contralateral_clutter=True,
    ),
}


@dataclass
class ViewRender:
    """Per-view output: image (optional), synthetic detections, truth."""

    detections: DetectionSet
    truth_pixels: np.ndarray       # (8, 2) projected truth, NaN if not visible
    truth_visible: np.ndarray      # (8,) bool, after in-image test
    detection_sources: np.ndarray  # per detection: BB index 0..7 or -1 clutter
    nominal_camera: CArmCamera
    true_camera: CArmCamera
    image: np.ndarray | None = None


@dataclass
class RenderResult:
    views: list[ViewRender] = field(default_factory=list)

    @property
    def detections(self) -> list[DetectionSet]:
        return [v.detections for v in self.views]

    @property
    def cameras(self) -> list[CArmCamera]:
        return [v.nominal_camera for v in self.views]

    @property
    def images(self) -> list[np.ndarray | None]:
        return [v.image for v in self.views]


def _perturb_camera(
    camera: CArmCamera, noise: NoiseModel, rng: np.random.Generator
) -> CArmCamera:
    if noise.camera_rot_deg <= 0.0 and noise.camera_trans_mm <= 0.0:
        return camera
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, noise.camera_rot_deg)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = rng.uniform(0.0, noise.camera_trans_mm) * direction
    wobble = RigidTransform(
        rotation_from_rotvec(np.radians(angle) * axis), shift
    )
    extr = camera.extrinsics
    true_extr = RigidTransform(
        wobble.rotation @ extr.rotation,
        wobble.rotation @ extr.translation + wobble.translation,
        extr.from_frame,
        extr.to_frame,
    )
    return replace(camera, extrinsics=true_extr)


def _disk_layer(
    shape: tuple[int, int],
    centers: np.ndarray,
    radii_px: np.ndarray,
    darkness: float = 0.55,
) -> np.ndarray:
    layer = np.zeros(shape)
    rows, cols = shape
    for (cx, cy), r in zip(centers, radii_px):
        if not np.isfinite(cx) or not np.isfinite(cy):
            continue
        half = int(np.ceil(r)) + 2
        ix, iy = int(round(cx)), int(round(cy))
        x0, x1 = max(ix - half, 0), min(ix + half + 1, cols)
        y0, y1 = max(iy - half, 0), min(iy + half + 1, rows)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(xx - cx, yy - cy)
        layer[y0:y1, x0:x1] += darkness * np.clip(r - dist + 0.5, 0.0, 1.0)
    return layer


def _bone_layer(
    camera: CArmCamera,
    surface_points: np.ndarray,
    shape: tuple[int, int],
    ds: int = 8,
) -> np.ndarray:
    pixels, depths = camera.project_world(surface_points)
    ok = (depths > 0.0) & np.isfinite(pixels).all(axis=1)
    h, w = shape[0] // ds, shape[1] // ds
    canvas = np.zeros((h, w))
    centers = pixels[ok] / ds
    inside = (
        (centers[:, 0] > -4) & (centers[:, 0] < w + 4)
        & (centers[:, 1] > -4) & (centers[:, 1] < h + 4)
    )
    cx = np.clip(np.round(centers[inside, 0]).astype(int), 0, w - 1)
    cy = np.clip(np.round(centers[inside, 1]).astype(int), 0, h - 1)
    np.add.at(canvas, (cy, cx), 1.0)
    canvas = gaussian_filter(canvas, sigma=2.5, mode="constant")
    peak = canvas.max()
    if peak > 0:
        canvas *= 0.4 / peak
    full = zoom(canvas, ds, order=1, mode="nearest", grid_mode=True, prefilter=False)
    return full[: shape[0], : shape[1]]


def _texture_layer(
    shape: tuple[int, int], rng: np.random.Generator, ds: int = 32
) -> np.ndarray:
    h, w = shape[0] // ds, shape[1] // ds
    base = gaussian_filter(rng.normal(size=(h, w)), sigma=5.0, mode="reflect")
    span = np.abs(base).max()
    if span > 0:
        base *= 0.03 / span
    full = zoom(base, ds, order=1, mode="nearest", grid_mode=True, prefilter=False)
    return full[: shape[0], : shape[1]]


def _wire_layer(
    shape: tuple[int, int], n_wires: int, rng: np.random.Generator
) -> np.ndarray:
    layer = np.zeros(shape)
    rows, cols = shape
    for _ in range(n_wires):
        a = rng.uniform([0.1 * cols, 0.1 * rows], [0.9 * cols, 0.9 * rows])
        ang = rng.uniform(0.0, np.pi)
        d = np.array([np.cos(ang), np.sin(ang)])
        length = rng.uniform(0.4, 0.9) * min(rows, cols)
        steps = int(length)
        t = np.linspace(-length / 2, length / 2, steps)
        pts = a + t[:, None] * d
        px = np.round(pts[:, 0]).astype(int)
        py = np.round(pts[:, 1]).astype(int)
        ok = (px >= 0) & (px < cols) & (py >= 0) & (py < rows)
        layer[py[ok], px[ok]] = 0.25
    if n_wires:
        layer = gaussian_filter(layer, sigma=0.8, mode="constant")
    return layer


def render_views(
    scene: Scene,
    cameras: list[CArmCamera],
    noise: NoiseModel | None = None,
    seed=0,
    render_images: bool = True,
    n_wires: int = 0,
) -> RenderResult:
    """Project the scene into each view and synthesise noisy detections.

    Detections are the projected BB truth (through the perturbed camera)
    plus jitter, minus occlusions, plus clutter, randomly shuffled.
    Rendered images always show every visible BB; occlusion and clutter
    model detector failures, not scene content.

    Raises:
        BehindSource: a BB lies at or behind a camera source plane.
    """
    noise = noise or NoiseModel()
    bb_points = np.vstack([scene.ilium_bbs, scene.fragment_bbs])
    result = RenderResult()
    for view_index, camera in enumerate(cameras):
        rng = np.random.default_rng((seed, view_index))
        true_cam = _perturb_camera(camera, noise, rng)

        pixels, depths = true_cam.project_world(bb_points)
        if np.any(depths <= 1e-6):
            raise BehindSource(
                f"view {view_index}: BB at depth {depths.min():.3g} mm"
            )
        visible = true_cam.in_image(pixels)
        truth_pixels = np.where(visible[:, None], pixels, np.nan)

        vis_idx = np.flatnonzero(visible)
        n_occ = min(noise.n_occlusions, max(len(vis_idx) - 0, 0))
        occluded = (
            rng.choice(vis_idx, size=n_occ, replace=False)
            if n_occ > 0
            else np.empty(0, dtype=int)
        )
        keep = np.setdiff1d(vis_idx, occluded)

        det_pixels = pixels[keep]
        if noise.detection_jitter_px > 0.0:
            det_pixels = det_pixels + rng.normal(
                0.0, noise.detection_jitter_px, size=det_pixels.shape
            )
        sources = keep.astype(np.intp)

        if noise.n_false_detections > 0:
            rows, cols = camera.image_dims
            if noise.contralateral_clutter:
                # operative-side anatomy projects to the opposite image
                # half (the AP base orientation mirrors left-right)
                if scene.operative_side == "left":
                    x_lo, x_hi = 0.55 * cols, cols - 1.0
                else:
                    x_lo, x_hi = 0.0, 0.45 * cols
            else:
                x_lo, x_hi = 0.0, cols - 1.0
            clutter = np.stack(
                [
                    rng.uniform(x_lo, x_hi, size=noise.n_false_detections),
                    rng.uniform(0.0, rows - 1.0, size=noise.n_false_detections),
                ],
                axis=1,
            )
            det_pixels = np.vstack([det_pixels, clutter])
            sources = np.concatenate(
                [sources, np.full(noise.n_false_detections, -1, dtype=np.intp)]
            )

        order = rng.permutation(len(det_pixels))
        det_pixels = det_pixels[order]
        sources = sources[order]
        scores = np.linspace(1.0, 0.5, num=len(det_pixels))
        detections = DetectionSet(det_pixels, scores, f"view{view_index}")

        image = None
        if render_images:
            shape = camera.image_dims
            bone = _bone_layer(true_cam, scene.surface.points, shape)
            radius_mm = scene.config.bb_diameter_mm / 2.0
            ratios = depths / true_cam.sdd
            radii_px = radius_mm / (ratios * true_cam.pixel_spacing)
            disks = _disk_layer(shape, pixels, radii_px)
            texture = _texture_layer(shape, rng)
            wires = _wire_layer(shape, n_wires, rng)
            image = np.clip(0.88 - bone - disks - wires + texture, 0.02, 1.0)

        result.views.append(
            ViewRender(
                detections=detections,
                truth_pixels=truth_pixels,
                truth_visible=visible,
                detection_sources=sources,
                nominal_camera=camera,
                true_camera=true_cam,
                image=image,
            )
        )
    return result
