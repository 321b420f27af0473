"""Versioned JSON and image output for scenes, priors, and reports.

All numeric values are written with 6 significant digits, keys sorted,
so a fixed input produces byte-identical files.  Lengths are mm and
matrices are row-major nested lists.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image

from .geometry import (
    AnatomicalFrame,
    CArmCamera,
    LceLandmarks,
    RigidTransform,
)
from .metrics import ErrorReport
from .pipeline import FragmentPoseEstimate, ScenePriors, StageCounts
from .reconstruct import Constellation, SurfaceModel
from .simulate import Scene, SceneConfig

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _round6(value: Any) -> Any:
    """Recursively round floats to 6 significant digits."""
    if isinstance(value, bool):
        return value
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.6g}")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, np.ndarray):
        return _round6(value.tolist())
    if isinstance(value, dict):
        return {k: _round6(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round6(v) for v in value]
    return value


def dumps_canonical(payload: dict) -> str:
    return json.dumps(_round6(payload), sort_keys=True, indent=2) + "\n"


def save_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(dumps_canonical(payload))


def load_json(path: str | Path, schema: str | None = None) -> dict:
    """Load a payload written by :func:`save_json`, checking its schema.

    Raises:
        ValueError: wrong or missing schema tag / unsupported version.
    """
    payload = json.loads(Path(path).read_text())
    if schema is not None and payload.get("schema") != schema:
        raise ValueError(
            f"{path}: expected schema {schema!r}, found {payload.get('schema')!r}"
        )
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {version!r}")
    return payload


def _tagged(schema: str, body: dict) -> dict:
    return {"schema": schema, "schema_version": SCHEMA_VERSION, **body}


# ---------------------------------------------------------------------------
# geometry payloads
# ---------------------------------------------------------------------------

def transform_to_dict(t: RigidTransform) -> dict:
    return {
        "rotation": t.rotation.tolist(),
        "translation": t.translation.tolist(),
        "from_frame": t.from_frame,
        "to_frame": t.to_frame,
    }


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a near-rotation (e.g. 6-digit rounded) onto SO(3)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def transform_from_dict(d: dict) -> RigidTransform:
    return RigidTransform(
        _nearest_rotation(np.array(d["rotation"], dtype=np.float64)),
        np.array(d["translation"], dtype=np.float64),
        d.get("from_frame"),
        d.get("to_frame"),
    )


def camera_to_dict(camera: CArmCamera) -> dict:
    return {
        "source": camera.source.tolist(),
        "detector_origin": camera.detector_origin.tolist(),
        "detector_row_dir": camera.detector_row_dir.tolist(),
        "detector_col_dir": camera.detector_col_dir.tolist(),
        "pixel_spacing": float(camera.pixel_spacing),
        "image_dims": list(camera.image_dims),
        "extrinsics": transform_to_dict(camera.extrinsics),
    }


def camera_from_dict(d: dict) -> CArmCamera:
    return CArmCamera(
        source=np.array(d["source"], dtype=np.float64),
        detector_origin=np.array(d["detector_origin"], dtype=np.float64),
        detector_row_dir=np.array(d["detector_row_dir"], dtype=np.float64),
        detector_col_dir=np.array(d["detector_col_dir"], dtype=np.float64),
        pixel_spacing=float(d["pixel_spacing"]),
        image_dims=tuple(d["image_dims"]),
        extrinsics=transform_from_dict(d["extrinsics"]),
    )


def _app_to_dict(app: AnatomicalFrame) -> dict:
    return {"t_app_to_volume": transform_to_dict(app.t_app_to_volume)}


def _app_from_dict(d: dict) -> AnatomicalFrame:
    return AnatomicalFrame(transform_from_dict(d["t_app_to_volume"]))


def _surface_to_dict(surface: SurfaceModel) -> dict:
    return {"points": surface.points.tolist(), "app": _app_to_dict(surface.app)}


def _surface_from_dict(d: dict) -> SurfaceModel:
    return SurfaceModel(
        np.array(d["points"], dtype=np.float64), _app_from_dict(d["app"])
    )


def constellation_to_dict(c: Constellation) -> dict:
    return {"label": c.label, "points": c.points.tolist()}


def constellation_from_dict(d: dict) -> Constellation:
    return Constellation(d["label"], np.array(d["points"], dtype=np.float64))


def _landmarks_to_dict(lm: LceLandmarks) -> dict:
    return {
        "head_center": lm.head_center.tolist(),
        "lateral_edge": lm.lateral_edge.tolist(),
    }


def _landmarks_from_dict(d: dict) -> LceLandmarks:
    return LceLandmarks(
        np.array(d["head_center"], dtype=np.float64),
        np.array(d["lateral_edge"], dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# scenes and priors
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    cfg = {
        field: getattr(scene.config, field)
        for field in scene.config.__dataclass_fields__
    }
    return _tagged(
        "fragtrack/scene",
        {
            "config": cfg,
            "surface": _surface_to_dict(scene.surface),
            "ilium_bbs": scene.ilium_bbs.tolist(),
            "fragment_bbs_preop": scene.fragment_bbs_preop.tolist(),
            "true_delta_app": transform_to_dict(scene.true_delta_app),
            "landmarks": _landmarks_to_dict(scene.landmarks),
            "iliac_reference": scene.iliac_reference.tolist(),
        },
    )


def scene_from_dict(d: dict) -> Scene:
    cfg = dict(d["config"])
    for key in ("wing_center",):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    return Scene(
        config=SceneConfig(**cfg),
        surface=_surface_from_dict(d["surface"]),
        ilium_bbs=np.array(d["ilium_bbs"], dtype=np.float64),
        fragment_bbs_preop=np.array(d["fragment_bbs_preop"], dtype=np.float64),
        true_delta_app=transform_from_dict(d["true_delta_app"]),
        landmarks=_landmarks_from_dict(d["landmarks"]),
        iliac_reference=np.array(d["iliac_reference"], dtype=np.float64),
    )


def priors_to_dict(priors: ScenePriors) -> dict:
    return _tagged(
        "fragtrack/priors",
        {
            "ilium": constellation_to_dict(priors.ilium),
            "fragment": constellation_to_dict(priors.fragment),
            "surface": _surface_to_dict(priors.surface),
            "landmarks": _landmarks_to_dict(priors.landmarks),
        },
    )


def priors_from_dict(d: dict) -> ScenePriors:
    return ScenePriors(
        ilium=constellation_from_dict(d["ilium"]),
        fragment=constellation_from_dict(d["fragment"]),
        surface=_surface_from_dict(d["surface"]),
        landmarks=_landmarks_from_dict(d["landmarks"]),
    )


# ---------------------------------------------------------------------------
# estimates and error reports
# ---------------------------------------------------------------------------

def _counts_to_dict(counts: StageCounts) -> dict:
    return {
        "before": counts.before,
        "after_p3p": counts.after_p3p,
        "after_filter": counts.after_filter,
    }


def _counts_from_dict(d: dict) -> StageCounts:
    return StageCounts(d["before"], d["after_p3p"], d["after_filter"])


def estimate_to_dict(
    estimate: FragmentPoseEstimate, include_timings: bool = True
) -> dict:
    """Serialise an estimate; drop wall-clock timings for repeatable output."""
    opt = lambda t: None if t is None else transform_to_dict(t)  # noqa: E731
    body = {
        "status": estimate.status,
        "delta_app": opt(estimate.delta_app),
        "ilium_pose": opt(estimate.ilium_pose),
        "fragment_pose": opt(estimate.fragment_pose),
        "n_ilium_matched": estimate.n_ilium_matched,
        "n_frag_matched": estimate.n_frag_matched,
        "lce_deg": estimate.lce_deg,
        "ilium_counts": _counts_to_dict(estimate.ilium_counts),
        "fragment_counts": _counts_to_dict(estimate.fragment_counts),
        "ilium_matches": [list(m) for m in estimate.ilium_matches],
        "fragment_matches": [list(m) for m in estimate.fragment_matches],
    }
    if include_timings:
        body["timings"] = dict(estimate.timings)
    return _tagged("fragtrack/estimate", body)


def estimate_from_dict(d: dict) -> FragmentPoseEstimate:
    opt = lambda t: None if t is None else transform_from_dict(t)  # noqa: E731
    return FragmentPoseEstimate(
        status=d["status"],
        delta_app=opt(d["delta_app"]),
        ilium_pose=opt(d["ilium_pose"]),
        fragment_pose=opt(d["fragment_pose"]),
        n_ilium_matched=d["n_ilium_matched"],
        n_frag_matched=d["n_frag_matched"],
        lce_deg=d["lce_deg"],
        ilium_counts=_counts_from_dict(d["ilium_counts"]),
        fragment_counts=_counts_from_dict(d["fragment_counts"]),
        timings=dict(d.get("timings", {})),
        ilium_matches=[tuple(m) for m in d.get("ilium_matches", [])],
        fragment_matches=[tuple(m) for m in d.get("fragment_matches", [])],
    )


_REPORT_COLUMNS = (
    "rot_total",
    "rot_lr",
    "rot_is",
    "rot_ap",
    "trans_total",
    "trans_lr",
    "trans_is",
    "trans_ap",
    "lce_error",
)


def report_to_dict(report: ErrorReport, include_timings: bool = True) -> dict:
    body = {name: getattr(report, name) for name in _REPORT_COLUMNS}
    body["status"] = report.status
    if include_timings:
        body["timings"] = dict(report.timings)
    return _tagged("fragtrack/error_report", body)


def write_error_csv(path: str | Path, reports: Iterable[ErrorReport]) -> None:
    """One row per report: the APP-axis error columns plus status."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_REPORT_COLUMNS) + ["status"])
        for report in reports:
            row = [f"{getattr(report, name):.6g}" for name in _REPORT_COLUMNS]
            writer.writerow(row + [report.status])


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit grayscale PNG or PGM."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ValueError(f"unsupported image format {path.suffix!r}")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("image must be a 2-D array")
    data = np.clip(np.round(arr * 255.0), 0.0, 255.0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)
