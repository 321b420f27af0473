"""Command-line driver for the synthetic fluoroscopy workflow.

Subcommands cover the full protocol: ``simulate`` writes a seeded scene
with three pre-operative views and one noisy intra-operative view;
``reconstruct`` recovers the BB constellations from the pre-operative
detections; ``estimate`` runs the single-view pipeline; ``evaluate``
scores an estimate against the scene truth; ``detect`` and ``bench``
expose the detector and the seeded benchmark batches.

Exit codes: 0 success, 2 pipeline-reported failure, 3 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import serialio
from .detection import (
    PRESETS,
    DetectionSet,
    detect_bbs_in_image,
    load_image,
    read_detections_csv,
    write_detections_csv,
)
from .errors import FragtrackError
from .metrics import (
    INTRAOP_SEED_OFFSET,
    MOTION_STREAM,
    BenchmarkConfig,
    evaluate,
    run_benchmark,
)
from .pipeline import ScenePriors, estimate_single_view
from .reconstruct import label_constellations, reconstruct_bbs
from .simulate import (
    NOISE_PROFILES,
    NoiseModel,
    SceneConfig,
    apply_fragment_motion,
    generate_scene,
    make_view_cameras,
    render_views,
    sample_fragment_motion,
)

_PREOP_VIEWS = ("view0", "view1", "view2")
_INTRAOP_VIEW = "intraop"


# ---------------------------------------------------------------------------
# shared option parsing
# ---------------------------------------------------------------------------

def _noise_profile(spec: str) -> NoiseModel:
    """Resolve a named profile or a JSON file of NoiseModel fields."""
    if spec in NOISE_PROFILES:
        return NOISE_PROFILES[spec]
    path = Path(spec)
    if not path.exists():
        names = ", ".join(sorted(NOISE_PROFILES))
        raise ValueError(f"unknown noise profile {spec!r} (named profiles: {names})")
    return NoiseModel(**json.loads(path.read_text()))


def _scene_config(path: str | None) -> SceneConfig:
    if path is None:
        return SceneConfig()
    payload = json.loads(Path(path).read_text())
    if "wing_center" in payload:
        payload["wing_center"] = tuple(payload["wing_center"])
    return SceneConfig(**payload)


def _load_cameras(path: str) -> list:
    payload = serialio.load_json(path, "fragtrack/cameras")
    return [serialio.camera_from_dict(c) for c in payload["cameras"]]


def _pick_view(path: str, view_id: str) -> DetectionSet:
    by_id = {d.view_id: d for d in read_detections_csv(path)}
    if view_id not in by_id:
        raise ValueError(
            f"view {view_id!r} not present in {path} (found: {sorted(by_id)})"
        )
    return by_id[view_id]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = _noise_profile(args.noise_profile)
    scene = generate_scene(_scene_config(args.config), seed=args.seed)
    cameras = make_view_cameras()

    # pre-operative session: calibrated and unobstructed, jitter only
    recon_noise = NoiseModel(detection_jitter_px=noise.detection_jitter_px)
    preop = render_views(
        scene, cameras, noise=recon_noise, seed=args.seed,
        render_images=not args.no_images,
    )
    motion = sample_fragment_motion(np.random.default_rng((MOTION_STREAM, args.seed)))
    moved = apply_fragment_motion(scene, motion)
    intraop = render_views(
        moved, [cameras[0]], noise=noise, seed=args.seed + INTRAOP_SEED_OFFSET,
        render_images=not args.no_images,
    ).views[0]

    serialio.save_json(out / "scene.json", serialio.scene_to_dict(moved))
    serialio.save_json(
        out / "cameras.json",
        {
            "schema": "fragtrack/cameras",
            "schema_version": serialio.SCHEMA_VERSION,
            "cameras": [serialio.camera_to_dict(c) for c in cameras],
        },
    )
    det_sets = list(preop.detections)
    intraop_dets = DetectionSet(
        intraop.detections.points, intraop.detections.scores, _INTRAOP_VIEW
    )
    det_sets.append(intraop_dets)
    write_detections_csv(out / "detections.csv", det_sets)
    if not args.no_images:
        for view_id, view in zip(_PREOP_VIEWS, preop.views):
            serialio.save_image(out / f"{view_id}.png", view.image)
        serialio.save_image(out / f"{_INTRAOP_VIEW}.png", intraop.image)
    print(f"scene {args.seed} -> {out}")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    if args.bb_preset not in PRESETS:
        raise ValueError(
            f"unknown preset {args.bb_preset!r} (presets: {sorted(PRESETS)})"
        )
    image = load_image(args.image)
    det = detect_bbs_in_image(image, PRESETS[args.bb_preset], view_id=args.view_id)
    write_detections_csv(args.out, [det])
    print(f"{len(det)} detections -> {args.out}")
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    scene = serialio.scene_from_dict(serialio.load_json(args.scene, "fragtrack/scene"))
    cameras = _load_cameras(args.cameras)
    view_ids = args.views.split(",")
    if len(view_ids) != len(cameras):
        raise ValueError(
            f"{len(view_ids)} view ids for {len(cameras)} cameras"
        )
    det_sets = [_pick_view(args.detections, v) for v in view_ids]
    points = reconstruct_bbs(det_sets, cameras, scene.surface)
    ilium, fragment = label_constellations(
        points, scene.surface, scene.operative_side, scene.iliac_reference
    )
    priors = ScenePriors(
        ilium=ilium, fragment=fragment, surface=scene.surface,
        landmarks=scene.landmarks,
    )
    serialio.save_json(args.out, serialio.priors_to_dict(priors))
    print(
        f"{len(points)} BBs -> {len(ilium.points)} ilium"
        f" + {len(fragment.points)} fragment -> {args.out}"
    )
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    priors = serialio.priors_from_dict(serialio.load_json(args.priors, "fragtrack/priors"))
    camera = _load_cameras(args.cameras)[args.camera_index]
    image = load_image(args.image)
    detections = None
    detector_config = None
    if args.detections is not None:
        detections = _pick_view(args.detections, args.view_id)
    else:
        if args.bb_preset not in PRESETS:
            raise ValueError(
                f"unknown preset {args.bb_preset!r} (presets: {sorted(PRESETS)})"
            )
        detector_config = PRESETS[args.bb_preset]
    estimate = estimate_single_view(
        image, camera, priors, detections=detections,
        detector_config=detector_config,
    )
    serialio.save_json(
        args.out,
        serialio.estimate_to_dict(estimate, include_timings=not args.deterministic),
    )
    if estimate.status == "success":
        print(
            f"success: {estimate.n_ilium_matched} ilium"
            f" + {estimate.n_frag_matched} fragment BBs matched,"
            f" LCE {estimate.lce_deg:.2f} deg -> {args.out}"
        )
        return 0
    print(f"{estimate.status} -> {args.out}", file=sys.stderr)
    return 2


def cmd_evaluate(args: argparse.Namespace) -> int:
    estimate = serialio.estimate_from_dict(
        serialio.load_json(args.estimate, "fragtrack/estimate")
    )
    scene = serialio.scene_from_dict(serialio.load_json(args.scene, "fragtrack/scene"))
    report = evaluate(estimate, scene)  # EstimateFailed on failures -> exit 2
    serialio.write_error_csv(args.out, [report])
    print(
        f"rot {report.rot_total:.4g} deg  trans {report.trans_total:.4g} mm"
        f"  LCE {report.lce_error:.4g} deg -> {args.out}"
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = BenchmarkConfig(
        n_seeds=args.seeds,
        base_seed=args.seed,
        scene=_scene_config(args.config),
        view_noise=_noise_profile(args.noise_profile),
        threads=args.threads,
        deterministic=args.deterministic,
    )
    summary = run_benchmark(config)
    print(summary.format_table())
    if args.out is not None:
        serialio.write_error_csv(
            args.out, [o.report for o in summary.successes]
        )
    return 0 if not summary.failures else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fragtrack",
        description="Fiducial-based fragment pose estimation on synthetic fluoroscopy.",
    )
    sub = parser.add_subparsers(dest="command")

    sim = sub.add_parser("simulate", help="generate a seeded scene and its views")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--noise-profile", default="zero",
                     help="profile name or JSON path (default: zero)")
    sim.add_argument("--config", default=None, help="scene config JSON path")
    sim.add_argument("--no-images", action="store_true",
                     help="write detections and truth only")
    sim.set_defaults(func=cmd_simulate)

    det = sub.add_parser("detect", help="detect BBs in one image")
    det.add_argument("--image", required=True)
    det.add_argument("--out", required=True, help="detections CSV path")
    det.add_argument("--bb-preset", default="bb-1.5mm")
    det.add_argument("--view-id", default="view0")
    det.set_defaults(func=cmd_detect)

    rec = sub.add_parser("reconstruct",
                         help="triangulate and label BBs from the pre-op views")
    rec.add_argument("--scene", required=True, help="scene JSON (surface + truth)")
    rec.add_argument("--cameras", required=True, help="cameras JSON")
    rec.add_argument("--detections", required=True, help="detections CSV")
    rec.add_argument("--views", default=",".join(_PREOP_VIEWS),
                     help="comma-separated view ids matching the cameras")
    rec.add_argument("--out", required=True, help="priors JSON path")
    rec.set_defaults(func=cmd_reconstruct)

    est = sub.add_parser("estimate",
                         help="single-view fragment pose from priors")
    est.add_argument("--priors", required=True, help="priors JSON from reconstruct")
    est.add_argument("--cameras", required=True, help="cameras JSON")
    est.add_argument("--camera-index", type=int, default=0,
                     help="which camera took the intra-op view (default 0)")
    est.add_argument("--image", required=True, help="intra-op image (PNG/PGM)")
    est.add_argument("--detections", default=None,
                     help="detections CSV; omit to run the detector on the image")
    est.add_argument("--view-id", default=_INTRAOP_VIEW)
    est.add_argument("--bb-preset", default="bb-1.5mm")
    est.add_argument("--deterministic", action="store_true",
                     help="omit wall-clock timings for repeatable reports")
    est.add_argument("--out", required=True, help="estimate JSON path")
    est.set_defaults(func=cmd_estimate)

    ev = sub.add_parser("evaluate", help="score an estimate against scene truth")
    ev.add_argument("--estimate", required=True, help="estimate JSON")
    ev.add_argument("--scene", required=True, help="scene JSON")
    ev.add_argument("--out", required=True, help="error CSV path")
    ev.set_defaults(func=cmd_evaluate)

    ben = sub.add_parser("bench", help="run a seeded end-to-end batch")
    ben.add_argument("--seeds", type=int, default=50, help="number of seeds")
    ben.add_argument("--seed", type=int, default=0, help="first seed")
    ben.add_argument("--noise-profile", default="calibrated")
    ben.add_argument("--config", default=None, help="scene config JSON path")
    ben.add_argument("--threads", type=int, default=1)
    ben.add_argument("--deterministic", action="store_true",
                     help="force a sequential map over seeds")
    ben.add_argument("--out", default=None, help="per-seed error CSV path")
    ben.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; report those as invalid input
        code = 0 if exc.code is None else int(exc.code)
        return 3 if code == 2 else code
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 3
    try:
        return args.func(args)
    except FragtrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
