"""Independent verifiers used by unit and acceptance tests.

Nothing here calls back into the solver internals: the grid-search root
oracle evaluates the objective by brute force, and the solution verifier
re-derives every gate quantity from raw camera geometry plus an SVD
registration.
"""
from __future__ import annotations

import numpy as np

from fragtrack.geometry import CArmCamera
from fragtrack.p3p import P3PConfig, P3PSolution


def grid_search_length_minima(
    line: tuple[np.ndarray, np.ndarray],
    b1_point: np.ndarray,
    length: float,
    t_range: tuple[float, float] = (-1.0, 2.5),
    step: float = 1e-5,
) -> list[float]:
    """Brute-force minimisers of ((|B(t) - B1|^2 - length^2))^2.

    Interior grid minima are refined with a 3-point parabola fit, which
    stays independent of the closed-form solver.
    """
    s, bhat = (np.asarray(v, dtype=np.float64) for v in line)
    d = bhat - s
    t = np.arange(t_range[0], t_range[1] + step, step)
    pts = s[None, :] + t[:, None] * d[None, :]
    f = (np.sum((pts - b1_point) ** 2, axis=1) - length**2) ** 2
    interior = np.nonzero((f[1:-1] <= f[:-2]) & (f[1:-1] <= f[2:]))[0] + 1
    out: list[float] = []
    for i in interior:
        denom = f[i - 1] - 2.0 * f[i] + f[i + 1]
        off = 0.0 if denom <= 0.0 else float(
            np.clip(0.5 * (f[i - 1] - f[i + 1]) / denom, -0.5, 0.5)
        )
        cand = float(t[i] + off * step)
        if not any(abs(cand - prev) < 2.0 * step for prev in out):
            out.append(cand)
    return out


def _svd_register(src: np.ndarray, dst: np.ndarray):
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def verify_p3p_solution(
    sol: P3PSolution,
    model: np.ndarray,
    detections: np.ndarray,
    camera: CArmCamera,
    config: P3PConfig,
    slack: float = 1e-9,
) -> None:
    """Assert a solver output satisfies every gate, from first principles."""
    model = np.asarray(model, dtype=np.float64)
    dets = np.asarray(detections, dtype=np.float64)
    s = camera.source
    bhat = camera.detector_point_cam(dets)
    lo, hi = config.t_bounds

    assert lo - slack <= sol.ratio <= hi + slack, "ratio outside depth bounds"
    assert lo - slack <= sol.t2 <= hi + slack, "t2 outside depth bounds"
    assert lo - slack <= sol.t3 <= hi + slack, "t3 outside depth bounds"

    b = np.stack(
        [
            s + sol.ratio * (bhat[0] - s),
            s + sol.t2 * (bhat[1] - s),
            s + sol.t3 * (bhat[2] - s),
        ]
    )
    pairs = ((0, 1), (0, 2), (1, 2))
    worst = 0.0
    for i, j in pairs:
        l_model = np.linalg.norm(model[j] - model[i])
        l_rec = np.linalg.norm(b[j] - b[i])
        rel = abs(l_rec / l_model - 1.0)
        worst = max(worst, rel)
        assert rel <= config.epsilon + slack, f"length gate violated on pair {i}{j}"
    assert abs(worst - sol.residual) <= 1e-6, "reported residual inconsistent"

    # pose must be the least-squares rigid fit of the model onto b
    r_or, t_or = _svd_register(model, b)
    assert np.abs(sol.pose.rotation - r_or).max() < 1e-8, "pose is not the LSQ fit"
    assert np.abs(sol.pose.translation - t_or).max() < 1e-6, "pose is not the LSQ fit"

    posed = sol.pose.apply(model)
    for i in range(3):
        px = camera.project(posed[i])
        err = float(np.linalg.norm(px - dets[i]))
        assert err <= config.pixel_tol + 1e-6, f"reprojection {err:.3f} px too large"


def assert_solutions_admissible(solutions, model, dets, camera, config) -> None:
    per_ratio: dict[float, int] = {}
    for sol in solutions:
        verify_p3p_solution(sol, model, dets, camera, config)
        per_ratio[sol.ratio] = per_ratio.get(sol.ratio, 0) + 1
    assert all(n <= 4 for n in per_ratio.values()), "more than 4 solutions per ratio"
