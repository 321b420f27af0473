"""Metallic BB detection via a fast-radial-symmetry variant.

BBs appear as small dark discs in fluoroscopy.  For each configured
radius ``n`` every pixel with a usable gradient casts a single vote ``n``
pixels *against* its gradient direction — dark blobs have outward
gradients, so edge pixels of a disc of radius ``n`` vote onto its
centre.  Vote counts and gradient magnitudes are combined per radius and
Gaussian-smoothed (sigma = n/4, no per-radius normalisation), then
summed into one symmetry map whose positive peaks are BB candidates.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ImageTooSmall

log = logging.getLogger(__name__)

_SUBPIXEL_EPS = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    """Tuning knobs for the radial-symmetry detector.

    Attributes:
        radii: voting radii in pixels; the neighbourhood used for peak
            extraction is (2 * min(radii) + 1) squared.
        alpha: radial-strictness exponent on the vote count.
        sigma_factor: Gaussian smoothing sigma as a fraction of each
            radius (0.25 means sigma = n/4).
        peak_fraction: peaks must exceed this fraction of the global
            maximum of the symmetry map.
        vote_floor: pixels whose gradient magnitude falls below this
            fraction of the image maximum do not vote.
    """

    radii: tuple[int, ...]
    alpha: float = 1.0
    sigma_factor: float = 0.25
    peak_fraction: float = 0.2
    vote_floor: float = 1e-6

    def __post_init__(self) -> None:
        if len(self.radii) == 0:
            raise ValueError("radii must be non-empty")
        if any(int(r) != r or r < 1 for r in self.radii):
            raise ValueError("radii must be positive integers")
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))
        if not 0.0 < self.peak_fraction < 1.0:
            raise ValueError("peak_fraction must lie in (0, 1)")
        if self.alpha <= 0.0 or self.sigma_factor <= 0.0:
            raise ValueError("alpha and sigma_factor must be positive")

    @property
    def peak_radius(self) -> int:
        return min(self.radii)


# Presets matched to the two BB sizes used intra-operatively at the
# nominal 0.194 mm/px detector scale.
PRESET_BB_LARGE = DetectorConfig(radii=(4,))   # 1.5 mm BBs
PRESET_BB_SMALL = DetectorConfig(radii=(1, 2))  # 1.0 mm BBs

PRESETS: dict[str, DetectorConfig] = {
    "bb-1.5mm": PRESET_BB_LARGE,
    "bb-1.0mm": PRESET_BB_SMALL,
}


@dataclass(frozen=True)
class DetectionSet:
    """2D detections for one view: sub-pixel centres plus peak scores."""

    points: np.ndarray  # (N, 2) pixel (x, y)
    scores: np.ndarray  # (N,)
    view_id: str = "0"

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(pts) != len(sc):
            raise ValueError("points and scores must have equal length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(sc))):
            raise ValueError("detections must be finite")
        pts.flags.writeable = False
        sc.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scores", sc)
        object.__setattr__(self, "view_id", str(self.view_id))

    def __len__(self) -> int:
        return len(self.points)


# ---------------------------------------------------------------------------
# image loading
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PGM/PNG as floats in [0, 1]."""
    with Image.open(path) as img:
        if img.mode not in ("L", "I", "I;16"):
            img = img.convert("L")
        arr = np.asarray(img, dtype=np.float64)
    scale = 255.0 if arr.max() <= 255.0 else 65535.0
    return arr / scale


# ---------------------------------------------------------------------------
# symmetry map
# ---------------------------------------------------------------------------

def _gradient(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient with border replication: (gy, gx)."""
    padded = np.pad(image, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    return gy, gx


def radial_symmetry_map(image: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Dark-blob radial symmetry response for ``image``.

    Raises:
        ImageTooSmall: either image dimension is below 2 * max(radii) + 1.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2D grayscale")
    if not np.all(np.isfinite(img)):
        raise ValueError("image must be finite")
    min_side = 2 * max(config.radii) + 1
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ImageTooSmall(
            f"image {img.shape} smaller than {min_side} px per side"
        )

    rows, cols = img.shape
    gy, gx = _gradient(img)
    mag = np.hypot(gx, gy)
    max_mag = mag.max()
    out = np.zeros_like(img)
    if max_mag <= 0.0:
        return out

    voting = mag > config.vote_floor * max_mag
    vy, vx = np.nonzero(voting)
    m = mag[vy, vx]
    uy = gy[vy, vx] / m
    ux = gx[vy, vx] / m

    for n in config.radii:
        ty = vy - np.rint(n * uy).astype(np.intp)
        tx = vx - np.rint(n * ux).astype(np.intp)
        inside = (ty >= 0) & (ty < rows) & (tx >= 0) & (tx < cols)
        flat = ty[inside] * cols + tx[inside]
        orientation = np.bincount(flat, minlength=rows * cols).astype(np.float64)
        magnitude = np.bincount(flat, weights=m[inside], minlength=rows * cols)
        f = np.power(orientation, config.alpha) * magnitude
        out += ndimage.gaussian_filter(
            f.reshape(rows, cols), sigma=config.sigma_factor * n, mode="constant"
        )
    return out


# ---------------------------------------------------------------------------
# peak extraction
# ---------------------------------------------------------------------------

def _quadratic_offset(left: float, center: float, right: float) -> float:
    denom = left - 2.0 * center + right
    if abs(denom) < _SUBPIXEL_EPS:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def detect_bbs(
    symmetry: np.ndarray, config: DetectorConfig, view_id: str = "0"
) -> DetectionSet:
    """Extract BB detections from a radial symmetry map.

    A pixel is a peak when it is the maximum of its
    ``(2 * min(radii) + 1)`` square neighbourhood and exceeds
    ``peak_fraction`` of the global maximum.  Ties inside a
    neighbourhood keep the lexicographically smallest (row, col).
    Sub-pixel positions come from a per-axis quadratic fit clamped to
    +/- 0.5 px.  Output is ordered by descending score, then (row, col).
    """
    s = np.asarray(symmetry, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("symmetry map must be 2D")
    rows, cols = s.shape
    peak = s.max()
    if peak <= 0.0:
        return DetectionSet(np.empty((0, 2)), np.empty(0), view_id)

    size = 2 * config.peak_radius + 1
    local_max = ndimage.maximum_filter(s, size=size, mode="constant", cval=-np.inf)
    mask = (s >= local_max) & (s > config.peak_fraction * peak)
    rr, cc = np.nonzero(mask)  # already lexicographic (row, col)

    kept_r: list[int] = []
    kept_c: list[int] = []
    for r, c in zip(rr, cc):
        clash = any(
            max(abs(r - kr), abs(c - kc)) <= config.peak_radius
            for kr, kc in zip(kept_r, kept_c)
        )
        if not clash:
            kept_r.append(int(r))
            kept_c.append(int(c))

    points = np.empty((len(kept_r), 2))
    scores = np.empty(len(kept_r))
    for i, (r, c) in enumerate(zip(kept_r, kept_c)):
        dx = dy = 0.0
        if 0 < c < cols - 1:
            dx = _quadratic_offset(s[r, c - 1], s[r, c], s[r, c + 1])
        if 0 < r < rows - 1:
            dy = _quadratic_offset(s[r - 1, c], s[r, c], s[r + 1, c])
        points[i] = (c + dx, r + dy)
        scores[i] = s[r, c]

    order = np.lexsort((kept_c, kept_r, -scores))
    log.debug("detected %d peaks (max score %.4g)", len(order), peak)
    return DetectionSet(points[order], scores[order], view_id)


def detect_bbs_in_image(
    image: np.ndarray, config: DetectorConfig, view_id: str = "0"
) -> DetectionSet:
    """Convenience wrapper: symmetry map plus peak extraction."""
    return detect_bbs(radial_symmetry_map(image, config), config, view_id)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def write_detections_csv(path: str | Path, sets: Iterable[DetectionSet]) -> None:
    """Write detection sets as ``view_id,x,y,score`` rows (6 sig. digits)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view_id", "x", "y", "score"])
        for det in sets:
            for (x, y), score in zip(det.points, det.scores):
                writer.writerow([det.view_id, f"{x:.6g}", f"{y:.6g}", f"{score:.6g}"])


def read_detections_csv(path: str | Path) -> list[DetectionSet]:
    """Read detection sets grouped by view_id, preserving file order."""
    groups: dict[str, list[tuple[float, float, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["view_id", "x", "y", "score"]:
            raise ValueError(f"{path}: expected header view_id,x,y,score")
        for row in reader:
            if not row:
                continue
            view, x, y, score = row
            if view not in groups:
                groups[view] = []
                order.append(view)
            groups[view].append((float(x), float(y), float(score)))
    result = []
    for view in order:
        rows = np.array(groups[view], dtype=np.float64).reshape(-1, 3)
        result.append(DetectionSet(rows[:, :2], rows[:, 2], view))
    return result
