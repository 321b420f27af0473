"""Exception types shared across the fragtrack package.

Geometry errors signal ill-posed math (degenerate rays, rank-deficient
systems); pipeline errors signal data problems (too few detections,
unsatisfiable scene constraints).  Estimation *failure* is not an
exception: the single-view pipeline reports it through a status field so
callers can log partial results.
"""
from __future__ import annotations


class FragtrackError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

class FrameMismatch(FragtrackError):
    """Rigid transforms composed or applied across incompatible frame tags."""


class DegenerateRay(FragtrackError):
    """A projection ray could not be formed (point at the X-ray source)."""


class BehindSource(FragtrackError):
    """A point lies behind the X-ray source and cannot be projected."""


class RankDeficient(FragtrackError):
    """Triangulation rays span fewer than two dimensions."""


class Colinear(FragtrackError):
    """Point set is colinear; 3D/3D registration is underdetermined."""


class GimbalLock(FragtrackError):
    """Euler decomposition at a singular middle angle (|angle| = 90 deg)."""


class DegenerateEdge(FragtrackError):
    """Lateral-edge vector has no component in the coronal plane."""


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

class ImageTooSmall(FragtrackError):
    """Image smaller than the detector's largest voting radius allows."""


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

class TooFewBBs(FragtrackError):
    """Not enough reconstructed BBs to form two constellations."""


class DegenerateClusters(FragtrackError):
    """Constellation clusters overlap; labelling would be arbitrary."""


# ---------------------------------------------------------------------------
# P3P solver
# ---------------------------------------------------------------------------

class ColinearModel(FragtrackError):
    """Model triple passed to the P3P solver is colinear."""


# ---------------------------------------------------------------------------
# pose pipeline
# ---------------------------------------------------------------------------

class TooFewDetections(FragtrackError):
    """Fewer detections than the candidate enumeration requires."""


class InsufficientMatches(FragtrackError):
    """Fewer 3D/2D matches than pose refinement requires."""


# ---------------------------------------------------------------------------
# simulation / evaluation
# ---------------------------------------------------------------------------

class ConstraintUnsatisfiable(FragtrackError):
    """Scene generation could not satisfy placement constraints."""


class EstimateFailed(FragtrackError):
    """Evaluation requested for an estimate that did not succeed."""
