"""Target direction from mutual pixel bearings.

The AR camera and the two drones see each other, which fixes the shape of
the AR-drone-drone triangle up to scale. Each drone also sees the target;
once the drones' orientations are known in the AR frame, the two drone rays
toward the target are intersected (or, when skew, resolved to the midpoint
of their common perpendicular). All positions are expressed in the AR
camera frame in units of the AR-to-drone-1 distance.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, angle_between, cross3, normalize, pixel_to_ray, project
from .errors import (
    BehindCamera,
    BehindObserver,
    CorruptFile,
    DegeneratePair,
    DegenerateTriangle,
    InconsistentFrame,
    IoFailure,
    ParallelRays,
)

MIN_INTERIOR_ANGLE = math.radians(0.5)
ANGLE_SUM_TOLERANCE = math.radians(5.0)
PARALLEL_TOL = 1e-9

FRAME_FIELDS = (
    "ar_sees_d1",
    "ar_sees_d2",
    "d1_sees_ar",
    "d1_sees_d2",
    "d1_sees_target",
    "d2_sees_ar",
    "d2_sees_d1",
    "d2_sees_target",
)


@dataclass(frozen=True)
class ObservationFrame:
    """Pixel coordinates seen by the three cameras at one time step.

    The serialized record is a JSON object with one ``[u, v]`` pair per
    field name in :data:`FRAME_FIELDS` plus ``timestamp`` in seconds.
    """

    ar_sees_d1: tuple[float, float]
    ar_sees_d2: tuple[float, float]
    d1_sees_ar: tuple[float, float]
    d1_sees_d2: tuple[float, float]
    d1_sees_target: tuple[float, float]
    d2_sees_ar: tuple[float, float]
    d2_sees_d1: tuple[float, float]
    d2_sees_target: tuple[float, float]
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        out = {name: [float(c) for c in getattr(self, name)] for name in FRAME_FIELDS}
        out["timestamp"] = float(self.timestamp)
        return out

    @classmethod
    def from_dict(cls, record: dict) -> ObservationFrame:
        expected = set(FRAME_FIELDS) | {"timestamp"}
        unknown = set(record) - expected
        missing = set(FRAME_FIELDS) - set(record)
        if unknown or missing:
            raise CorruptFile(f"frame record: unknown {sorted(unknown)}, missing {sorted(missing)}")
        values = {}
        for name in FRAME_FIELDS:
            pair = record[name]
            if len(pair) != 2 or not all(math.isfinite(float(c)) for c in pair):
                raise CorruptFile(f"frame record: {name} must be two finite numbers, got {pair!r}")
            values[name] = (float(pair[0]), float(pair[1]))
        return cls(**values, timestamp=float(record.get("timestamp", 0.0)))

    def swapped_ar(self) -> ObservationFrame:
        """The same frame with the AR's two detections exchanged."""
        d = self.to_dict()
        d["ar_sees_d1"], d["ar_sees_d2"] = d["ar_sees_d2"], d["ar_sees_d1"]
        return ObservationFrame.from_dict(d)


def save_frames(path, frames) -> None:
    """Write frames as JSON lines, one record per time step."""
    text = "".join(json.dumps(f.to_dict()) + "\n" for f in frames)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write frames file {path}: {exc}") from exc


def load_frames(path) -> list[ObservationFrame]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read frames file {path}: {exc}") from exc
    frames = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            frames.append(ObservationFrame.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise CorruptFile(f"{path}:{lineno}: {exc}") from exc
    return frames


@dataclass(frozen=True)
class TriangleSolution:
    u1: np.ndarray
    u2: np.ndarray
    len_ar_d1: float
    len_ar_d2: float
    len_d1_d2: float
    alpha: float
    beta1: float
    beta2: float
    r1: np.ndarray
    r2: np.ndarray

    @property
    def pos_d1(self) -> np.ndarray:
        return self.u1 * self.len_ar_d1

    @property
    def pos_d2(self) -> np.ndarray:
        return self.u2 * self.len_ar_d2


@dataclass(frozen=True)
class TetrahedronSolution:
    target_pos: np.ndarray
    target_bearing: np.ndarray
    d0_over_d1: float
    d0_over_d2: float
    gap: float
    theta1: float
    theta2: float
    triangle: TriangleSolution = field(repr=False)
    # drone-frame bearings toward the target, kept for horizon alignment
    local_target1: np.ndarray = field(repr=False, default=None)
    local_target2: np.ndarray = field(repr=False, default=None)


def align_orientation(local_a, local_b, global_a, global_b) -> np.ndarray:
    """Rotation taking a local vector pair onto a global one (TRIAD).

    ``R @ local_a == global_a`` exactly; ``R @ local_b`` lands in the plane
    of the global pair, on the same side as ``global_b``.

    Raises:
        DegeneratePair: if either pair is within 0.5 degrees of parallel.
    """
    la, lb, ga, gb = (normalize(v) for v in (local_a, local_b, global_a, global_b))
    if angle_between(la, lb) <= MIN_INTERIOR_ANGLE or math.pi - angle_between(la, lb) <= MIN_INTERIOR_ANGLE:
        raise DegeneratePair("local vectors are nearly parallel")
    if angle_between(ga, gb) <= MIN_INTERIOR_ANGLE or math.pi - angle_between(ga, gb) <= MIN_INTERIOR_ANGLE:
        raise DegeneratePair("global vectors are nearly parallel")
    m_local = _triad(la, lb)
    m_global = _triad(ga, gb)
    return m_global @ m_local.T


def _triad(a, b):
    t2 = cross3(a, b)
    t2 /= math.sqrt(t2 @ t2)
    return np.array([a, t2, cross3(a, t2)]).T


def _interior_angles(frame, intr_ar, intr_d1, intr_d2):
    u1 = pixel_to_ray(frame.ar_sees_d1, intr_ar)
    u2 = pixel_to_ray(frame.ar_sees_d2, intr_ar)
    d1_ar = pixel_to_ray(frame.d1_sees_ar, intr_d1)
    d1_d2 = pixel_to_ray(frame.d1_sees_d2, intr_d1)
    d2_ar = pixel_to_ray(frame.d2_sees_ar, intr_d2)
    d2_d1 = pixel_to_ray(frame.d2_sees_d1, intr_d2)
    angles = (angle_between(u1, u2), angle_between(d1_ar, d1_d2), angle_between(d2_ar, d2_d1))
    return angles, (u1, u2, d1_ar, d1_d2, d2_ar, d2_d1)


def solve_triangle(
    frame: ObservationFrame,
    intr_ar: CameraIntrinsics,
    intr_d1: CameraIntrinsics,
    intr_d2: CameraIntrinsics,
    sum_tolerance: float = ANGLE_SUM_TOLERANCE,
) -> TriangleSolution:
    """Reconstruct the AR-drone-drone triangle in the AR frame, |AR->D1| = 1.

    Raises:
        DegenerateTriangle: if any interior angle is below 0.5 degrees.
        InconsistentFrame: if the angle sum misses pi by more than
            ``sum_tolerance``.
    """
    (alpha, beta1, beta2), (u1, u2, d1_ar, d1_d2, d2_ar, d2_d1) = _interior_angles(
        frame, intr_ar, intr_d1, intr_d2
    )
    if min(alpha, beta1, beta2) < MIN_INTERIOR_ANGLE:
        raise DegenerateTriangle(
            "interior angles {:.3f}, {:.3f}, {:.3f} deg".format(*map(math.degrees, (alpha, beta1, beta2)))
        )
    excess = alpha + beta1 + beta2 - math.pi
    if abs(excess) > sum_tolerance:
        raise InconsistentFrame(f"angle sum deviates from 180 deg by {math.degrees(excess):.3f} deg")
    # spread the closure error equally over the three angles
    alpha -= excess / 3.0
    beta1 -= excess / 3.0
    beta2 -= excess / 3.0
    sin_b2 = math.sin(beta2)
    len_ar_d2 = math.sin(beta1) / sin_b2
    len_d1_d2 = math.sin(alpha) / sin_b2

    pos_d1 = u1
    pos_d2 = u2 * len_ar_d2
    r1 = align_orientation(d1_ar, d1_d2, -u1, pos_d2 - pos_d1)
    r2 = align_orientation(d2_ar, d2_d1, -u2, pos_d1 - pos_d2)
    return TriangleSolution(u1, u2, 1.0, len_ar_d2, len_d1_d2, alpha, beta1, beta2, r1, r2)


def intersect_rays(p1, d1, p2, d2) -> tuple[np.ndarray, float]:
    """Midpoint of the common perpendicular of two forward rays, and its length.

    Raises:
        ParallelRays: if ``|d1 x d2| <= 1e-9``.
        BehindObserver: if the closest approach needs a negative ray parameter.
    """
    p1, d1, p2, d2 = (np.asarray(v, dtype=float) for v in (p1, d1, p2, d2))
    if np.linalg.norm(cross3(d1, d2)) <= PARALLEL_TOL:
        raise ParallelRays("rays are parallel")
    w0 = p1 - p2
    a = d1 @ d1
    b = d1 @ d2
    c = d2 @ d2
    d = d1 @ w0
    e = d2 @ w0
    denom = a * c - b * b
    t1 = (b * e - c * d) / denom
    t2 = (a * e - b * d) / denom
    slack = 1e-12 * (1.0 + np.linalg.norm(w0))
    if t1 < -slack or t2 < -slack:
        raise BehindObserver(f"closest approach at ray parameters t1={t1:.3g}, t2={t2:.3g}")
    q1 = p1 + max(t1, 0.0) * d1
    q2 = p2 + max(t2, 0.0) * d2
    return 0.5 * (q1 + q2), float(np.linalg.norm(q1 - q2))


def estimate_target(
    frame: ObservationFrame,
    intr_ar: CameraIntrinsics,
    intr_d1: CameraIntrinsics,
    intr_d2: CameraIntrinsics,
    sum_tolerance: float = ANGLE_SUM_TOLERANCE,
) -> TetrahedronSolution:
    tri = solve_triangle(frame, intr_ar, intr_d1, intr_d2, sum_tolerance)
    local1 = pixel_to_ray(frame.d1_sees_target, intr_d1)
    local2 = pixel_to_ray(frame.d2_sees_target, intr_d2)
    pos_d1, pos_d2 = tri.pos_d1, tri.pos_d2
    target, gap = intersect_rays(pos_d1, tri.r1 @ local1, pos_d2, tri.r2 @ local2)
    d0 = float(np.linalg.norm(target))
    to_ar = -target
    to_d1 = pos_d1 - target
    to_d2 = pos_d2 - target
    return TetrahedronSolution(
        target_pos=target,
        target_bearing=target / d0,
        d0_over_d1=d0 / float(np.linalg.norm(to_d1)),
        d0_over_d2=d0 / float(np.linalg.norm(to_d2)),
        gap=gap,
        theta1=angle_between(normalize(to_ar), normalize(to_d1)),
        theta2=angle_between(normalize(to_ar), normalize(to_d2)),
        triangle=tri,
        local_target1=local1,
        local_target2=local2,
    )


def project_to_ar(sol: TetrahedronSolution, intr_ar: CameraIntrinsics) -> tuple[float, float]:
    """Pixel of the target dot in the AR image."""
    if sol.target_bearing[2] <= 0.0:
        raise BehindCamera("target bearing points behind the AR camera")
    return project(sol.target_bearing, intr_ar)


def horizon_rolls(sol: TetrahedronSolution) -> tuple[float, float]:
    """In-plane rotations that bring each drone's target view upright for the AR.

    For drone i this is the signed angle, measured in the drone image at the
    target, from the drone's own up direction to the AR camera's up
    direction. Rotating the drone's contour by this angle with
    :func:`ard2.contour.rotate_contour` aligns it with the AR horizon.
    """
    tri = sol.triangle
    ar_up = np.array([0.0, -1.0, 0.0])
    return (
        _roll_at(sol.local_target1, tri.r1.T @ ar_up),
        _roll_at(sol.local_target2, tri.r2.T @ ar_up),
    )


def _roll_at(view, up_world):
    # Both "up" directions are projected onto the plane normal to the viewing
    # ray; the roll is the signed angle between them about that ray.
    t = normalize(view)
    own_up = np.array([0.0, -1.0, 0.0])
    a = own_up - (own_up @ t) * t
    b = up_world - (up_world @ t) * t
    # positive when the AR's up leans toward +x in the drone image, which
    # calls for a counterclockwise (as displayed) correction
    return float(math.atan2(cross3(a, b) @ t, a @ b))
