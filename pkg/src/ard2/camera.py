"""Pinhole camera with two-term radial distortion.

Conventions used throughout the package: the camera looks along +z, +x points
right and +y points down. Pixel (0, 0) is the top-left corner. A point on the
z = 1 plane is a *normalized* image point; distortion acts on it radially::

    s = 1 + k1 * r**2 + k2 * r**4,    (xd, yd) = (x * s, y * s)

and pixels follow from ``u = fx * xd + cx``, ``v = fy * yd + cy``.

Intrinsics serialize to a small key-value text record, one ``key = value``
line per field, in the order ``fx fy cx cy k1 k2 width height``. Floats are
written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import BehindCamera, InvalidIntrinsics, IoFailure, NonConvergent

UNDISTORT_TOL = 1e-10
UNDISTORT_MAX_ITER = 50

RECORD_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "width", "height")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Focal lengths, principal point and radial distortion of one camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 1000
    height: int = 750

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise InvalidIntrinsics(f"{f.name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 2 or self.height < 2:
            raise InvalidIntrinsics(f"sensor must be at least 2x2, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsics(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} sensor"
            )
        if self.k1 or self.k2:
            _check_monotone(self)

    @property
    def corner_radius(self) -> float:
        """Largest distorted normalized radius reached on the sensor."""
        xs = (np.array([0.0, self.width]) - self.cx) / self.fx
        ys = (np.array([0.0, self.height]) - self.cy) / self.fy
        return float(np.sqrt(np.max(xs**2)[()] + np.max(ys**2)[()]))

    def replace(self, **changes) -> CameraIntrinsics:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return CameraIntrinsics(**values)

    def to_record(self) -> str:
        lines = []
        for key in RECORD_KEYS:
            value = getattr(self, key)
            lines.append(f"{key} = {int(value) if key in ('width', 'height') else repr(float(value))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> CameraIntrinsics:
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in RECORD_KEYS:
                raise InvalidIntrinsics(f"line {lineno}: unrecognized entry {raw!r}")
            if key in values:
                raise InvalidIntrinsics(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = int(value) if key in ("width", "height") else float(value)
            except ValueError:
                raise InvalidIntrinsics(f"line {lineno}: bad value for {key!r}: {value.strip()!r}") from None
        missing = [k for k in RECORD_KEYS if k not in values]
        if missing:
            raise InvalidIntrinsics(f"missing keys: {', '.join(missing)}")
        return cls(**values)


def intrinsics_from_fov(width: int, height: int, hfov_deg: float, k1: float = 0.0, k2: float = 0.0) -> CameraIntrinsics:
    """Square-pixel intrinsics with the principal point at the sensor center."""
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, k1, k2, width, height)


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read intrinsics file {path}: {exc}") from exc
    return CameraIntrinsics.from_record(text)


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    try:
        Path(path).write_text(intr.to_record())
    except OSError as exc:
        raise IoFailure(f"cannot write intrinsics file {path}: {exc}") from exc


def _distort_radius(r, k1, k2):
    r2 = r * r
    return r * (1.0 + k1 * r2 + k2 * r2 * r2)


def _check_monotone(intr: CameraIntrinsics) -> None:
    # s(r)*r must increase until it reaches the corner radius, otherwise
    # undistortion is ambiguous somewhere on the sensor.
    target = intr.corner_radius
    r = np.linspace(0.0, 4.0 * max(target, 1e-3), 4001)
    slope = 1.0 + 3.0 * intr.k1 * r**2 + 5.0 * intr.k2 * r**4
    reach = _distort_radius(r, intr.k1, intr.k2)
    bad = slope <= 0.0
    first_bad = int(np.argmax(bad)) if bad.any() else len(r)
    if first_bad == len(r):
        return
    if np.any(reach[:first_bad] >= target):
        return
    raise InvalidIntrinsics(
        f"distortion k1={intr.k1}, k2={intr.k2} is not invertible out to the sensor corner"
    )


def apply_distortion(point, intr: CameraIntrinsics) -> tuple[float, float]:
    x, y = point
    r2 = x * x + y * y
    s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return (x * s, y * s)


def undistort(point, intr: CameraIntrinsics) -> tuple[float, float]:
    """Invert :func:`apply_distortion` by damped Newton iteration on the radius.

    Raises:
        NonConvergent: if the radius equation is not solved to 1e-10 within
            50 iterations.
    """
    xd, yd = point
    k1, k2 = intr.k1, intr.k2
    rd = math.hypot(xd, yd)
    if rd == 0.0 or (k1 == 0.0 and k2 == 0.0):
        return (float(xd), float(yd))
    r = rd
    resid = _distort_radius(r, k1, k2) - rd
    for _ in range(UNDISTORT_MAX_ITER):
        if abs(resid) <= 1e-15 * max(1.0, rd):
            break
        slope = 1.0 + 3.0 * k1 * r * r + 5.0 * k2 * r**4
        if slope <= 0.0:
            raise NonConvergent(f"distortion not invertible near radius {r:.6g}")
        step = resid / slope
        # halve the step until the residual shrinks
        for _ in range(30):
            trial = r - step
            trial_resid = _distort_radius(trial, k1, k2) - rd
            if trial >= 0.0 and abs(trial_resid) < abs(resid):
                break
            step *= 0.5
        else:
            break
        r, resid = trial, trial_resid
    if abs(resid) > UNDISTORT_TOL:
        raise NonConvergent(f"undistortion residual {resid:.3g} after {UNDISTORT_MAX_ITER} iterations")
    scale = r / rd
    return (xd * scale, yd * scale)


def pixel_to_ray(p, intr: CameraIntrinsics) -> np.ndarray:
    """Unit bearing in the camera frame for pixel ``p = (u, v)``."""
    u, v = p
    x, y = undistort(((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy), intr)
    n = math.sqrt(x * x + y * y + 1.0)
    return np.array([x / n, y / n, 1.0 / n])


def pixels_to_rays(pixels, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`pixel_to_ray` for an ``(N, 2)`` array of pixels.

    Plain Newton steps run on the whole batch; any radius that has not
    settled after the iteration cap is redone with the scalar damped solver.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    xd = (pixels[:, 0] - intr.cx) / intr.fx
    yd = (pixels[:, 1] - intr.cy) / intr.fy
    if intr.k1 or intr.k2:
        rd = np.hypot(xd, yd)
        r = rd.copy()
        for _ in range(UNDISTORT_MAX_ITER):
            resid = _distort_radius(r, intr.k1, intr.k2) - rd
            if np.all(np.abs(resid) <= 1e-15 * np.maximum(1.0, rd)):
                break
            slope = 1.0 + 3.0 * intr.k1 * r * r + 5.0 * intr.k2 * r**4
            r = r - resid / np.where(slope > 0.0, slope, 1.0)
        resid = _distort_radius(r, intr.k1, intr.k2) - rd
        bad = ~(np.abs(resid) <= UNDISTORT_TOL) | (r < 0.0)
        scale = np.divide(r, rd, out=np.ones_like(rd), where=rd > 0.0)
        for i in np.flatnonzero(bad):
            x, y = undistort((xd[i], yd[i]), intr)
            scale[i] = x / xd[i] if xd[i] else (y / yd[i] if yd[i] else 1.0)
        xd, yd = xd * scale, yd * scale
    n = np.sqrt(xd * xd + yd * yd + 1.0)
    return np.column_stack((xd / n, yd / n, 1.0 / n))


def project(point, intr: CameraIntrinsics) -> tuple[float, float]:
    x, y, z = (float(c) for c in point)
    if not z > 0.0:
        raise BehindCamera(f"point has depth {z}")
    xd, yd = apply_distortion((x / z, y / z), intr)
    return (intr.fx * xd + intr.cx, intr.fy * yd + intr.cy)


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`project` for an ``(N, 3)`` array; no depth check."""
    points = np.asarray(points, dtype=float)
    x = points[:, 0] / points[:, 2]
    y = points[:, 1] / points[:, 2]
    r2 = x * x + y * y
    s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return np.column_stack((intr.fx * x * s + intr.cx, intr.fy * y * s + intr.cy))


def angle_between(a, b) -> float:
    d = float(a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
    return math.acos(min(1.0, max(-1.0, d)))


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors; ``np.cross`` without its per-call overhead."""
    a0, a1, a2 = float(a[0]), float(a[1]), float(a[2])
    b0, b1, b2 = float(b[0]), float(b[1]), float(b[2])
    return np.array([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / math.sqrt(v @ v)


# Rotations are plain 3x3 float arrays.

def is_rotation(r, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.allclose(r @ r.T, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle`` about ``axis``."""
    k = normalize(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def look_at(forward, up=(0.0, 0.0, 1.0), roll: float = 0.0) -> np.ndarray:
    """World-to-camera rotation for a camera looking along ``forward``.

    The camera's -y axis is aligned with ``up`` projected onto the image
    plane, then the camera is rolled by ``roll`` radians about its optical
    axis.
    """
    z = normalize(forward)
    up = np.asarray(up, dtype=float)
    y = -(up - np.dot(up, z) * z)
    if np.linalg.norm(y) < 1e-9:
        raise ValueError("forward direction is parallel to the up hint")
    y = y / np.linalg.norm(y)
    x = cross3(y, z)
    r = np.vstack((x, y, z))
    if roll:
        r = axis_angle((0.0, 0.0, 1.0), roll) @ r
    return r
