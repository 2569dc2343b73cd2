"""Scene simulator and synthetic silhouette data.

World frame: z is altitude (up), the ground is z = 0 and the user stands at
the origin. Every camera is described by a world-to-camera rotation ``R`` and
a position ``p`` so that ``x_cam = R @ (x_world - p)``.

Contour images follow one crop convention. The AR ground truth is a crop of
normalized half-width ``s0 = crop_half_extent / d0`` centered on the target.
Drone *i* crops with ``s_i = s0 * (d0 / d_i)**2``; magnifying that crop by
``d0 / d_i`` about its center then reproduces the AR crop's scale exactly,
which is what :func:`ard2.contour.preprocess` does.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import contour
from .camera import (
    CameraIntrinsics,
    angle_between,
    axis_angle,
    intrinsics_from_fov,
    look_at,
    normalize,
    project,
    project_points,
)
from .errors import (
    Ard2Error,
    BehindCamera,
    ConfigError,
    CorruptFile,
    IoFailure,
    NotVisible,
    OutOfView,
    ShapeMismatch,
    Unsatisfiable,
)
from .geometry import ObservationFrame, estimate_target, horizon_rolls

MAX_SCENE_ATTEMPTS = 100
SUPERSAMPLE = 4
NET_SIZE = 60
DRONE_CROP_SIZE = 120
VIEW_MARGIN = 0.02


def default_cameras() -> tuple[CameraIntrinsics, CameraIntrinsics, CameraIntrinsics]:
    """AR: 1000x750 with a 60 degree horizontal FOV; drones: 150 degree wide-angle."""
    ar = intrinsics_from_fov(1000, 750, 60.0, k1=-0.03, k2=0.005)
    d1 = intrinsics_from_fov(1000, 750, 150.0, k1=0.01)
    d2 = intrinsics_from_fov(1000, 750, 150.0, k1=0.01)
    return ar, d1, d2


@dataclass(frozen=True)
class SceneRanges:
    """Sampling ranges; distances in meters, angles in degrees."""

    user_target_distance: tuple[float, float] = (10.0, 100.0)
    drone_altitude: tuple[float, float] = (0.0, 20.0)
    drone_user_target_angle: tuple[float, float] = (10.0, 45.0)
    pixel_noise_sigma: float = 0.0
    # user-to-drone distance as a fraction of the user-target distance
    drone_distance_fraction: tuple[float, float] = (0.4, 0.8)
    camera_roll: tuple[float, float] = (-10.0, 10.0)
    user_height: float = 1.6
    target_height: float = 0.9
    crop_half_extent: float = 1.1

    def __post_init__(self):
        for name in ("user_target_distance", "drone_altitude", "drone_user_target_angle",
                     "drone_distance_fraction", "camera_roll"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"{name}: min {lo} exceeds max {hi}")
        if self.user_target_distance[0] <= 0:
            raise ConfigError("user_target_distance must be positive")
        if self.drone_altitude[0] < 0:
            raise ConfigError("drone_altitude must be non-negative")
        lo, hi = self.drone_user_target_angle
        if lo <= 0 or hi >= 90:
            raise ConfigError("drone_user_target_angle must lie in (0, 90) degrees")
        lo, hi = self.drone_distance_fraction
        if lo <= 0:
            raise ConfigError("drone_distance_fraction must be positive")
        if not self.pixel_noise_sigma >= 0:
            raise ConfigError("pixel_noise_sigma must be non-negative")
        if self.crop_half_extent <= 0:
            raise ConfigError("crop_half_extent must be positive")

    @classmethod
    def from_dict(cls, record: dict) -> SceneRanges:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown scene range field(s): {', '.join(sorted(unknown))}")
        values = {}
        for key, value in record.items():
            if isinstance(value, list):
                if len(value) != 2:
                    raise ConfigError(f"{key}: expected [min, max], got {value!r}")
                value = (float(value[0]), float(value[1]))
            values[key] = value
        return cls(**values)


@dataclass(frozen=True)
class SceneGeometry:
    pos_ar: np.ndarray
    pos_d1: np.ndarray
    pos_d2: np.ndarray
    pos_target: np.ndarray
    rot_ar: np.ndarray
    rot_d1: np.ndarray
    rot_d2: np.ndarray
    target_yaw: float = 0.0

    def scaled(self, s: float) -> SceneGeometry:
        return SceneGeometry(self.pos_ar * s, self.pos_d1 * s, self.pos_d2 * s, self.pos_target * s,
                             self.rot_ar, self.rot_d1, self.rot_d2, self.target_yaw)

    def to_camera(self, name: str, point) -> np.ndarray:
        rot, pos = self.camera(name)
        return rot @ (np.asarray(point, dtype=float) - pos)

    def camera(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return {"ar": (self.rot_ar, self.pos_ar), "d1": (self.rot_d1, self.pos_d1),
                "d2": (self.rot_d2, self.pos_d2)}[name]

    def true_bearing(self) -> np.ndarray:
        """Unit direction from the AR to the target, in the AR camera frame."""
        return normalize(self.to_camera("ar", self.pos_target))

    def distances(self) -> tuple[float, float, float]:
        t = self.pos_target
        return tuple(float(np.linalg.norm(t - p)) for p in (self.pos_ar, self.pos_d1, self.pos_d2))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else float(v)) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, record: dict) -> SceneGeometry:
        try:
            arrays = {k: np.asarray(record[k], dtype=float) for k in
                      ("pos_ar", "pos_d1", "pos_d2", "pos_target", "rot_ar", "rot_d1", "rot_d2")}
            return cls(**arrays, target_yaw=float(record.get("target_yaw", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"bad scene record: {exc}") from exc


SUBJECTS = {"ar": ("d1", "d2", "target"), "d1": ("ar", "d2", "target"), "d2": ("ar", "d1", "target")}


def _position(scene, name):
    return {"ar": scene.pos_ar, "d1": scene.pos_d1, "d2": scene.pos_d2, "target": scene.pos_target}[name]


def _aim(pos, subjects, roll):
    a, b, c = (normalize(s - pos) for s in subjects)
    return look_at((a + b + c) / 3.0, roll=roll)


def _sample_drone(rng, ranges, distance, heading, side, eye, target):
    angle = math.radians(rng.uniform(*ranges.drone_user_target_angle))
    r = distance * rng.uniform(*ranges.drone_distance_fraction)
    # the drone's elevation seen from the user may differ from the target's by
    # at most the drone-user-target angle; draw the altitude from that band
    elev_t = math.atan2(target[2] - eye[2], distance)
    lo = max(ranges.drone_altitude[0], eye[2] + r * math.sin(max(elev_t - angle, -math.pi / 2)))
    hi = min(ranges.drone_altitude[1], eye[2] + r * math.sin(min(elev_t + angle, math.pi / 2)))
    u = rng.uniform()
    if lo > hi:
        return None
    altitude = lo + u * (hi - lo)
    elev = math.asin(max(-1.0, min(1.0, (altitude - eye[2]) / r)))
    cos_phi = (math.cos(angle) - math.sin(elev) * math.sin(elev_t)) / (math.cos(elev) * math.cos(elev_t))
    az = heading + side * math.acos(max(-1.0, min(1.0, cos_phi)))
    return eye + r * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)])


def random_scene(ranges: SceneRanges, seed, cameras=None) -> SceneGeometry:
    """Sample a scene inside ``ranges``; deterministic in ``seed``.

    With ``cameras`` (AR, drone 1, drone 2 intrinsics) the scene must also
    keep every required subject on-sensor with a 2% margin.

    Raises:
        Unsatisfiable: after 100 rejected attempts.
    """
    rng = np.random.default_rng(seed)
    eye = np.array([0.0, 0.0, ranges.user_height])
    for _ in range(MAX_SCENE_ATTEMPTS):
        distance = rng.uniform(*ranges.user_target_distance)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        target = np.array([distance * math.cos(heading), distance * math.sin(heading), ranges.target_height])
        d1 = _sample_drone(rng, ranges, distance, heading, +1.0, eye, target)
        d2 = _sample_drone(rng, ranges, distance, heading, -1.0, eye, target)
        rolls = np.radians(rng.uniform(*ranges.camera_roll, size=3))
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        if d1 is None or d2 is None or not _positions_ok(eye, d1, d2, target, ranges):
            continue
        pos = {"ar": eye, "d1": d1, "d2": d2, "target": target}
        # cameras are built and checked one at a time so most rejections stay cheap
        rots = {}
        for k, (name, roll) in enumerate(zip(("ar", "d1", "d2"), rolls)):
            rot = _aim(pos[name], [pos[s] for s in SUBJECTS[name]], roll)
            if not _sees_subjects(rot, pos, name, None if cameras is None else cameras[k]):
                break
            rots[name] = rot
        else:
            return SceneGeometry(eye, d1, d2, target, rots["ar"], rots["d1"], rots["d2"], yaw)
    raise Unsatisfiable(f"no valid scene in {MAX_SCENE_ATTEMPTS} attempts; check the ranges")


def _positions_ok(eye, d1, d2, target, ranges):
    """Constraints that depend on positions only, checked before any rotation is built."""
    points = [eye, d1, d2, target]
    for i in range(4):
        for j in range(i + 1, 4):
            if math.dist(points[i], points[j]) < 1e-6:
                return False
    to_t = normalize(target - eye)
    lo, hi = ranges.drone_user_target_angle
    for p in (d1, d2):
        ang = math.degrees(angle_between(normalize(p - eye), to_t))
        if not (lo - 1e-9 <= ang <= hi + 1e-9):
            return False
    # contour weights need every drone within 90 degrees of the AR's view
    from_t = normalize(eye - target)
    for p in (d1, d2):
        if angle_between(from_t, normalize(p - target)) >= math.radians(80.0):
            return False
    return True


def _sees_subjects(rot, pos, name, intr):
    """Every subject of camera ``name`` in front of it and, given intrinsics, on-sensor with margin."""
    for subject in SUBJECTS[name]:
        p = rot @ (pos[subject] - pos[name])
        if p[2] <= 0.0:
            return False
        if intr is not None:
            u, v = project(p, intr)
            mu, mv = VIEW_MARGIN * intr.width, VIEW_MARGIN * intr.height
            if not (mu <= u < intr.width - mu and mv <= v < intr.height - mv):
                return False
    return True


def drone_user_target_angles(scene: SceneGeometry) -> tuple[float, float]:
    """Angles at the user between each drone and the target, in degrees."""
    to_t = normalize(scene.pos_target - scene.pos_ar)
    return tuple(math.degrees(angle_between(normalize(p - scene.pos_ar), to_t)) for p in (scene.pos_d1, scene.pos_d2))


def _check_view(scene, cameras, margin=0.0):
    pixels = {}
    for name, intr in zip(("ar", "d1", "d2"), cameras):
        for subject in SUBJECTS[name]:
            p = scene.to_camera(name, _position(scene, subject))
            try:
                u, v = project(p, intr)
            except BehindCamera:
                raise OutOfView(f"{subject} is behind camera {name}") from None
            mu, mv = margin * intr.width, margin * intr.height
            if not (mu <= u < intr.width - mu and mv <= v < intr.height - mv):
                raise OutOfView(f"{subject} projects off the {name} sensor at ({u:.1f}, {v:.1f})")
            pixels[(name, subject)] = (u, v)
    return pixels


def synthesize_frame(scene: SceneGeometry, intr_ar, intr_d1, intr_d2, sigma: float = 0.0, seed=0,
                     timestamp: float = 0.0) -> ObservationFrame:
    """Project every subject into every camera and add Gaussian pixel noise.

    Raises:
        OutOfView: if a subject is behind a camera or off its sensor.
    """
    cameras = (intr_ar, intr_d1, intr_d2)
    pixels = _check_view(scene, cameras)
    rng = np.random.default_rng(seed)
    keys = [("ar", "d1"), ("ar", "d2"), ("d1", "ar"), ("d1", "d2"), ("d1", "target"),
            ("d2", "ar"), ("d2", "d1"), ("d2", "target")]
    noise = rng.standard_normal((len(keys), 2)) * sigma
    values = {}
    for (cam, subject), (du, dv) in zip(keys, noise):
        u, v = pixels[(cam, subject)]
        values[f"{cam}_sees_{subject}"] = (u + du, v + dv) if sigma else (u, v)
    for (cam, subject), intr in ((k, dict(zip(("ar", "d1", "d2"), cameras))[k[0]]) for k in keys):
        u, v = values[f"{cam}_sees_{subject}"]
        if not (0.0 <= u < intr.width and 0.0 <= v < intr.height):
            raise OutOfView(f"noisy {subject} pixel leaves the {cam} sensor")
    return ObservationFrame(**values, timestamp=timestamp)


def save_scenes(path, scenes) -> None:
    text = "".join(json.dumps(s.to_dict()) + "\n" for s in scenes)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_scenes(path) -> list[SceneGeometry]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return [SceneGeometry.from_dict(json.loads(line)) for line in lines if line.strip()]


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or not np.all(np.isfinite(v)):
            raise ValueError("vertices must be a finite (N, 3) array")
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise ValueError("faces must be a non-empty (M, 3) index array")
        if f.min() < 0 or f.max() >= len(v):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))


def load_obj(path) -> TriangleMesh:
    """Read ``v`` and ``f`` lines of an ASCII OBJ file; polygons are fanned."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read mesh {path}: {exc}") from exc
    verts, faces = [], []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except (ValueError, IndexError) as exc:
            raise CorruptFile(f"{path}:{lineno}: {exc}") from exc
    try:
        return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc


def save_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def _ellipsoid(center, radii, n_lat=8, n_lon=12):
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        phi = math.pi * i / n_lat
        for j in range(n_lon):
            lam = 2.0 * math.pi * j / n_lon
            verts.append((math.sin(phi) * math.cos(lam), math.sin(phi) * math.sin(lam), math.cos(phi)))
    verts.append((0.0, 0.0, -1.0))
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, c, b), (b, c, d)]
    last = len(verts) - 1
    for j in range(n_lon):
        faces.append((last, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    v = np.array(verts) * np.asarray(radii) + np.asarray(center)
    return v, np.array(faces)


# (center, radii) in meters; model frame has x forward, y left, z up and its
# origin at the bounding-box center of a 1.8 m tall figure.
HUMAN_PARTS = [
    ((0.0, 0.0, 0.78), (0.10, 0.085, 0.12)),      # head
    ((0.0, 0.0, 0.63), (0.05, 0.05, 0.07)),       # neck
    ((0.0, 0.0, 0.36), (0.12, 0.19, 0.27)),       # torso
    ((0.0, 0.0, 0.04), (0.11, 0.17, 0.12)),       # pelvis
    ((0.0, 0.25, 0.37), (0.055, 0.055, 0.17)),    # upper arms
    ((0.0, -0.25, 0.37), (0.055, 0.055, 0.17)),
    ((0.03, 0.27, 0.07), (0.045, 0.045, 0.16)),   # forearms
    ((0.03, -0.27, 0.07), (0.045, 0.045, 0.16)),
    ((0.0, 0.09, -0.25), (0.08, 0.08, 0.24)),     # thighs
    ((0.0, -0.09, -0.25), (0.08, 0.08, 0.24)),
    ((0.0, 0.09, -0.64), (0.06, 0.06, 0.23)),     # shins
    ((0.0, -0.09, -0.64), (0.06, 0.06, 0.23)),
    ((0.05, 0.09, -0.86), (0.11, 0.05, 0.04)),    # feet
    ((0.05, -0.09, -0.86), (0.11, 0.05, 0.04)),
]


def human_mesh() -> TriangleMesh:
    """A 1.8 m standing figure built from ellipsoids, centered on its bounding box."""
    verts, faces, offset = [], [], 0
    for center, radii in HUMAN_PARTS:
        v, f = _ellipsoid(center, radii)
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    v = np.vstack(verts)
    v -= 0.5 * (v.max(axis=0) + v.min(axis=0))
    return TriangleMesh(v, np.vstack(faces))


def box_mesh(size=1.0) -> TriangleMesh:
    h = size / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, np.array(faces))


def perturb_mesh(mesh: TriangleMesh, seed, magnitude: float) -> TriangleMesh:
    """Smoothly displace vertices by a seeded low-frequency field.

    Each displacement component is a sum of four random plane waves with
    wavelengths on the order of the mesh size, normalized so that no vertex
    moves more than ``magnitude`` times the bounding-box diagonal.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return TriangleMesh(mesh.vertices.copy(), mesh.faces.copy())
    rng = np.random.default_rng(seed)
    diag = mesh.diagonal
    n_waves = 4
    freqs = rng.normal(size=(3, n_waves, 3)) * (2.0 * math.pi / diag)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(3, n_waves))
    amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
    amps /= amps.sum(axis=1, keepdims=True)
    # each component is bounded by 1, so the vector norm is bounded by sqrt(3)
    arg = np.einsum("kwd,nd->knw", freqs, mesh.vertices) + phases[:, None, :]
    field_ = np.einsum("knw,kw->nk", np.sin(arg), amps)
    disp = field_ * (magnitude * diag / math.sqrt(3.0))
    return TriangleMesh(mesh.vertices + disp, mesh.faces.copy())


def yaw_rotation(yaw: float) -> np.ndarray:
    return axis_angle((0.0, 0.0, 1.0), yaw)


# ---------------------------------------------------------------------------
# Rasterizer
# ---------------------------------------------------------------------------


def render_silhouette(mesh: TriangleMesh, model_pose, camera, out_size=None, near: float = 1e-6) -> np.ndarray:
    """Binary silhouette of ``mesh`` box-filtered from 4x4 supersampling.

    Args:
        mesh: triangle mesh in model coordinates.
        model_pose: ``(R, t)`` with ``x_world = R @ x_model + t``.
        camera: ``(R, p, intrinsics)`` with ``x_cam = R @ (x_world - p)``.
        out_size: output ``(width, height)`` or a single int for square
            output; the grid always spans the whole sensor. Defaults to the
            sensor resolution.
        near: triangles with a vertex at depth ``<= near`` are dropped.

    Returns:
        ``(height, width)`` float array of coverage fractions in [0, 1].

    Raises:
        NotVisible: if no triangle covers any sample.
    """
    r_model, t_model = model_pose
    r_cam, p_cam, intr = camera
    if out_size is None:
        out_size = (intr.width, intr.height)
    elif np.isscalar(out_size):
        out_size = (int(out_size), int(out_size))
    out_w, out_h = out_size
    world = mesh.vertices @ np.asarray(r_model).T + np.asarray(t_model)
    cam = (world - np.asarray(p_cam)) @ np.asarray(r_cam).T
    tris = mesh.faces[np.all(cam[mesh.faces, 2] > near, axis=1)]
    if len(tris) == 0:
        raise NotVisible("mesh is entirely behind the camera")
    uv = project_points(cam, intr)
    # to supersample coordinates: sample (i, j) sits at pixel center (j + 0.5, i + 0.5)
    sx = out_w * SUPERSAMPLE / intr.width
    sy = out_h * SUPERSAMPLE / intr.height
    pts = np.column_stack((uv[:, 0] * sx - 0.5, uv[:, 1] * sy - 0.5))
    mask = rasterize(pts[tris], out_w * SUPERSAMPLE, out_h * SUPERSAMPLE)
    if not mask.any():
        raise NotVisible("no triangle covers any sample")
    return mask.reshape(out_h, SUPERSAMPLE, out_w, SUPERSAMPLE).mean(axis=(1, 3))


def rasterize(tri_pts: np.ndarray, width: int, height: int) -> np.ndarray:
    """Union coverage mask of 2D triangles sampled at integer grid points.

    ``tri_pts`` has shape ``(T, 3, 2)`` in sample coordinates (sample
    ``(i, j)`` is at ``x = j, y = i``). Coverage uses edge functions; both
    windings count.
    """
    mask = np.zeros((height, width), dtype=bool)
    p0, p1, p2 = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    lo = np.floor(tri_pts.min(axis=1)).astype(np.int64) + 1
    hi = np.floor(tri_pts.max(axis=1)).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    keep = (area != 0) & np.all(hi >= lo, axis=1)
    if not keep.any():
        return mask
    p0, p1, p2, area, lo, hi = p0[keep], p1[keep], p2[keep], area[keep], lo[keep], hi[keep]
    bw = hi[:, 0] - lo[:, 0] + 1
    bh = hi[:, 1] - lo[:, 1] + 1
    counts = bw * bh
    # process in chunks to bound memory on large renders
    starts = np.concatenate(([0], np.cumsum(counts)))
    chunk = 4_000_000
    t0 = 0
    while t0 < len(counts):
        t1 = int(np.searchsorted(starts, starts[t0] + chunk, side="right")) - 1
        t1 = max(t1, t0 + 1)
        sel = slice(t0, t1)
        n = counts[sel]
        tri = np.repeat(np.arange(t0, t1), n)
        off = np.arange(int(n.sum())) - np.repeat(starts[t0:t1] - starts[t0], n)
        x = lo[tri, 0] + off % bw[tri]
        y = lo[tri, 1] + off // bw[tri]
        sgn = np.sign(area[tri])
        inside = np.ones(len(tri), dtype=bool)
        for a, b in ((p0, p1), (p1, p2), (p2, p0)):
            e = (b[tri, 0] - a[tri, 0]) * (y - a[tri, 1]) - (b[tri, 1] - a[tri, 1]) * (x - a[tri, 0])
            inside &= e * sgn >= 0
        mask[y[inside], x[inside]] = True
        t0 = t1
    return mask


# ---------------------------------------------------------------------------
# Contour crops and datasets
# ---------------------------------------------------------------------------


def crop_camera(scene: SceneGeometry, name: str, half_width: float, size: int):
    """Virtual target-centered camera standing in for a cropped, undistorted view.

    The crop shares the real camera's center; its optical axis passes through
    the target and its up direction is the real camera's up projected onto
    the new image plane.
    """
    rot, pos = scene.camera(name)
    t_cam = normalize(rot @ (scene.pos_target - pos))
    r_crop = look_at(t_cam, up=(0.0, -1.0, 0.0)) @ rot
    f = size / (2.0 * half_width)
    intr = CameraIntrinsics(f, f, size / 2.0, size / 2.0, 0.0, 0.0, size, size)
    return r_crop, pos, intr


def crop_half_widths(scene: SceneGeometry, ranges: SceneRanges) -> tuple[float, float, float]:
    """Normalized crop half-widths (AR, drone 1, drone 2) under the module's convention."""
    d0, d1, d2 = scene.distances()
    s0 = ranges.crop_half_extent / d0
    return s0, s0 * (d0 / d1) ** 2, s0 * (d0 / d2) ** 2


def render_views(scene: SceneGeometry, mesh: TriangleMesh, ranges: SceneRanges,
                 drone_size: int = DRONE_CROP_SIZE, ar_size: int = NET_SIZE):
    """Contour crops of the posed mesh: (drone 1, drone 2, AR ground truth)."""
    pose = (yaw_rotation(scene.target_yaw), scene.pos_target)
    s0, s1, s2 = crop_half_widths(scene, ranges)
    views = []
    for name, s, size in (("d1", s1, drone_size), ("d2", s2, drone_size), ("ar", s0, ar_size)):
        views.append(render_silhouette(mesh, pose, crop_camera(scene, name, s, size), size))
    return tuple(views)


def preprocess_spec(sol, out_size: int = NET_SIZE) -> contour.PreprocessSpec:
    """Preprocessing parameters derived from a tetrahedron solution."""
    roll1, roll2 = horizon_rolls(sol)
    return contour.PreprocessSpec(sol.d0_over_d1, sol.d0_over_d2, roll1, roll2, sol.theta1, sol.theta2, out_size)


@dataclass
class Sample:
    input: np.ndarray
    target: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("input", "target"):
            img = np.asarray(getattr(self, name), dtype=float)
            if img.shape != (NET_SIZE, NET_SIZE):
                sid = self.metadata.get("scene_id", "?")
                raise ShapeMismatch(f"sample {sid}: {name} is {img.shape}, expected {NET_SIZE}x{NET_SIZE}")
            if img.min() < 0 or img.max() > 1:
                raise ValueError(f"sample {name} values must lie in [0, 1]")
            setattr(self, name, img)


def make_sample(scene_id: str, rng_seed, mesh, ranges, cameras, sigma=None):
    """One sample from one seeded scene; raises OutOfView/NotVisible on failure."""
    ss = np.random.SeedSequence(rng_seed)
    scene_seed, noise_seed = ss.spawn(2)
    scene = random_scene(ranges, scene_seed, cameras)
    sigma = ranges.pixel_noise_sigma if sigma is None else sigma
    frame = synthesize_frame(scene, *cameras, sigma=sigma, seed=noise_seed)
    sol = estimate_target(frame, *cameras)
    spec = preprocess_spec(sol)
    c1, c2, truth = render_views(scene, mesh, ranges)
    inp = contour.preprocess(c1, c2, spec)
    meta = {"scene_id": scene_id, "thetas": [spec.theta1, spec.theta2]}
    return Sample(inp, contour.resample(truth, NET_SIZE), meta), scene, (c1, c2)


def generate_dataset(mesh: TriangleMesh, n: int, ranges: SceneRanges, cameras=None, seed=0,
                     prefix: str = "s", threads: int = 1) -> list[Sample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``.

    Scenes that fail (off-sensor subjects, empty silhouettes, degenerate
    geometry) are redrawn with the next attempt index; the attempt count is
    recorded in each sample's metadata.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    cameras = cameras or default_cameras()

    def one(i):
        for attempt in range(MAX_SCENE_ATTEMPTS):
            try:
                sample = make_sample(f"{prefix}{i:05d}", (int(seed), i, attempt), mesh, ranges, cameras)[0]
            except Ard2Error:
                continue
            sample.metadata["attempts"] = attempt + 1
            return sample
        raise Unsatisfiable(f"sample {i}: no usable scene in {MAX_SCENE_ATTEMPTS} attempts")

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


def save_dataset(directory, samples) -> None:
    """Write ``<id>.input.pgm`` / ``<id>.target.pgm`` pairs and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in samples:
        sid = s.metadata["scene_id"]
        contour.write_pgm(directory / f"{sid}.input.pgm", s.input)
        contour.write_pgm(directory / f"{sid}.target.pgm", s.target)
        manifest.append({"scene_id": sid, "thetas": [float(t) for t in s.metadata.get("thetas", [])],
                         "attempts": int(s.metadata.get("attempts", 1))})
    (directory / "manifest.json").write_text(json.dumps({"samples": manifest}, indent=1) + "\n")


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read dataset manifest in {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"bad manifest in {directory}: {exc}") from exc
    samples = []
    for entry in manifest["samples"]:
        sid = entry["scene_id"]
        samples.append(Sample(contour.read_pgm(directory / f"{sid}.input.pgm"),
                              contour.read_pgm(directory / f"{sid}.target.pgm"),
                              {"scene_id": sid, "thetas": entry.get("thetas", [])}))
    return samples


def ranges_to_dict(ranges: SceneRanges) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(ranges).items()}
