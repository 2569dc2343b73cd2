"""Joint intrinsics refinement from the triangle angle-sum constraint.

The AR camera and the two drones see each other, so each frame yields three
interior angles of one physical triangle. With correct intrinsics they sum
to pi; the deviation is the per-frame residual. :func:`calibrate` runs a
Levenberg-Marquardt loop (Marquardt's diagonal scaling, lambda starting at
1e-3, times 10 on a rejected step and divided by 10 on an accepted one) over
the parameters flagged free, with central-difference Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, angle_between, pixel_to_ray, pixels_to_rays
from .errors import ConfigError, SingularNormalEquations
from .geometry import ObservationFrame

CAMERAS = ("ar", "d1", "d2")
PARAMETERS = ("fx", "fy", "cx", "cy", "k1", "k2")
DISTORTION = ("k1", "k2")

LAMBDA0 = 1e-3
LAMBDA_UP = 10.0
LAMBDA_DOWN = 10.0
LAMBDA_MAX = 1e16
JACOBIAN_STEP = 1e-6
RANK_TOL = 1e-10

# pixel fields giving the two rays at each triangle vertex
_VERTEX_FIELDS = {
    "ar": ("ar_sees_d1", "ar_sees_d2"),
    "d1": ("d1_sees_ar", "d1_sees_d2"),
    "d2": ("d2_sees_ar", "d2_sees_d1"),
}


@dataclass(frozen=True)
class CalibrationOptions:
    max_iterations: int = 500
    step_tolerance: float = 1e-8
    # largest relative parameter change allowed in the first iteration
    initial_step: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")
        if not (self.step_tolerance > 0 and self.initial_step > 0):
            raise ConfigError("step_tolerance and initial_step must be positive")


def _normalize_free(free) -> dict[str, tuple[str, ...]]:
    if free is None:
        return {"ar": ("fx",), "d1": ("fx",), "d2": ("fx",)}
    out = {}
    for cam in free:
        if cam not in CAMERAS:
            raise ConfigError(f"unknown camera {cam!r} in free_parameters; expected one of {CAMERAS}")
        names = tuple(free[cam])
        for name in names:
            if name not in PARAMETERS:
                raise ConfigError(f"unknown parameter {name!r} for camera {cam!r}; expected one of {PARAMETERS}")
        out[cam] = tuple(p for p in PARAMETERS if p in names)
    return {cam: out.get(cam, ()) for cam in CAMERAS}


@dataclass(frozen=True)
class CalibrationProblem:
    """Frames plus initial intrinsics and the per-camera free-parameter flags.

    ``free_parameters`` maps a camera name (``"ar"``, ``"d1"``, ``"d2"``) to the
    names of its free parameters; cameras left out are frozen. The default
    frees the three focal lengths ``fx``.
    """

    frames: tuple
    initial_ar: CameraIntrinsics
    initial_d1: CameraIntrinsics
    initial_d2: CameraIntrinsics
    free_parameters: dict = None
    options: CalibrationOptions = field(default_factory=CalibrationOptions)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        free = _normalize_free(self.free_parameters)
        object.__setattr__(self, "free_parameters", free)
        n_free = sum(len(v) for v in free.values())
        if n_free == 0:
            raise ConfigError("no free parameters")
        if not self.frames:
            raise ConfigError("at least one frame is required")

    @property
    def min_frames(self) -> int:
        """8 frames when a distortion coefficient is free, 3 otherwise."""
        free = self.free_parameters.values()
        return 8 if any(p in DISTORTION for names in free for p in names) else 3

    @property
    def initial(self) -> tuple[CameraIntrinsics, CameraIntrinsics, CameraIntrinsics]:
        return (self.initial_ar, self.initial_d1, self.initial_d2)

    def slots(self) -> list[tuple[int, str]]:
        """(camera index, parameter name) for each free parameter, in order."""
        return [(k, name) for k, cam in enumerate(CAMERAS) for name in self.free_parameters[cam]]

    def pack(self, intrinsics) -> np.ndarray:
        return np.array([float(getattr(intrinsics[k], name)) for k, name in self.slots()])

    def unpack(self, x) -> tuple[CameraIntrinsics, CameraIntrinsics, CameraIntrinsics]:
        changes = [{}, {}, {}]
        for (k, name), value in zip(self.slots(), x):
            changes[k][name] = float(value)
        return tuple(intr.replace(**c) if c else intr for intr, c in zip(self.initial, changes))


@dataclass(frozen=True)
class CalibrationResult:
    refined_ar: CameraIntrinsics
    refined_d1: CameraIntrinsics
    refined_d2: CameraIntrinsics
    initial_loss: float
    final_loss: float
    iterations: int
    converged: bool
    last_step: float = math.inf
    loss_history: tuple = ()

    @property
    def refined(self) -> tuple[CameraIntrinsics, CameraIntrinsics, CameraIntrinsics]:
        return (self.refined_ar, self.refined_d1, self.refined_d2)

    def report(self) -> dict:
        return {
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "iterations": self.iterations,
            "converged": self.converged,
            "last_relative_step": self.last_step,
            "accepted_losses": list(self.loss_history),
        }


def angle_sum_residual(frame: ObservationFrame, intr_ar, intr_d1, intr_d2) -> float:
    """``alpha + beta1 + beta2 - pi`` from the mutual bearings of one frame."""
    total = 0.0
    for cam, intr in zip(CAMERAS, (intr_ar, intr_d1, intr_d2)):
        a, b = _VERTEX_FIELDS[cam]
        total += angle_between(pixel_to_ray(getattr(frame, a), intr), pixel_to_ray(getattr(frame, b), intr))
    return total - math.pi


class _Residuals:
    """Batched per-frame residuals, caching each camera's vertex angles."""

    def __init__(self, frames):
        if not frames:
            raise ValueError("at least one frame is required")
        self.pixels = {
            cam: (np.array([getattr(f, a) for f in frames], dtype=float),
                  np.array([getattr(f, b) for f in frames], dtype=float))
            for cam, (a, b) in _VERTEX_FIELDS.items()
        }

    def angles(self, cam, intr):
        pa, pb = self.pixels[cam]
        dots = np.einsum("ij,ij->i", pixels_to_rays(pa, intr), pixels_to_rays(pb, intr))
        return np.arccos(np.clip(dots, -1.0, 1.0))

    def all_angles(self, intrinsics):
        return [self.angles(cam, intr) for cam, intr in zip(CAMERAS, intrinsics)]

    @staticmethod
    def combine(angles):
        return angles[0] + angles[1] + angles[2] - math.pi


def loss(problem: CalibrationProblem, intrinsics) -> float:
    """Mean squared angle-sum residual over the problem's frames (rad^2)."""
    r = _Residuals.combine(_Residuals(problem.frames).all_angles(intrinsics))
    return float(np.mean(r * r))


def _steps(x):
    return JACOBIAN_STEP * np.maximum(np.abs(x), 1.0)


def _jacobian(problem, res, x, angles):
    slots = problem.slots()
    h = _steps(x)
    jac = np.empty((len(angles[0]), len(x)))
    for j, (k, _) in enumerate(slots):
        plus, minus = x.copy(), x.copy()
        plus[j] += h[j]
        minus[j] -= h[j]
        cam = CAMERAS[k]
        # only the perturbed camera's vertex angle changes
        a_plus = res.angles(cam, problem.unpack(plus)[k])
        a_minus = res.angles(cam, problem.unpack(minus)[k])
        jac[:, j] = (a_plus - a_minus) / (plus[j] - minus[j])
    return jac


def loss_gradient(problem: CalibrationProblem, intrinsics=None) -> np.ndarray:
    """Central-difference gradient of :func:`loss` over the free parameters."""
    intrinsics = problem.initial if intrinsics is None else intrinsics
    res = _Residuals(problem.frames)
    x = problem.pack(intrinsics)
    angles = res.all_angles(problem.unpack(x))
    jac = _jacobian(problem, res, x, angles)
    r = _Residuals.combine(angles)
    return 2.0 * jac.T @ r / len(r)


def _relative_step(delta, x):
    return float(np.max(np.abs(delta) / np.maximum(np.abs(x), 1.0)))


def calibrate(problem: CalibrationProblem) -> CalibrationResult:
    """Refine the free intrinsics by damped Gauss-Newton on the angle-sum residuals.

    Raises:
        SingularNormalEquations: if there are fewer frames than the parameter
            set needs, or the Jacobian is rank-deficient (the free parameters
            are not identifiable from these frames).
        NonConvergent: bubbled up from undistortion.
    """
    opts = problem.options
    if len(problem.frames) < problem.min_frames:
        raise SingularNormalEquations(
            f"{len(problem.frames)} frame(s) cannot identify this parameter set; "
            f"at least {problem.min_frames} are required"
        )
    res = _Residuals(problem.frames)
    x = problem.pack(problem.initial)
    angles = res.all_angles(problem.initial)
    r = _Residuals.combine(angles)
    current = float(np.mean(r * r))
    initial_loss = current
    history = [current]
    lam = LAMBDA0
    step = math.inf
    converged = current == 0.0
    iterations = 0
    need_jacobian = True
    while not converged and iterations < opts.max_iterations:
        if need_jacobian:
            jac = _jacobian(problem, res, x, angles)
            # column scaling makes the rank test independent of parameter units
            norms = np.linalg.norm(jac, axis=0)
            sv = np.linalg.svd(jac / np.where(norms > 0, norms, 1.0), compute_uv=False)
            if len(r) < len(x) or np.any(norms == 0) or sv[-1] <= RANK_TOL * sv[0]:
                raise SingularNormalEquations(
                    f"{len(x)} free parameters are not identifiable from {len(r)} frame(s); "
                    "free fewer parameters or add frames with more varied geometry"
                )
            jtj = jac.T @ jac
            grad = jac.T @ r
            need_jacobian = False
        iterations += 1
        lhs = jtj + lam * np.diag(np.diag(jtj))
        try:
            delta = -np.linalg.solve(lhs, grad)
        except np.linalg.LinAlgError:
            raise SingularNormalEquations("damped normal equations are singular") from None
        if iterations == 1:
            rel = _relative_step(delta, x)
            if rel > opts.initial_step:
                delta *= opts.initial_step / rel
        step = _relative_step(delta, x)
        if step < opts.step_tolerance:
            converged = True
            break
        trial_x = x + delta
        try:
            trial = problem.unpack(trial_x)
        except ValueError:
            trial = None
        if trial is not None:
            trial_angles = res.all_angles(trial)
            trial_r = _Residuals.combine(trial_angles)
            trial_loss = float(np.mean(trial_r * trial_r))
        if trial is not None and trial_loss < current:
            x, angles, r, current = trial_x, trial_angles, trial_r, trial_loss
            history.append(current)
            lam = max(lam / LAMBDA_DOWN, 1e-12)
            need_jacobian = True
            if current == 0.0:
                converged = True
        else:
            lam *= LAMBDA_UP
            if lam > LAMBDA_MAX:
                break
    refined = problem.unpack(x)
    return CalibrationResult(*refined, initial_loss, current, iterations, converged, step, tuple(history))
