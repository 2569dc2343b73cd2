from __future__ import annotations


import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ard2 import synth
from ard2.calibration import (
    CalibrationOptions,
    CalibrationProblem,
    angle_sum_residual,
    calibrate,
    loss,
    loss_gradient,
)
from ard2.errors import ConfigError, SingularNormalEquations

ALL_FX = {"ar": ["fx"], "d1": ["fx"], "d2": ["fx"]}


def make_frames(n, sigma, seed, cameras):
    ranges = synth.SceneRanges()
    out = []
    for i in range(n):
        scene = synth.random_scene(ranges, (seed, i), cameras)
        out.append(synth.synthesize_frame(scene, *cameras, sigma=sigma, seed=(seed, i, 1)))
    return out


def test_residual_zero_at_truth(frames, cameras):
    for frame in frames:
        assert abs(angle_sum_residual(frame, *cameras)) < 1e-9


def test_residual_nonzero_for_wrong_focal_length(frames, cameras):
    ar, d1, d2 = cameras
    assert abs(angle_sum_residual(frames[0], ar.replace(fx=ar.fx * 1.1), d1, d2)) > 1e-6


def test_residual_symmetric_in_ar_detections(frames, cameras):
    ar, d1, d2 = cameras
    wrong = ar.replace(fx=ar.fx * 1.1)
    for frame in frames[:10]:
        assert angle_sum_residual(frame.swapped_ar(), wrong, d1, d2) == angle_sum_residual(frame, wrong, d1, d2)


def test_loss_exact_and_order_invariant(frames, cameras):
    problem = CalibrationProblem(frames, *cameras, ALL_FX)
    assert loss(problem, cameras) < 1e-18
    ar, d1, d2 = cameras
    off = (ar.replace(fx=ar.fx * 1.05), d1, d2)
    shuffled = CalibrationProblem(list(reversed(frames)), *cameras, ALL_FX)
    assert loss(shuffled, off) == pytest.approx(loss(problem, off), rel=1e-14)


def test_batched_loss_matches_scalar_residuals(frames, cameras):
    ar, d1, d2 = cameras
    off = (ar.replace(fx=ar.fx * 1.03, k1=-0.02), d1.replace(fy=d1.fy * 0.98), d2)
    problem = CalibrationProblem(frames, *cameras, ALL_FX)
    expected = np.mean([angle_sum_residual(f, *off) ** 2 for f in frames])
    assert loss(problem, off) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("cam", ["ar", "d1", "d2"])
@pytest.mark.parametrize("name", ["fx", "fy", "cx", "cy", "k1", "k2"])
def test_optimum_is_a_minimum(frames, cameras, cam, name):
    problem = CalibrationProblem(frames[:10], *cameras, {cam: [name]})
    base = loss(problem, cameras)
    k = ("ar", "d1", "d2").index(cam)
    value = getattr(cameras[k], name)
    # distortion probes stay small enough for the wide drone lenses to remain invertible
    step = {"k1": 1e-3, "k2": 1e-5}.get(name, 0.01 * value)
    for sign in (+1, -1):
        moved = list(cameras)
        moved[k] = moved[k].replace(**{name: value + sign * step})
        assert loss(problem, moved) > base


def test_exact_initial_guess_converges_immediately(frames, cameras):
    result = calibrate(CalibrationProblem(frames, *cameras, ALL_FX))
    assert result.converged
    assert result.iterations <= 1
    assert result.final_loss == result.initial_loss
    assert result.final_loss < 1e-18


def test_recovers_single_focal_length(cameras):
    frames = make_frames(50, 0.0, 21, cameras)
    ar, d1, d2 = cameras
    result = calibrate(CalibrationProblem(frames, ar.replace(fx=ar.fx * 1.1), d1, d2, {"ar": ["fx"]}))
    assert result.converged
    assert abs(result.refined_ar.fx / ar.fx - 1.0) < 1e-3
    assert result.last_step < CalibrationOptions().step_tolerance


def test_recovers_three_focal_lengths_with_noise(cameras):
    frames = make_frames(50, 0.5, 22, cameras)
    start = [c.replace(fx=c.fx * s) for c, s in zip(cameras, (1.06, 0.95, 1.04))]
    result = calibrate(CalibrationProblem(frames, *start, ALL_FX))
    assert result.final_loss < result.initial_loss
    for got, truth in zip(result.refined, cameras):
        assert abs(got.fx / truth.fx - 1.0) < 0.02


def test_accepted_losses_never_increase(cameras):
    frames = make_frames(20, 0.5, 23, cameras)
    ar, d1, d2 = cameras
    start = (ar.replace(fx=ar.fx * 1.1, k1=0.0), d1.replace(fx=d1.fx * 0.93), d2)
    result = calibrate(CalibrationProblem(frames, *start, {"ar": ["fx", "k1"], "d1": ["fx"]}))
    h = result.loss_history
    assert all(b <= a for a, b in zip(h, h[1:]))
    assert h[0] == result.initial_loss and h[-1] == result.final_loss


def test_one_frame_with_many_free_parameters_is_singular(frames, cameras):
    free = {"ar": ["fx", "fy", "cx", "cy", "k1", "k2"]}
    with pytest.raises(SingularNormalEquations):
        calibrate(CalibrationProblem(frames[:1], *cameras, free))
    free = {"ar": ["fx", "fy", "cx"], "d1": ["fx", "fy"], "d2": ["fx"]}
    with pytest.raises(SingularNormalEquations):
        calibrate(CalibrationProblem(frames[:1], *cameras, free))


def test_rank_deficient_jacobian_is_singular(frames, cameras):
    # identical frames add no information: two focal lengths, one equation
    problem = CalibrationProblem([frames[0]] * 5, *cameras, {"ar": ["fx", "fy"]})
    with pytest.raises(SingularNormalEquations):
        calibrate(problem)


def test_deterministic(cameras):
    frames = make_frames(12, 0.5, 24, cameras)
    start = [c.replace(fx=c.fx * 1.03) for c in cameras]
    a = calibrate(CalibrationProblem(frames, *start, ALL_FX))
    b = calibrate(CalibrationProblem(frames, *start, ALL_FX))
    assert a == b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.9, 1.1), st.floats(0.9, 1.1))
def test_gradient_matches_one_sided_difference(seed, s_ar, s_d1):
    cams = synth.default_cameras()
    frames = make_frames(5, 0.0, seed, cams)
    ar, d1, d2 = cams
    point = (ar.replace(fx=ar.fx * s_ar), d1.replace(fx=d1.fx * s_d1), d2)
    problem = CalibrationProblem(frames, *point, {"ar": ["fx"], "d1": ["fx"]})
    grad = loss_gradient(problem)
    base = loss(problem, point)
    for j, (k, name) in enumerate(problem.slots()):
        value = getattr(point[k], name)
        h = 1e-4 * value
        moved = list(point)
        moved[k] = moved[k].replace(**{name: value + h})
        one_sided = (loss(problem, moved) - base) / h
        # the secant equals the mean slope over the step, which stays exact
        # to third order even at the optimum where the gradient vanishes
        mean_slope = 0.5 * (grad[j] + loss_gradient(problem, moved)[j])
        assert one_sided == pytest.approx(mean_slope, rel=0.01, abs=1e-12)


def test_noise_floor(cameras):
    frames = make_frames(100, 1.0, 25, cameras)
    start = [c.replace(fx=c.fx * s) for c, s in zip(cameras, (1.05, 0.97, 1.02))]
    problem = CalibrationProblem(frames, *start, ALL_FX)
    result = calibrate(problem)
    at_truth = loss(problem, cameras)
    assert at_truth / 2 <= result.final_loss <= at_truth * 1.0001
    held_out = make_frames(100, 1.0, 26, cameras)
    check = CalibrationProblem(held_out, *cameras, ALL_FX)
    assert loss(check, result.refined) > 0.5 * loss(check, cameras)


def test_problem_validation(frames, cameras):
    with pytest.raises(ConfigError):
        CalibrationProblem(frames, *cameras, {"ar": ["focal"]})
    with pytest.raises(ConfigError):
        CalibrationProblem(frames, *cameras, {"d3": ["fx"]})
    with pytest.raises(ConfigError):
        CalibrationProblem(frames, *cameras, {})
    with pytest.raises(ConfigError):
        CalibrationOptions(max_iterations=0)
    with pytest.raises(ConfigError):
        CalibrationOptions(step_tolerance=0.0)
    assert CalibrationProblem(frames, *cameras, {"ar": ["k1"]}).min_frames == 8
    assert CalibrationProblem(frames, *cameras, {"ar": ["fx"]}).min_frames == 3


def test_too_few_frames_for_distortion(frames, cameras):
    with pytest.raises(SingularNormalEquations, match="8"):
        calibrate(CalibrationProblem(frames[:5], *cameras, {"ar": ["k1"]}))
