from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ard2 import synth
from ard2.camera import angle_between, axis_angle, intrinsics_from_fov, is_rotation, look_at, normalize, project
from ard2.errors import (
    BehindCamera,
    BehindObserver,
    CorruptFile,
    DegeneratePair,
    DegenerateTriangle,
    InconsistentFrame,
    ParallelRays,
)
from ard2.geometry import (
    ObservationFrame,
    align_orientation,
    estimate_target,
    intersect_rays,
    load_frames,
    project_to_ar,
    save_frames,
    solve_triangle,
)

WIDE = intrinsics_from_fov(1000, 750, 150.0)


def symmetric_scene():
    """Equilateral AR-drone-drone triangle (side 10 m) with the target above its centroid."""
    ar = np.zeros(3)
    d1 = np.array([10 * math.cos(math.pi / 6), 5.0, 0.0])
    d2 = np.array([10 * math.cos(math.pi / 6), -5.0, 0.0])
    target = np.array([(ar + d1 + d2)[0] / 3.0, 0.0, 6.0])
    pos = {"ar": ar, "d1": d1, "d2": d2, "target": target}
    rots = {}
    for name in ("ar", "d1", "d2"):
        subjects = [pos[s] for s in synth.SUBJECTS[name]]
        rots[name] = look_at(np.mean([normalize(s - pos[name]) for s in subjects], axis=0))
    return synth.SceneGeometry(ar, d1, d2, target, rots["ar"], rots["d1"], rots["d2"])


def test_equilateral_triangle():
    scene = symmetric_scene()
    frame = synth.synthesize_frame(scene, WIDE, WIDE, WIDE)
    tri = solve_triangle(frame, WIDE, WIDE, WIDE)
    assert tri.len_ar_d1 == 1.0
    assert tri.len_ar_d2 == pytest.approx(1.0, abs=1e-12)
    assert tri.len_d1_d2 == pytest.approx(1.0, abs=1e-12)
    for angle in (tri.alpha, tri.beta1, tri.beta2):
        assert angle == pytest.approx(math.pi / 3, abs=1e-12)


def test_symmetric_target_gives_equal_thetas():
    scene = symmetric_scene()
    frame = synth.synthesize_frame(scene, WIDE, WIDE, WIDE)
    sol = estimate_target(frame, WIDE, WIDE, WIDE)
    assert sol.theta1 == pytest.approx(sol.theta2, abs=1e-12)
    assert sol.d0_over_d1 == pytest.approx(sol.d0_over_d2, abs=1e-12)


def test_triangle_matches_ground_truth(scenes, frames, cameras):
    for scene, frame in zip(scenes, frames):
        tri = solve_triangle(frame, *cameras)
        d_ar_d1 = np.linalg.norm(scene.pos_d1 - scene.pos_ar)
        d_ar_d2 = np.linalg.norm(scene.pos_d2 - scene.pos_ar)
        d_d1_d2 = np.linalg.norm(scene.pos_d2 - scene.pos_d1)
        assert tri.len_ar_d2 == pytest.approx(d_ar_d2 / d_ar_d1, abs=1e-9)
        assert tri.len_d1_d2 == pytest.approx(d_d1_d2 / d_ar_d1, abs=1e-9)
        np.testing.assert_allclose(tri.u1, normalize(scene.to_camera("ar", scene.pos_d1)), atol=1e-9)
        np.testing.assert_allclose(tri.u2, normalize(scene.to_camera("ar", scene.pos_d2)), atol=1e-9)


def test_triangle_invariants(frames, cameras):
    for frame in frames:
        tri = solve_triangle(frame, *cameras)
        assert tri.alpha + tri.beta1 + tri.beta2 == pytest.approx(math.pi, abs=1e-9)
        ratio = 1.0 / math.sin(tri.beta2)
        assert tri.len_d1_d2 / math.sin(tri.alpha) == pytest.approx(ratio, rel=1e-9)
        assert tri.len_ar_d2 / math.sin(tri.beta1) == pytest.approx(ratio, rel=1e-9)
        assert is_rotation(tri.r1) and is_rotation(tri.r2)


def test_rotation_consistency(frames, cameras):
    from ard2.camera import pixel_to_ray

    for frame in frames:
        tri = solve_triangle(frame, *cameras)
        np.testing.assert_allclose(tri.r1 @ pixel_to_ray(frame.d1_sees_ar, cameras[1]), -tri.u1, atol=1e-9)
        np.testing.assert_allclose(tri.r2 @ pixel_to_ray(frame.d2_sees_ar, cameras[2]), -tri.u2, atol=1e-9)


def test_collinear_frame_is_degenerate(frames, cameras):
    # the AR sees both drones along the same ray
    d = frames[0].to_dict()
    d["ar_sees_d2"] = d["ar_sees_d1"]
    with pytest.raises(DegenerateTriangle):
        solve_triangle(ObservationFrame.from_dict(d), *cameras)


def test_inconsistent_frame(frames, cameras):
    ar, d1, d2 = cameras
    with pytest.raises(InconsistentFrame):
        solve_triangle(frames[0], ar.replace(fx=ar.fx * 0.5, fy=ar.fy * 0.5), d1, d2)


def test_noise_free_exactness(scenes, frames, cameras):
    for scene, frame in zip(scenes, frames):
        sol = estimate_target(frame, *cameras)
        assert angle_between(sol.target_bearing, scene.true_bearing()) < 1e-6
        d0, d1, d2 = scene.distances()
        assert sol.d0_over_d1 == pytest.approx(d0 / d1, abs=1e-9)
        assert sol.d0_over_d2 == pytest.approx(d0 / d2, abs=1e-9)
        assert sol.gap < 1e-9
        np.testing.assert_allclose(sol.target_bearing, normalize(sol.target_pos), atol=1e-15)
        assert 0 < sol.theta1 < math.pi and 0 < sol.theta2 < math.pi


def test_project_to_ar(scenes, frames, cameras):
    ar = cameras[0]
    for scene, frame in zip(scenes, frames):
        dot = project_to_ar(estimate_target(frame, *cameras), ar)
        truth = project(scene.to_camera("ar", scene.pos_target), ar)
        assert math.hypot(dot[0] - truth[0], dot[1] - truth[1]) < 1e-4


def test_project_to_ar_examples(simple_intr, frames, cameras):
    sol = estimate_target(frames[0], *cameras)
    on_axis = type(sol)(**{**sol.__dict__, "target_bearing": np.array([0.0, 0.0, 1.0])})
    assert project_to_ar(on_axis, simple_intr) == (320.0, 240.0)
    oblique = type(sol)(**{**sol.__dict__, "target_bearing": np.array([1.0, 0.0, 1.0]) / math.sqrt(2)})
    u, v = project_to_ar(oblique, simple_intr)
    assert u == pytest.approx(820.0, abs=1e-9) and v == 240.0
    behind = type(sol)(**{**sol.__dict__, "target_bearing": np.array([0.0, 0.0, -1.0])})
    with pytest.raises(BehindCamera):
        project_to_ar(behind, simple_intr)


def test_align_orientation_identity():
    a, b = np.array([1.0, 0, 0]), np.array([0.3, 1.0, 0])
    np.testing.assert_allclose(align_orientation(a, b, a, b), np.eye(3), atol=1e-15)


def test_align_orientation_recovers_rotation():
    rng = np.random.default_rng(4)
    for _ in range(50):
        r0 = axis_angle(rng.normal(size=3), rng.uniform(-math.pi, math.pi))
        a, b = normalize(rng.normal(size=3)), normalize(rng.normal(size=3))
        np.testing.assert_allclose(align_orientation(a, b, r0 @ a, r0 @ b), r0, atol=1e-10)


def test_align_orientation_inexact_pair():
    a, b = np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0])
    ga, gb = np.array([0.0, 0, 1]), normalize([1.0, 0.2, 0.5])
    r = align_orientation(a, b, ga, gb)
    np.testing.assert_allclose(r @ a, ga, atol=1e-15)
    rb = r @ b
    normal = np.cross(ga, gb)
    assert abs(rb @ normal) < 1e-12
    assert np.cross(ga, rb) @ normal > 0


def test_align_orientation_degenerate():
    a = np.array([1.0, 0, 0])
    with pytest.raises(DegeneratePair):
        align_orientation(a, a, a, np.array([0, 1.0, 0]))


def test_intersect_rays_examples():
    point, gap = intersect_rays((0, 0, 0), (1, 0, 0), (1, -1, 0), (0, 1, 0))
    np.testing.assert_allclose(point, [1, 0, 0], atol=1e-15)
    assert gap == 0.0
    point, gap = intersect_rays((0, 0, 0), (1, 0, 0), (0, 0, 1), (0, 1, 0))
    np.testing.assert_allclose(point, [0, 0, 0.5], atol=1e-15)
    assert gap == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ParallelRays):
        intersect_rays((0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 0, 0))
    with pytest.raises(BehindObserver):
        intersect_rays((0, 0, 0), (1, 0, 0), (-1, -1, 0), (0, 1, 0))


def test_intersect_rays_against_dense_search():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p1, p2 = rng.normal(size=3), rng.normal(size=3) + [4, 0, 0]
        target = rng.normal(size=3) + [2, 5, 0]
        d1 = normalize(target - p1 + rng.normal(scale=0.2, size=3))
        d2 = normalize(target - p2 + rng.normal(scale=0.2, size=3))
        try:
            point, gap = intersect_rays(p1, d1, p2, d2)
        except BehindObserver:
            continue
        t = np.linspace(0, 15, 1501)
        a = p1 + t[:, None] * d1
        b = p2 + t[:, None] * d2
        dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        assert gap <= dist[i, j] + 1e-12
        assert gap == pytest.approx(dist[i, j], abs=2e-2)
        np.testing.assert_allclose(point, 0.5 * (a[i] + b[j]), atol=2e-2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-3, 3))
def test_scale_invariance_power_of_two(seed, exponent):
    cams = synth.default_cameras()
    scene = synth.random_scene(synth.SceneRanges(), seed, cams)
    a = synth.synthesize_frame(scene, *cams)
    b = synth.synthesize_frame(scene.scaled(2.0**exponent), *cams)
    assert a == b
    sa, sb = estimate_target(a, *cams), estimate_target(b, *cams)
    assert np.array_equal(sa.target_pos, sb.target_pos)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_scale_invariance_any_factor(seed, s):
    cams = synth.default_cameras()
    scene = synth.random_scene(synth.SceneRanges(), seed, cams)
    a = synth.synthesize_frame(scene, *cams)
    b = synth.synthesize_frame(scene.scaled(s), *cams)
    for name in a.to_dict():
        np.testing.assert_allclose(a.to_dict()[name], b.to_dict()[name], rtol=0, atol=1e-9)
    sa, sb = estimate_target(a, *cams), estimate_target(b, *cams)
    # compare vectors directly; acos near 1 cannot resolve angles below ~1e-8
    assert np.linalg.norm(sa.target_bearing - sb.target_bearing) < 1e-9


def test_monotone_degradation_with_noise(cameras):
    ranges = synth.SceneRanges()
    scenes = [synth.random_scene(ranges, (11, i), cameras) for i in range(200)]
    means = []
    for sigma in (0.0, 0.5, 1.0, 2.0):
        errors = []
        for i, scene in enumerate(scenes):
            frame = synth.synthesize_frame(scene, *cameras, sigma=sigma, seed=(12, i))
            errors.append(angle_between(estimate_target(frame, *cameras).target_bearing, scene.true_bearing()))
        means.append(np.mean(errors))
    assert all(a <= b for a, b in zip(means, means[1:])), means


def test_frame_file_round_trip(tmp_path, frames):
    path = tmp_path / "frames.jsonl"
    save_frames(path, frames[:5])
    assert load_frames(path) == frames[:5]


def test_frame_record_is_strict(frames):
    d = frames[0].to_dict()
    with pytest.raises(CorruptFile):
        ObservationFrame.from_dict({**d, "extra": [0, 0]})
    d.pop("d2_sees_target")
    with pytest.raises(CorruptFile):
        ObservationFrame.from_dict(d)
