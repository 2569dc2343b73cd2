from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ard2.camera import (
    CameraIntrinsics,
    angle_between,
    apply_distortion,
    axis_angle,
    intrinsics_from_fov,
    is_rotation,
    look_at,
    pixel_to_ray,
    pixels_to_rays,
    project,
    read_intrinsics,
    undistort,
    write_intrinsics,
)
from ard2.errors import BehindCamera, InvalidIntrinsics, IoFailure, NonConvergent


def test_distortion_fixed_point_at_center():
    intr = CameraIntrinsics(500, 500, 320, 240, 0.3, -0.1, 640, 480)
    assert apply_distortion((0.0, 0.0), intr) == (0.0, 0.0)


def test_zero_distortion_is_identity(simple_intr):
    assert apply_distortion((0.5, 0.0), simple_intr) == (0.5, 0.0)


def test_distortion_polynomial():
    intr = CameraIntrinsics(500, 500, 320, 240, 0.1, 0.0, 640, 480)
    x, y = apply_distortion((0.5, 0.0), intr)
    assert x == pytest.approx(0.5125, abs=1e-15)
    assert y == 0.0


def test_undistort_examples(simple_intr):
    assert undistort((0.0, 0.0), simple_intr) == (0.0, 0.0)
    assert undistort((0.3, -0.2), simple_intr) == (0.3, -0.2)
    intr = CameraIntrinsics(500, 500, 320, 240, 0.1, 0.0, 640, 480)
    x, y = undistort((0.5125, 0.0), intr)
    assert abs(x - 0.5) < 1e-10 and abs(y) < 1e-15


def test_undistort_reports_nonconvergence():
    # bypass validation to reach a radius beyond the fold of s(r) * r
    intr = object.__new__(CameraIntrinsics)
    for k, v in dict(fx=1.0, fy=1.0, cx=0.0, cy=0.0, k1=-1.0, k2=0.0, width=2, height=2).items():
        object.__setattr__(intr, k, v)
    with pytest.raises(NonConvergent):
        undistort((2.0, 0.0), intr)


def test_pixel_to_ray_examples(simple_intr):
    np.testing.assert_allclose(pixel_to_ray((320, 240), simple_intr), [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(pixel_to_ray((820, 240), simple_intr), np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)


def test_pixel_to_ray_round_trip_with_distortion():
    intr = CameraIntrinsics(500, 500, 320, 240, 0.05, 0.0, 640, 480)
    rng = np.random.default_rng(0)
    for u, v in rng.uniform([0, 0], [640, 480], size=(200, 2)):
        back = project(pixel_to_ray((u, v), intr), intr)
        assert math.hypot(back[0] - u, back[1] - v) < 1e-8


def test_project_examples(simple_intr):
    assert project((0, 0, 5), simple_intr) == (320.0, 240.0)
    assert project((1, 0, 1), simple_intr) == (820.0, 240.0)
    with pytest.raises(BehindCamera):
        project((0, 0, -1), simple_intr)
    with pytest.raises(BehindCamera):
        project((1, 1, 0), simple_intr)


def test_angle_between_examples():
    a = np.array([0.0, 0.0, 1.0])
    assert angle_between(a, a) == 0.0
    assert angle_between((1, 0, 0), (0, 1, 0)) == pytest.approx(math.pi / 2, abs=1e-15)
    assert angle_between(a, np.array([1, 0, 1]) / math.sqrt(2)) == pytest.approx(math.pi / 4, abs=1e-15)
    # dot products a few ulps above 1 are clamped
    assert angle_between(a * (1 + 1e-16), a) == 0.0


sensor_pixels = st.tuples(st.floats(0, 999.999), st.floats(0, 749.999))
distortion = st.tuples(st.floats(-0.2, 0.2), st.floats(-0.05, 0.05))


@settings(max_examples=200, deadline=None)
@given(sensor_pixels, distortion, st.floats(0.01, 1e4))
def test_round_trip_property(p, k, t):
    try:
        intr = intrinsics_from_fov(1000, 750, 60.0, *k)
    except InvalidIntrinsics:
        return
    ray = pixel_to_ray(p, intr)
    u, v = project(ray * t, intr)
    assert abs(u - p[0]) < 1e-6 and abs(v - p[1]) < 1e-6


@settings(max_examples=200, deadline=None)
@given(sensor_pixels, distortion)
def test_rays_are_unit(p, k):
    try:
        intr = intrinsics_from_fov(1000, 750, 90.0, *k)
    except InvalidIntrinsics:
        return
    assert abs(np.linalg.norm(pixel_to_ray(p, intr)) - 1.0) < 1e-12


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


unit_vectors = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 1e-3
).map(_unit)


@settings(max_examples=200, deadline=None)
@given(unit_vectors, unit_vectors, unit_vectors)
def test_angle_symmetry_and_triangle_inequality(a, b, c):
    assert angle_between(a, b) == angle_between(b, a)
    # acos resolves angles near 0 and pi only to about sqrt(2 * eps) ~ 2e-8 rad
    assert angle_between(a, c) <= angle_between(a, b) + angle_between(b, c) + 1e-7


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.05, 0.05))
def test_accepted_intrinsics_are_monotone_to_the_corner(k1, k2):
    try:
        intr = intrinsics_from_fov(1000, 750, 60.0, k1, k2)
    except InvalidIntrinsics:
        return
    r = np.linspace(0.0, 1.5 * intr.corner_radius, 2000)
    reach = r * (1 + k1 * r**2 + k2 * r**4)
    inside = reach <= intr.corner_radius
    assert np.all(np.diff(reach[inside]) > 0)


def test_vectorized_rays_match_scalar(cameras):
    rng = np.random.default_rng(3)
    pts = rng.uniform([0, 0], [1000, 750], size=(300, 2))
    for intr in cameras:
        expected = np.array([pixel_to_ray(p, intr) for p in pts])
        np.testing.assert_allclose(pixels_to_rays(pts, intr), expected, atol=1e-14)


@pytest.mark.parametrize(
    "kwargs",
    [dict(fx=0.0), dict(fy=-1.0), dict(cx=640.0), dict(cy=-0.5), dict(width=1), dict(fx=float("nan"))],
)
def test_invalid_intrinsics(kwargs):
    values = dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0, k1=0.0, k2=0.0, width=640, height=480)
    values.update(kwargs)
    with pytest.raises(InvalidIntrinsics):
        CameraIntrinsics(**values)


def test_non_invertible_distortion_is_rejected():
    with pytest.raises(InvalidIntrinsics):
        intrinsics_from_fov(1000, 750, 120.0, k1=-0.5)


def test_intrinsics_record_round_trip(tmp_path, cameras):
    for intr in cameras:
        path = tmp_path / "cam.intrinsics"
        write_intrinsics(path, intr)
        assert read_intrinsics(path) == intr
    text = cameras[0].to_record()
    assert [line.split(" = ")[0] for line in text.splitlines()] == ["fx", "fy", "cx", "cy", "k1", "k2", "width", "height"]


@pytest.mark.parametrize(
    "text",
    ["fx = 1\n", "fx = 1\nfx = 2\n", "fx = abc\nfy = 1\ncx = 0\ncy = 0\nk1 = 0\nk2 = 0\nwidth = 2\nheight = 2\n", "zoom = 2\n"],
)
def test_bad_records(text):
    with pytest.raises(InvalidIntrinsics):
        CameraIntrinsics.from_record(text)


def test_missing_intrinsics_file(tmp_path):
    with pytest.raises(IoFailure, match="nope"):
        read_intrinsics(tmp_path / "nope.intrinsics")


def test_rotations():
    r = axis_angle((1, 2, 3), 0.7)
    assert is_rotation(r)
    assert not is_rotation(np.diag([1.0, 1.0, -1.0]))
    cam = look_at((1.0, 0.0, 0.0))
    assert is_rotation(cam)
    np.testing.assert_allclose(cam @ np.array([1.0, 0.0, 0.0]), [0, 0, 1], atol=1e-15)
    # world up appears as image up (-y)
    assert (cam @ np.array([0.0, 0.0, 1.0]))[1] < 0
    with pytest.raises(ValueError):
        look_at((0.0, 0.0, 1.0))
