"""Contour image warps, aggregation and the error-ratio metric.

A contour image is a 2D float array (rows = y, columns = x) of foreground
probabilities in [0, 1]; it holds a filled silhouette, not an outline.
Geometric warps use bilinear sampling about the image center, with zero
(background) outside the source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptFile, EmptyInput, EmptyTruth, IoFailure, MismatchedSizes, ShapeMismatch

THRESHOLD = 0.5


@dataclass(frozen=True)
class PreprocessSpec:
    """Per-drone warp parameters: scale ``d0/d_i``, roll and camera-angle difference."""

    scale1: float
    scale2: float
    roll1: float
    roll2: float
    theta1: float
    theta2: float
    out_size: int = 60

    def __post_init__(self):
        if not (self.scale1 > 0 and self.scale2 > 0):
            raise ValueError(f"scale factors must be positive, got {self.scale1}, {self.scale2}")
        for theta in (self.theta1, self.theta2):
            if not 0.0 <= theta < math.pi / 2:
                raise ValueError(f"camera-angle difference {theta} outside [0, pi/2)")
        if self.out_size < 8:
            raise ValueError(f"out_size must be at least 8, got {self.out_size}")


def as_contour(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ShapeMismatch(f"contour images are non-empty 2D arrays, got shape {img.shape}")
    return img


def _warp(img, matrix):
    # matrix maps output (row, col) offsets from the center to source offsets
    h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    off = np.stack((rows.ravel() - center[0], cols.ravel() - center[1]))
    src = matrix @ off + center[:, None]
    out = ndimage.map_coordinates(img, src, order=1, mode="constant", cval=0.0)
    return np.clip(out.reshape(h, w), 0.0, 1.0)


def scale_contour(img, factor: float) -> np.ndarray:
    """Magnify the content by ``factor`` about the image center; same canvas size."""
    img = as_contour(img)
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return img.copy()
    return _warp(img, np.eye(2) / factor)


def rotate_contour(img, angle: float) -> np.ndarray:
    """Rotate the content counterclockwise (as displayed) by ``angle`` radians."""
    img = as_contour(img)
    if angle == 0.0:
        return img.copy()
    c, s = math.cos(angle), math.sin(angle)
    # (row, col) = (y, x) with y pointing down
    return _warp(img, np.array([[c, s], [-s, c]]))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    ratio = n_in / n_out
    edges = np.arange(n_out + 1) * ratio
    lo = edges[:-1, None]
    hi = edges[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / ratio


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    j0 = np.floor(pos).astype(int)
    j1 = np.minimum(j0 + 1, n_in - 1)
    frac = pos - j0
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), j0] += 1.0 - frac
    w[np.arange(n_out), j1] += frac
    return w


def _resample_weights(n_in, n_out):
    if n_in == n_out:
        return None
    return _area_weights(n_in, n_out) if n_out < n_in else _bilinear_weights(n_in, n_out)


def resize(img, width: int, height: int) -> np.ndarray:
    """Area-average downsampling / bilinear upsampling, separately per axis."""
    img = as_contour(img)
    wy = _resample_weights(img.shape[0], height)
    wx = _resample_weights(img.shape[1], width)
    out = img if wy is None else wy @ img
    out = out if wx is None else out @ wx.T
    return np.clip(out, 0.0, 1.0)


def resample(img, out_size: int) -> np.ndarray:
    if out_size < 8:
        raise ValueError(f"out_size must be at least 8, got {out_size}")
    img = as_contour(img)
    if img.shape == (out_size, out_size):
        return img.copy()
    return resize(img, out_size, out_size)


def aggregate(contours, thetas) -> np.ndarray:
    """Cosine-weighted mean of same-sized contours."""
    contours = [as_contour(c) for c in contours]
    if not contours:
        raise EmptyInput("aggregate needs at least one contour")
    if len(thetas) != len(contours):
        raise ValueError("one camera-angle difference per contour is required")
    shape = contours[0].shape
    for i, c in enumerate(contours):
        if c.shape != shape:
            raise MismatchedSizes(f"contour {i} has shape {c.shape}, expected {shape}")
    weights = np.cos(np.asarray(thetas, dtype=float))
    if np.any(weights <= 0):
        raise ValueError("every camera-angle difference must have a positive cosine")
    total = np.zeros(shape)
    for w, c in zip(weights, contours):
        total += w * c
    return np.clip(total / weights.sum(), 0.0, 1.0)


def preprocess(c1, c2, spec: PreprocessSpec) -> np.ndarray:
    """Rotate, scale and resample both drone contours, then aggregate them."""
    warped = []
    for img, roll, factor in ((c1, spec.roll1, spec.scale1), (c2, spec.roll2, spec.scale2)):
        warped.append(resample(scale_contour(rotate_contour(img, roll), factor), spec.out_size))
    return aggregate(warped, [spec.theta1, spec.theta2])


def binarize(img, threshold: float = THRESHOLD) -> np.ndarray:
    return as_contour(img) >= threshold


def error_ratio(output, truth, threshold: float = THRESHOLD) -> float:
    """Mismatched pixels over ground-truth foreground pixels (can exceed 1)."""
    output, truth = as_contour(output), as_contour(truth)
    if output.shape != truth.shape:
        raise MismatchedSizes(f"output {output.shape} vs truth {truth.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    t = binarize(truth, threshold)
    area = int(t.sum())
    if area == 0:
        raise EmptyTruth("ground truth has no foreground pixels")
    return int(np.count_nonzero(binarize(output, threshold) != t)) / area


def postprocess(img, target_size: int) -> np.ndarray:
    """3x3 median, bilinear upscale to ``target_size``, then 3x3 box blur."""
    img = as_contour(img)
    out = ndimage.median_filter(img, size=3, mode="nearest")
    out = resize(out, target_size, target_size)
    out = ndimage.uniform_filter(out, size=3, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def centroid(img) -> tuple[float, float]:
    """Intensity-weighted ``(x, y)`` centroid in pixel-center coordinates."""
    img = as_contour(img)
    total = img.sum()
    if total <= 0:
        raise EmptyTruth("image has no mass")
    ys, xs = np.indices(img.shape)
    return (float((xs * img).sum() / total) + 0.5, float((ys * img).sum() / total) + 0.5)


def write_pgm(path, img) -> None:
    """Binary 8-bit PGM (P5), value ``round(255 * p)``."""
    img = as_contour(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + data.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptFile(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise CorruptFile(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptFile(f"{path}: bad PGM header") from None
    if maxval != 255 or w < 1 or h < 1:
        raise CorruptFile(f"{path}: only 8-bit PGM with maxval 255 is supported")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise CorruptFile(f"{path}: expected {w * h} bytes of pixel data, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0
