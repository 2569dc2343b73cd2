"""Evaluation harness: reports, metrics and the end-to-end pipeline.

Reports keep deterministic content (per-sample metrics, aggregates,
histograms) apart from wall-clock latencies, so re-running a command with
the same configuration reproduces ``report.json`` byte for byte while the
timings land in ``latency.json``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import contour, neuralnet, synth
from .camera import angle_between
from .errors import Ard2Error, IoFailure, ShapeMismatch, Unsatisfiable
from .geometry import estimate_target, project_to_ar

HISTOGRAM_BINS = 20


# ---------------------------------------------------------------------------
# Atomic output
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def pgm_bytes(img) -> bytes:
    img = contour.as_contour(img)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii") + data.tobytes()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def summarize(values) -> dict:
    """Count, mean, median, 90th percentile and max of the finite values."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"count": 0, "mean": None, "median": None, "p90": None, "max": None}
    return {
        "count": int(v.size),
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "p90": float(np.percentile(v, 90)),
        "max": float(v.max()),
    }


def histogram(values, bins: int = HISTOGRAM_BINS) -> dict:
    """Equal-width bins from 0 (or the minimum, if negative) to the maximum."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"edges": [], "counts": []}
    lo = min(0.0, float(v.min()))
    hi = float(v.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


@dataclass
class EvalReport:
    """Per-sample records plus derived aggregates and histograms.

    Each record is a dict with ``scene_id``, ``status`` (``"ok"`` or an
    error kind) and metric values; ``latency_us`` holds per-stage wall-clock
    timings keyed the same way.
    """

    metrics: tuple[str, ...]
    records: list[dict] = field(default_factory=list)
    latency_us: list[dict] = field(default_factory=list)

    def add(self, record: dict, latency: dict | None = None) -> None:
        self.records.append(record)
        self.latency_us.append({"scene_id": record["scene_id"], **(latency or {})})

    @property
    def failures(self) -> dict:
        kinds: dict[str, int] = {}
        for r in self.records:
            if r["status"] != "ok":
                kinds[r["status"]] = kinds.get(r["status"], 0) + 1
        return {"count": sum(kinds.values()), "kinds": dict(sorted(kinds.items()))}

    def values(self, metric: str) -> list[float]:
        return [r[metric] for r in self.records if r["status"] == "ok" and r.get(metric) is not None]

    def aggregates(self) -> dict:
        return {m: summarize(self.values(m)) for m in self.metrics}

    def histograms(self) -> dict:
        return {m: histogram(self.values(m)) for m in self.metrics}

    def latency_aggregates(self) -> dict:
        stages = sorted({k for r in self.latency_us for k in r if k != "scene_id"})
        return {s: summarize([r[s] for r in self.latency_us if s in r]) for s in stages}

    def to_dict(self) -> dict:
        return {
            "samples": len(self.records),
            "failures": self.failures,
            "aggregates": self.aggregates(),
            "histograms": self.histograms(),
            "records": self.records,
        }

    def latency_dict(self) -> dict:
        return {"aggregates": self.latency_aggregates(), "records": self.latency_us}

    def summary(self) -> str:
        """Plain-text table of the deterministic aggregates."""
        lines = [f"samples {len(self.records)}, failures {self.failures['count']}",
                 f"{'metric':<22}{'count':>7}{'mean':>13}{'median':>13}{'p90':>13}{'max':>13}"]
        for name, agg in self.aggregates().items():
            cells = "".join(f"{agg[k]:>13.6g}" if agg[k] is not None else f"{'-':>13}"
                            for k in ("mean", "median", "p90", "max"))
            lines.append(f"{name:<22}{agg['count']:>7}{cells}")
        return "\n".join(lines) + "\n"

    def latency_summary(self) -> str:
        lines = []
        for stage, agg in self.latency_aggregates().items():
            if agg["count"]:
                lines.append(f"latency {stage}: mean {agg['mean'] / 1000:.3f} ms, p90 {agg['p90'] / 1000:.3f} ms")
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        write_json(out_dir / "report.json", self.to_dict())
        write_json(out_dir / "latency.json", self.latency_dict())
        atomic_write_text(out_dir / "summary.txt", self.summary())


def _timer():
    return time.perf_counter_ns()


def _us(t0, t1):
    return (t1 - t0) / 1000.0


def _error_kind(exc: BaseException) -> str:
    return type(exc).__name__


# ---------------------------------------------------------------------------
# Direction estimation over a frames file
# ---------------------------------------------------------------------------


def estimate_frames(frames, cameras, truth=None):
    """Run the geometry stage on every frame.

    Returns ``(estimates, report)``: one JSON-ready record per frame (failed
    frames carry their error kind) and an :class:`EvalReport` with the
    angular error against ``truth`` scenes when given.
    """
    if truth is not None and len(truth) != len(frames):
        raise ShapeMismatch(f"{len(frames)} frames but {len(truth)} ground-truth scenes")
    ar = cameras[0]
    estimates = []
    report = EvalReport(("angular_error_deg", "gap"))
    for i, frame in enumerate(frames):
        sid = f"f{i:05d}"
        t0 = _timer()
        try:
            sol = estimate_target(frame, *cameras)
            dot = project_to_ar(sol, ar)
        except Ard2Error as exc:
            t1 = _timer()
            estimates.append({"frame": i, "status": _error_kind(exc), "message": str(exc)})
            report.add({"scene_id": sid, "status": _error_kind(exc)}, {"direction": _us(t0, t1)})
            continue
        t1 = _timer()
        rec = {
            "frame": i,
            "status": "ok",
            "target_pos": [float(c) for c in sol.target_pos],
            "target_bearing": [float(c) for c in sol.target_bearing],
            "d0_over_d1": sol.d0_over_d1,
            "d0_over_d2": sol.d0_over_d2,
            "gap": sol.gap,
            "theta1": sol.theta1,
            "theta2": sol.theta2,
            "ar_dot": [float(dot[0]), float(dot[1])],
        }
        row = {"scene_id": sid, "status": "ok", "gap": sol.gap}
        if truth is not None:
            err = math.degrees(angle_between(sol.target_bearing, truth[i].true_bearing()))
            rec["angular_error_deg"] = err
            row["angular_error_deg"] = err
        estimates.append(rec)
        report.add(row, {"direction": _us(t0, t1)})
    return estimates, report


# ---------------------------------------------------------------------------
# Contour evaluation over a dataset
# ---------------------------------------------------------------------------


def triptych(inp, pred, truth, gap: int = 2) -> np.ndarray:
    """Input, prediction and truth side by side with a thin white separator."""
    h = inp.shape[0]
    sep = np.ones((h, gap))
    return np.hstack((inp, sep, pred, sep, truth))


def evaluate_dataset(params, samples, side_by_side: int = 0):
    """Error ratio of the network on each sample; optional triptych images."""
    n = params.input_size
    report = EvalReport(("error_ratio", "bce"))
    images = []
    for s in samples:
        sid = s.metadata.get("scene_id", "?")
        if s.input.shape != (n, n) or s.target.shape != (n, n):
            raise ShapeMismatch(f"sample {sid}: images are {s.input.shape} / {s.target.shape}, expected {n}x{n}")
        t0 = _timer()
        pred = neuralnet.forward(params, s.input)
        t1 = _timer()
        try:
            ratio = contour.error_ratio(pred, s.target)
            row = {"scene_id": sid, "status": "ok", "error_ratio": ratio, "bce": neuralnet.loss_bce(pred, s.target)}
        except Ard2Error as exc:
            row = {"scene_id": sid, "status": _error_kind(exc)}
        report.add(row, {"contour": _us(t0, t1)})
        if len(images) < side_by_side:
            images.append((sid, triptych(s.input, pred, s.target)))
    return report, images


# ---------------------------------------------------------------------------
# End to end
# ---------------------------------------------------------------------------


def ar_crop_half_width(sol, drone_half_widths) -> float:
    """AR-view crop half-width (normalized) implied by the drones' crops.

    A drone crop of half-width ``s_i`` corresponds to an AR crop of
    ``s_i / (d0 / d_i)**2``; the two drones' values are averaged.
    """
    s1, s2 = drone_half_widths
    return 0.5 * (s1 / sol.d0_over_d1**2 + s2 / sol.d0_over_d2**2)


def place_overlay(img, dot, half_width_px: float, width: int, height: int) -> np.ndarray:
    """Paste a square contour, spanning ``2 * half_width_px`` pixels, centered on ``dot``."""
    img = contour.as_contour(img)
    size = img.shape[0]
    canvas = np.zeros((height, width))
    u, v = dot
    x0 = max(int(math.floor(u - half_width_px)) - 1, 0)
    x1 = min(int(math.ceil(u + half_width_px)) + 1, width)
    y0 = max(int(math.floor(v - half_width_px)) - 1, 0)
    y1 = min(int(math.ceil(v + half_width_px)) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return canvas
    k = size / (2.0 * half_width_px)
    # canvas pixel centers mapped into the contour's pixel grid; the map is
    # axis-aligned, so bilinear sampling separates into two weight matrices
    cols = (np.arange(x0, x1) + 0.5 - u) * k + size / 2.0 - 0.5
    rows = (np.arange(y0, y1) + 0.5 - v) * k + size / 2.0 - 0.5
    patch = _sampling_weights(rows, img.shape[0]) @ img @ _sampling_weights(cols, img.shape[1]).T
    canvas[y0:y1, x0:x1] = np.clip(patch, 0.0, 1.0)
    return canvas


def _sampling_weights(pos, n: int) -> np.ndarray:
    """Bilinear weights reading a length-``n`` signal at ``pos``; zero outside."""
    j0 = np.floor(pos).astype(int)
    frac = pos - j0
    w = np.zeros((len(pos), n))
    for j, wt in ((j0, 1.0 - frac), (j0 + 1, frac)):
        ok = (j >= 0) & (j < n)
        w[np.nonzero(ok)[0], j[ok]] += wt[ok]
    return w


@dataclass
class E2EResult:
    report: EvalReport
    overlays: list = field(default_factory=list)


def e2e_scene(params, mesh, ranges, cameras, rng_seed):
    """Synthesize one scene and run both stages; returns (row fields, latency, overlay)."""
    ss = np.random.SeedSequence(rng_seed)
    scene_seed, noise_seed = ss.spawn(2)
    scene = synth.random_scene(ranges, scene_seed, cameras)
    frame = synth.synthesize_frame(scene, *cameras, sigma=ranges.pixel_noise_sigma, seed=noise_seed)
    ar = cameras[0]
    s0, s1, s2 = synth.crop_half_widths(scene, ranges)
    c1, c2, truth_crop = synth.render_views(scene, mesh, ranges)
    pose = (synth.yaw_rotation(scene.target_yaw), scene.pos_target)
    truth_full = synth.render_silhouette(mesh, pose, (scene.rot_ar, scene.pos_ar, ar))

    t0 = _timer()
    sol = estimate_target(frame, *cameras)
    dot = project_to_ar(sol, ar)
    t1 = _timer()
    spec = synth.preprocess_spec(sol)
    inp = contour.preprocess(c1, c2, spec)
    # single-precision inference: no thresholded pixel changes, about twice as fast
    pred = neuralnet.forward(params, inp, np.float32)
    half_px = ar.fx * ar_crop_half_width(sol, (s1, s2))
    post = contour.postprocess(pred, max(8, int(round(2.0 * half_px))))
    overlay = place_overlay(post, dot, half_px, ar.width, ar.height)
    t2 = _timer()

    row = {
        "angular_error_deg": math.degrees(angle_between(sol.target_bearing, scene.true_bearing())),
        "error_ratio": contour.error_ratio(pred, contour.resample(truth_crop, params.input_size)),
    }
    try:
        # centroids of the drawn (thresholded) shapes, so a faint blob cannot score
        cx, cy = contour.centroid(overlay >= contour.THRESHOLD)
        tx, ty = contour.centroid(truth_full >= contour.THRESHOLD)
        row["centroid_error_px"] = math.hypot(cx - tx, cy - ty)
    except Ard2Error:
        row["centroid_error_px"] = None
    return row, {"direction": _us(t0, t1), "contour": _us(t1, t2)}, overlay


def run_e2e(params, mesh, ranges, cameras, n: int, seed, overlays: int = 0) -> E2EResult:
    """Full pipeline on ``n`` seeded scenes; scene ``i`` depends only on ``(seed, i)``."""
    report = EvalReport(("angular_error_deg", "error_ratio", "centroid_error_px"))
    out = E2EResult(report)
    for i in range(n):
        sid = f"e{i:05d}"
        for attempt in range(synth.MAX_SCENE_ATTEMPTS):
            try:
                row, latency, overlay = e2e_scene(params, mesh, ranges, cameras, (int(seed), i, attempt))
            except Ard2Error as exc:
                last = exc
                continue
            report.add({"scene_id": sid, "status": "ok", "attempts": attempt + 1, **row}, latency)
            if len(out.overlays) < overlays:
                out.overlays.append((sid, overlay))
            break
        else:
            report.add({"scene_id": sid, "status": _error_kind(Unsatisfiable(str(last)))})
    return out
