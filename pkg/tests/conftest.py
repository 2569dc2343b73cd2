from __future__ import annotations

import numpy as np
import pytest

from ard2 import neuralnet, synth
from ard2.camera import CameraIntrinsics


@pytest.fixture(scope="session")
def cameras():
    return synth.default_cameras()


@pytest.fixture(scope="session")
def simple_intr():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 640, 480)


@pytest.fixture(scope="session")
def scenes(cameras):
    ranges = synth.SceneRanges()
    return [synth.random_scene(ranges, (7, i), cameras) for i in range(40)]


@pytest.fixture(scope="session")
def frames(scenes, cameras):
    return [synth.synthesize_frame(s, *cameras) for s in scenes]


@pytest.fixture(scope="session")
def human():
    return synth.human_mesh()


def blob(n=60, radius=10.0, center=None, soft=1.0):
    """Smooth disc, values in [0, 1]."""
    c = (n - 1) / 2.0 if center is None else center
    ys, xs = np.indices((n, n))
    r = np.hypot(xs - c, ys - c)
    return np.clip(radius - r + 0.5 * soft, 0.0, soft) / soft


def fd_gradient_check(params, x, t, per_tensor=40, h=1e-4, seed=1):
    """Worst relative gap between backprop and central differences.

    Up to ``per_tensor`` entries of every weight and bias tensor are probed.
    Probes whose +-h perturbation flips any rectifier are skipped, since a
    difference quotient across a kink does not estimate the derivative.
    Returns ``(worst, checked, skipped)``.
    """
    rng = np.random.default_rng(seed)
    grads = neuralnet.backward(params, x, t)

    def pattern(p):
        _, acts = neuralnet._forward(p, neuralnet._check_batch(p, x))
        return [a > 0.0 for a in acts[:-1]]

    def loss(p):
        return neuralnet.loss_bce(neuralnet.forward(p, x), t)

    base = pattern(params)
    worst, checked, skipped = 0.0, 0, 0
    for k in range(len(params.weights)):
        for kind in ("weights", "biases"):
            tensor = getattr(params, kind)[k]
            idx = list(np.ndindex(tensor.shape))
            for pick in rng.choice(len(idx), size=min(len(idx), per_tensor), replace=False):
                i = idx[pick]
                plus, minus = params.copy(), params.copy()
                getattr(plus, kind)[k][i] += h
                getattr(minus, kind)[k][i] -= h
                if any(not np.array_equal(a, b) for q in (plus, minus) for a, b in zip(pattern(q), base)):
                    skipped += 1
                    continue
                fd = (loss(plus) - loss(minus)) / (2 * h)
                g = getattr(grads, kind)[k][i]
                worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
                checked += 1
    return worst, checked, skipped


# (criterion number, line) pairs filled in by the acceptance suite
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
