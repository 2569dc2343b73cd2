"""Walk through target direction estimation on one synthetic scene.

Run with ``python demos/direction_estimation.py``. Prints the scene, the
reconstructed triangle and the error of the estimated bearing with and
without pixel noise.
"""

from __future__ import annotations

import math

import numpy as np

from ard2 import synth
from ard2.camera import angle_between
from ard2.geometry import estimate_target, project_to_ar

cams = synth.default_cameras()
ar = cams[0]

# %% A seeded scene: user, two drones and a target behind an obstacle
scene = synth.random_scene(synth.SceneRanges(), 7, cams)
print("target distance from user (m):", round(float(np.linalg.norm(scene.pos_target - scene.pos_ar)), 2))
print("drone user target angles (deg):", np.round(synth.drone_user_target_angles(scene), 2))

# %% Noise-free observations close the loop
frame = synth.synthesize_frame(scene, *cams)
sol = estimate_target(frame, *cams)
print("d0/d1, d0/d2:", round(sol.d0_over_d1, 4), round(sol.d0_over_d2, 4))
print("error, no noise (deg):", math.degrees(angle_between(sol.target_bearing, scene.true_bearing())))

# %% One pixel of noise on every observation
errors = []
for k in range(200):
    noisy = synth.synthesize_frame(scene, *cams, sigma=1.0, seed=k)
    est = estimate_target(noisy, *cams)
    errors.append(math.degrees(angle_between(est.target_bearing, scene.true_bearing())))
print(f"error at 1 px (deg): mean {np.mean(errors):.3f}, p90 {np.percentile(errors, 90):.3f}")

# %% Where the target dot lands on the AR display
u, v = project_to_ar(sol, ar)
print(f"overlay dot at ({u:.1f}, {v:.1f}) on a {ar.width}x{ar.height} frame")
