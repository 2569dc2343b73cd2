"""From two drone silhouettes to a contour overlay on the AR frame.

Run with ``python demos/contour_pipeline.py [--epochs N]``. Generates a small
dataset, trains the network briefly and writes PGM images of each stage to
``demo_out/``. A few dozen epochs take a couple of minutes on one core.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from ard2 import contour, harness, neuralnet, synth

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=30)
parser.add_argument("--out", default="demo_out")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(exist_ok=True)

mesh = synth.human_mesh()
cams = synth.default_cameras()

# %% Training pairs: aggregated drone views in, the user's view of the target out
data = synth.generate_dataset(mesh, 64, synth.SceneRanges(), seed=3)
held = synth.generate_dataset(mesh, 8, synth.SceneRanges(), seed=4, prefix="h")
baseline = np.mean([contour.error_ratio(s.input, s.target) for s in held])
print(f"error ratio of the raw aggregate: {baseline:.3f}")
contour.write_pgm(out / "input.pgm", held[0].input)
contour.write_pgm(out / "target.pgm", held[0].target)

# %% A short training run
cfg = neuralnet.TrainConfig(learning_rate=0.1, batch_size=4, epochs=args.epochs, seed=0)
params, history = neuralnet.train(neuralnet.init_params(0), data, cfg)
preds = neuralnet.predict_batch(params, [s.input for s in held])
ratio = np.mean([contour.error_ratio(p, s.target) for p, s in zip(preds, held)])
print(f"loss {history[0]:.4f} -> {history[-1]:.4f}; held-out error ratio {ratio:.3f}")
contour.write_pgm(out / "prediction.pgm", preds[0])

# %% Both stages on a fresh scene, placed at the estimated target position
result = harness.run_e2e(params, mesh, synth.SceneRanges(), cams, 3, seed=9, overlays=1)
sid, overlay = result.overlays[0]
contour.write_pgm(out / f"overlay_{sid}.pgm", overlay)
agg = result.report.aggregates()["centroid_error_px"]
print(f"overlay centroid error: mean {agg['mean']:.2f} px over {agg['count']} scenes")
print("images written to", out.resolve())
