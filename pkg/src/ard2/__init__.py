"""Through-obstacle target direction and contour reconstruction.

Two stages share one set of camera conventions (see :mod:`ard2.camera`):

* direction: :mod:`ard2.geometry` recovers the target bearing in the user's
  camera frame from mutual pixel bearings among the user and two drones, and
  :mod:`ard2.calibration` refines the three cameras' intrinsics from the
  triangle angle-sum constraint;
* contour: :mod:`ard2.contour` warps and merges the drones' silhouettes and
  :mod:`ard2.neuralnet` maps the result to the user's view.

:mod:`ard2.synth` generates scenes, frames and rendered training data, and
:mod:`ard2.cli` / :mod:`ard2.harness` drive experiments from JSON configs.
"""

from .errors import Ard2Error

__version__ = "0.1.0"

__all__ = ["Ard2Error", "__version__"]
