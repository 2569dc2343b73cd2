"""Command-line front end.

Usage::

    ard2 VERB --config run.json [--seed N] [--out DIR] [--threads N]

Verbs: ``simulate``, ``estimate``, ``calibrate``, ``gen-data``, ``train``,
``eval``, ``e2e``. Each reads one JSON config whose accepted keys depend on
the verb; unknown keys are rejected. Relative paths in a config are
resolved against the config file's directory. ``--seed`` and ``--out``
override the config's ``seed`` and ``out``. Exit status is 0 on success
(per-sample failures are counted in the report) and 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calibration, harness, neuralnet, synth
from .camera import read_intrinsics
from .errors import Ard2Error, ConfigError, IoFailure, SingularNormalEquations
from .geometry import load_frames

COMMON_KEYS = {"out", "threads"}
COMMAND_KEYS = {
    "simulate": {"seed", "n", "ranges", "intrinsics"},
    "estimate": {"frames", "intrinsics", "truth"},
    "calibrate": {"frames", "intrinsics", "free_parameters", "options"},
    "gen-data": {"seed", "n", "ranges", "intrinsics", "mesh", "perturb", "prefix"},
    "train": {"seed", "dataset", "train", "init", "fine_tune"},
    "eval": {"dataset", "weights", "side_by_side"},
    "e2e": {"seed", "n", "ranges", "intrinsics", "mesh", "perturb", "weights", "overlays"},
}
REQUIRED_KEYS = {
    "simulate": {"seed", "n"},
    "estimate": {"frames"},
    "calibrate": {"frames"},
    "gen-data": {"seed", "n"},
    "train": {"seed", "dataset"},
    "eval": {"dataset", "weights"},
    "e2e": {"seed", "n", "weights"},
}


class RunConfig:
    """Validated config for one verb; paths are resolved at construction."""

    def __init__(self, command: str, values: dict, base: Path):
        if command not in COMMAND_KEYS:
            raise ConfigError(f"unknown command {command!r}")
        allowed = COMMAND_KEYS[command] | COMMON_KEYS
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"{command}: unknown config field(s) {', '.join(unknown)}; "
                              f"accepted: {', '.join(sorted(allowed))}")
        missing = sorted(REQUIRED_KEYS[command] - set(values))
        if missing:
            raise ConfigError(f"{command}: missing required field(s) {', '.join(missing)}")
        self.command = command
        self.values = values
        self.base = base
        if "seed" in values:
            self.integer("seed", minimum=0)
        if "n" in values:
            self.integer("n", minimum=1)
        if "out" not in values:
            raise ConfigError(f"{command}: no output directory (set 'out' or pass --out)")

    def get(self, key, default=None):
        return self.values.get(key, default)

    def integer(self, key, default=None, minimum=None) -> int:
        value = self.values.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field '{key}': expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise ConfigError(f"field '{key}': must be at least {minimum}, got {value}")
        return value

    def path(self, key, value=None, must_exist=True) -> Path:
        value = self.values.get(key) if value is None else value
        if not isinstance(value, str):
            raise ConfigError(f"field '{key}': expected a path string, got {value!r}")
        p = Path(value)
        if not p.is_absolute():
            p = self.base / p
        if must_exist and not p.exists():
            raise IoFailure(f"field '{key}': {p} does not exist")
        return p

    @property
    def out(self) -> Path:
        return self.path("out", must_exist=False)

    @property
    def threads(self) -> int:
        return self.integer("threads", 1, minimum=1)

    def ranges(self) -> synth.SceneRanges:
        record = self.values.get("ranges", {})
        if not isinstance(record, dict):
            raise ConfigError("field 'ranges': expected an object")
        try:
            return synth.SceneRanges.from_dict(record)
        except ConfigError as exc:
            raise ConfigError(f"field 'ranges': {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'ranges': {exc}") from None

    def cameras(self):
        record = self.values.get("intrinsics")
        if record is None:
            return synth.default_cameras()
        if not isinstance(record, dict) or set(record) != {"ar", "d1", "d2"}:
            raise ConfigError("field 'intrinsics': expected an object with keys ar, d1, d2")
        return tuple(read_intrinsics(self.path(f"intrinsics.{k}", record[k])) for k in ("ar", "d1", "d2"))

    def mesh(self) -> synth.TriangleMesh:
        spec = self.values.get("mesh", "human")
        if spec == "human":
            mesh = synth.human_mesh()
        elif spec == "box":
            mesh = synth.box_mesh()
        else:
            mesh = synth.load_obj(self.path("mesh"))
        perturb = self.values.get("perturb")
        if perturb is not None:
            if not isinstance(perturb, dict) or set(perturb) != {"seed", "magnitude"}:
                raise ConfigError("field 'perturb': expected an object with keys seed, magnitude")
            mesh = synth.perturb_mesh(mesh, perturb["seed"], float(perturb["magnitude"]))
        return mesh


def load_config(command: str, path, overrides: dict) -> RunConfig:
    """Parse a JSON config file (or start empty) and apply command-line overrides."""
    values: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        base = path.resolve().parent
    for key, value in overrides.items():
        if value is not None:
            values[key] = str(Path(value).resolve()) if key == "out" else value
    return RunConfig(command, values, base)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _write_cameras(out: Path, cameras) -> None:
    for name, intr in zip(("ar", "d1", "d2"), cameras):
        harness.atomic_write_text(out / f"{name}.intrinsics", intr.to_record())


def cmd_simulate(cfg: RunConfig) -> int:
    ranges, cameras = cfg.ranges(), cfg.cameras()
    seed, n = cfg.integer("seed"), cfg.integer("n", minimum=1)
    frames, scenes = [], []
    for i in range(n):
        scene_seed, noise_seed = np.random.SeedSequence((seed, i)).spawn(2)
        scene = synth.random_scene(ranges, scene_seed, cameras)
        frames.append(synth.synthesize_frame(scene, *cameras, sigma=ranges.pixel_noise_sigma,
                                             seed=noise_seed, timestamp=float(i)))
        scenes.append(scene)
    out = cfg.out
    harness.atomic_write_text(out / "frames.jsonl", "".join(json.dumps(f.to_dict()) + "\n" for f in frames))
    harness.atomic_write_text(out / "truth.jsonl", "".join(json.dumps(s.to_dict()) + "\n" for s in scenes))
    _write_cameras(out, cameras)
    print(f"simulate: wrote {n} frames to {out}")
    return 0


def cmd_estimate(cfg: RunConfig) -> int:
    cameras = cfg.cameras()
    frames = load_frames(cfg.path("frames"))
    truth = synth.load_scenes(cfg.path("truth")) if cfg.get("truth") else None
    estimates, report = harness.estimate_frames(frames, cameras, truth)
    out = cfg.out
    harness.atomic_write_text(out / "estimates.jsonl", "".join(json.dumps(e) + "\n" for e in estimates))
    report.write(out)
    sys.stdout.write(report.summary() + report.latency_summary())
    return 0


def cmd_calibrate(cfg: RunConfig) -> int:
    cameras = cfg.cameras()
    frames = load_frames(cfg.path("frames"))
    options = cfg.get("options", {})
    try:
        opts = calibration.CalibrationOptions(**options)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'options': {exc}") from None
    problem = calibration.CalibrationProblem(frames, *cameras, cfg.get("free_parameters"), opts)
    out = cfg.out
    try:
        result = calibration.calibrate(problem)
    except SingularNormalEquations as exc:
        report = {"status": "SingularNormalEquations", "message": str(exc),
                  "guidance": "free fewer parameters (for example only fx per camera) "
                              "or supply more frames with varied geometry"}
        harness.write_json(out / "calibration.json", report)
        print(f"calibrate: {exc}", file=sys.stderr)
        return 1
    _write_cameras(out, result.refined)
    harness.write_json(out / "calibration.json", {"status": "ok", **result.report()})
    print(f"calibrate: loss {result.initial_loss:.6g} -> {result.final_loss:.6g} "
          f"in {result.iterations} iterations (converged: {result.converged})")
    return 0


def cmd_gen_data(cfg: RunConfig) -> int:
    ranges, cameras, mesh = cfg.ranges(), cfg.cameras(), cfg.mesh()
    prefix = cfg.get("prefix", "s")
    samples = synth.generate_dataset(mesh, cfg.integer("n", minimum=1), ranges, cameras,
                                     seed=cfg.integer("seed"), prefix=prefix, threads=cfg.threads)
    synth.save_dataset(cfg.out, samples)
    print(f"gen-data: wrote {len(samples)} samples to {cfg.out}")
    return 0


def _load_datasets(cfg: RunConfig, key: str):
    value = cfg.get(key)
    paths = value if isinstance(value, list) else [value]
    samples = []
    for p in paths:
        samples.extend(synth.load_dataset(cfg.path(key, p)))
    return samples


def cmd_train(cfg: RunConfig) -> int:
    samples = _load_datasets(cfg, "dataset")
    options = dict(cfg.get("train", {}))
    options["seed"] = cfg.integer("seed")
    try:
        config = neuralnet.TrainConfig(**options)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'train': {exc}") from None
    if cfg.get("init"):
        params = neuralnet.load_params(cfg.path("init"))
    else:
        params = neuralnet.init_params(config.seed)
    if cfg.get("fine_tune", False):
        config = config.fine_tune()
    trained, history = neuralnet.train(params, samples, config)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / ".weights.bin.tmp"
    neuralnet.save_params(trained, tmp)
    tmp.replace(out / "weights.bin")
    harness.write_json(out / "history.json", {"epoch_loss": history, "samples": len(samples),
                                              "learning_rate": config.learning_rate})
    print(f"train: {len(samples)} samples, {config.epochs} epochs, final loss {history[-1]:.5f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    params = neuralnet.load_params(cfg.path("weights"))
    samples = _load_datasets(cfg, "dataset")
    report, images = harness.evaluate_dataset(params, samples, cfg.integer("side_by_side", 0, minimum=0))
    out = cfg.out
    report.write(out)
    for sid, img in images:
        harness.atomic_write_bytes(out / "side_by_side" / f"{sid}.pgm", harness.pgm_bytes(img))
    sys.stdout.write(report.summary())
    return 0


def cmd_e2e(cfg: RunConfig) -> int:
    params = neuralnet.load_params(cfg.path("weights"))
    result = harness.run_e2e(params, cfg.mesh(), cfg.ranges(), cfg.cameras(), cfg.integer("n", minimum=1),
                             cfg.integer("seed"), cfg.integer("overlays", 0, minimum=0))
    out = cfg.out
    result.report.write(out)
    for sid, img in result.overlays:
        harness.atomic_write_bytes(out / "overlays" / f"{sid}.pgm", harness.pgm_bytes(img))
    sys.stdout.write(result.report.summary() + result.report.latency_summary())
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "calibrate": cmd_calibrate,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "e2e": cmd_e2e,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ard2", description="Through-obstacle target direction and contour pipeline.")
    parser.add_argument("command", choices=sorted(COMMANDS), help="verb to run")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--threads", type=int, help="worker threads for sample-parallel stages")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config,
                          {"seed": args.seed, "out": args.out, "threads": args.threads})
        return COMMANDS[args.command](cfg)
    except Ard2Error as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
