"""Command-line entry point: generate, train, eval, infer, simulate, ablate.

Every config field is a flag: ``--section.key`` always, and ``--key`` when
the field name is unique across sections. Exit codes: 0 success, 1 runtime
error, 2 usage error, 3 simulation did not converge. Outputs default to
``$DUALPARK_OUT/<command>`` (``DUALPARK_OUT`` defaults to ``runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CameraRig, RigError
from .config import ExperimentConfig, leaves, parse_value, with_overrides
from .control import EgoPose, VehicleState, simulate_parking
from .dataset import DataError, generate_dataset, load_dataset, reorganize, split_records, write_dataset
from .maps import write_pgm
from .metrics import mean_report
from .training import (ABLATION_COLUMNS, evaluate_model, initial_samples, load_model, run_ablation_matrix, train,
                       write_results_csv)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3
OUT_ENV = "DUALPARK_OUT"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    output_dir: str
    version: str
    created: float

    def write(self, directory: Path, extra: dict | None = None) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(json.dumps({**asdict(self), **(extra or {})}, indent=2) + "\n")
        return path


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- argument plumbing -------------------------------------------------------------

_LEAVES = leaves(ExperimentConfig)
_NAME_COUNT = Counter(path.rsplit(".", 1)[-1] for path, _ in _LEAVES)


def _add_config_flags(p: argparse.ArgumentParser, reserved: set[str]) -> None:
    p.add_argument("--config", help="experiment config JSON")
    for path, _ in _LEAVES:
        name = path.rsplit(".", 1)[-1]
        flags = [f"--{path}"]
        if _NAME_COUNT[name] == 1 and name not in reserved:
            flags.append(f"--{name}")
        p.add_argument(*flags, dest=f"cfg:{path}", metavar="VALUE", default=None, help=argparse.SUPPRESS)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    hints = dict(_LEAVES)
    overrides = {}
    for key, value in vars(args).items():
        if key.startswith("cfg:") and value is not None:
            path = key[4:]
            try:
                overrides[path] = parse_value(value, hints[path])
            except ValueError as exc:
                raise UsageError(f"--{path}: {exc}") from exc
    try:
        return with_overrides(cfg, overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def _manifest(args, command: str, out: Path, seed: int, extra: dict | None = None) -> RunManifest:
    m = RunManifest(command, args.config, seed, str(out), version_string(), time.time())
    m.write(out, extra)
    return m


def _records(path, cfg: ExperimentConfig):
    if not path:
        raise UsageError("a dataset directory is required (--data)")
    if not Path(path).is_dir():
        raise DataError(f"dataset directory {path} does not exist")
    records, manifest = load_dataset(path)
    if not records:
        raise DataError(f"dataset {path} has no trajectories")
    return records, manifest


def _model_cfg_for(cfg: ExperimentConfig, manifest: dict):
    """Model config matching the dataset's input mode and grid."""
    m = replace(cfg.model, encoder=replace(cfg.model.encoder, mode=manifest["mode"]))
    grid = manifest.get("grid")
    if grid:
        if grid["height"] != grid["width"] or grid["range_x"] != grid["range_y"]:
            raise DataError("only square BEV grids are supported")
        m = replace(m, grid_cells=int(grid["height"]), half_range=float(grid["range_x"]))
    return m


def _rig_for(data_dir) -> CameraRig | None:
    p = Path(data_dir) / "rig.json" if data_dir else None
    return CameraRig.load(p) if p and p.exists() else None


# -- commands ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    data = cfg.data
    if args.count is not None:
        data = replace(data, count=args.count)
    if args.seed is not None:
        data = replace(data, seed=args.seed)
    if args.mode is not None:
        data = replace(data, mode=args.mode)
    if data.count < 1:
        raise UsageError("--count must be at least 1")
    out = _out_dir(args, "generate")
    run = _manifest(args, "generate", out, data.seed)
    rig = CameraRig.surround(cfg.model.encoder.image_size) if data.mode == "cameras" else None
    records = generate_dataset(data.count, data.seed, data.mode, cfg.model.grid, rig, cfg.synth)
    write_dataset(records, out, data.mode, cfg.model.grid, rig,
                  extra={**asdict(run), "seed": data.seed, "synth": asdict(cfg.synth)})
    n_points = sum(len(r.waypoints) for r in records)
    print(f"wrote {len(records)} trajectories ({n_points} samples, mode {data.mode}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    records, manifest = _records(args.data, cfg)
    model_cfg = _model_cfg_for(cfg, manifest)
    out = _out_dir(args, "train")
    _manifest(args, "train", out, cfg.train.seed, {"dataset": str(args.data), "config": cfg.to_dict()})
    train_rec, val_rec = split_records(records, cfg.train.val_fraction, cfg.train.seed)
    grid, q = model_cfg.grid, model_cfg.horizon
    train_s = reorganize(train_rec, q, grid, cfg.train.gt_sigma)
    val_s = reorganize(val_rec, q, grid, cfg.train.gt_sigma)
    res = train(train_s, model_cfg, cfg.train, val_s, out, resume=args.resume, rig=_rig_for(args.data),
                log=print if not args.quiet else None)
    last = res.history[-1][1] if res.history else None
    print(f"trained to step {res.step} ({res.stopped}); final total {last.total if last else float('nan'):.4f}; "
          f"best {res.best:.4f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    records, _ = _records(args.data, cfg)
    model, meta = load_model(args.checkpoint, _rig_for(args.data))
    train_cfg = meta.get("train", {})
    tr, va = split_records(records, train_cfg.get("val_fraction", 0.1), train_cfg.get("seed", 0))
    chosen = {"val": va, "train": tr, "all": list(records)}[args.split]
    samples = reorganize(chosen, model.cfg.horizon, model.cfg.grid, train_cfg.get("gt_sigma", 2.0))
    if not args.all_steps:
        samples = initial_samples(samples)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    out = _out_dir(args, "eval")
    _manifest(args, "eval", out, train_cfg.get("seed", 0), {"checkpoint": str(args.checkpoint)})
    rep = mean_report(evaluate_model(model, samples, cfg.train.batch_size))
    row = {"variant": args.variant, "hausdorff_m": rep.hausdorff, "l2_m": rep.l2, "fourier_diff": rep.fourier_diff}
    write_results_csv(out / "metrics.csv", [row])
    print(",".join(ABLATION_COLUMNS))
    print(f"{args.variant},{rep.hausdorff:.6f},{rep.l2:.6f},{rep.fourier_diff:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    model, meta = load_model(args.checkpoint, _rig_for(args.data))
    grid = model.cfg.grid
    records, _ = _records(args.data, cfg)
    by_id = {r.traj_id: r for r in records}
    tid = args.trajectory or records[0].traj_id
    if tid not in by_id:
        raise UsageError(f"unknown trajectory {tid!r}")
    rec = by_id[tid]
    if not 0 <= args.index < len(rec.waypoints):
        raise UsageError(f"--index {args.index} outside 0..{len(rec.waypoints) - 1}")
    sample = reorganize([rec], model.cfg.horizon, grid, meta.get("train", {}).get("gt_sigma", 2.0))[args.index]
    slot = np.array(args.slot, dtype=np.float64) if args.slot is not None else sample.slot
    if not grid.contains(*slot):
        raise UsageError(f"slot ({slot[0]:.3f}, {slot[1]:.3f}) lies outside the BEV range "
                         f"+-{grid.range_x} x +-{grid.range_y} m")
    out = _out_dir(args, "infer")
    _manifest(args, "infer", out, model.cfg.seed, {"checkpoint": str(args.checkpoint), "trajectory": tid,
                                                   "index": args.index, "slot": slot.tolist()})
    gen = model.generate(sample.sensor[None], slot[None], keep_maps=args.dump_maps)[0]
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y"])
        for k, (x, y) in enumerate(gen.points, start=1):
            w.writerow([k, repr(float(x)), repr(float(y))])
    if args.dump_maps:
        if gen.maps is None:
            raise UsageError("--dump-maps needs a model with the refinement head")
        maps_dir = out / "maps"
        maps_dir.mkdir(exist_ok=True)
        for k, m in enumerate(gen.maps, start=1):
            write_pgm(maps_dir / f"step_{k:02d}.pgm", m)
    if args.trace:
        with open(out / "trace.jsonl", "w") as fh:
            for rec_line in gen.trace:
                fh.write(json.dumps(rec_line) + "\n")
    print(f"predicted {len(gen.points)} points -> {out / 'trajectory.csv'}")
    return EXIT_OK


def read_trajectory(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"x", "y"} <= set(rows[0]):
        raise DataError(f"{path}: needs x and y columns")
    return np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    path = read_trajectory(args.trajectory)
    out = _out_dir(args, "simulate")
    _manifest(args, "simulate", out, 0, {"trajectory": str(args.trajectory), "control": cfg.control.to_dict()})
    start = VehicleState(EgoPose(args.start[0], args.start[1], args.start[2]))
    res = simulate_parking(path, start, cfg.control)
    res.write_csv(out / "trace.csv")
    report = res.report()
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "ablate")
    _manifest(args, "ablate", out, cfg.train.seed, {"config": cfg.to_dict(), "variants": args.variants})
    model_cfg = cfg.model
    if args.data:
        records, manifest = _records(args.data, cfg)
        model_cfg = _model_cfg_for(cfg, manifest)
        train_rec, test_rec = split_records(records, cfg.train.val_fraction, cfg.train.seed)
    else:
        if cfg.data.test_count < 1:
            raise UsageError("without --data, set --data.test_count to the number of held-out trajectories")
        rig = CameraRig.surround(cfg.model.encoder.image_size) if cfg.data.mode == "cameras" else None
        records = generate_dataset(cfg.data.count + cfg.data.test_count, cfg.data.seed, cfg.data.mode,
                                   cfg.model.grid, rig, cfg.synth)
        model_cfg = replace(cfg.model, encoder=replace(cfg.model.encoder, mode=cfg.data.mode))
        train_rec, test_rec = records[: cfg.data.count], records[cfg.data.count :]
    q, grid, sigma = model_cfg.horizon, model_cfg.grid, cfg.train.gt_sigma
    train_s = reorganize(train_rec, q, grid, sigma)
    test_s = initial_samples(reorganize(test_rec, q, grid, sigma))
    if not test_s:
        raise DataError("held-out split is empty")
    rows = run_ablation_matrix(train_s, test_s, model_cfg, cfg.train, args.variants, out / "ablation.csv",
                               log=None if args.quiet else print)
    for r in rows:
        print(f"{r['variant']},{r['hausdorff_m']:.6f},{r['l2_m']:.6f},{r['fourier_diff']:.6f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .model import VARIANTS

    parser = argparse.ArgumentParser(prog="dualpark", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_config_flags(p, {"count"})
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("direct-bev", "cameras"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _add_config_flags(p, set())
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out metrics of a checkpoint")
    _add_config_flags(p, set())
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--variant", default="model", help="row label in the CSV")
    p.add_argument("--all-steps", action="store_true", help="every waypoint, not only t0")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one trajectory")
    _add_config_flags(p, set())
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--trajectory", help="trajectory id (default: first)")
    p.add_argument("--index", type=int, default=0, help="waypoint index of the sensor frame")
    p.add_argument("--slot", nargs=2, type=float, metavar=("X", "Y"), help="slot in the ego frame, metres")
    p.add_argument("--dump-maps", action="store_true")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="track a trajectory CSV in closed loop")
    _add_config_flags(p, set())
    p.add_argument("--trajectory", required=True)
    p.add_argument("--start", nargs=3, type=float, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "HEADING"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ablate", help="train and evaluate every model variant")
    _add_config_flags(p, set())
    p.add_argument("--data", help="dataset directory (split by trajectory); generated when omitted")
    p.add_argument("--variants", nargs="+", choices=tuple(VARIANTS), default=list(VARIANTS))
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RigError, FileNotFoundError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
