"""Command-line runner: ``votestep <command> [--config PATH] [--seed N] [--out DIR] [--deterministic]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensornet as tn
from .config import ConfigError, RunConfig, load_config
from .evalx import evaluate
from .geometry import GeometryError
from .head import DetectionFormatError, read_detections, write_detections
from .scenegen import PlacementError, SceneFormatError, SceneValidationError, read_scene, write_scene

log = logging.getLogger("votestep")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SWEEP_SAMPLERS = ("ga", "ld", "ald", "ddpm", "ddim")
SWEEP_STEPS = (1, 2, 5, 10, 20, 30)


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class Manifest:
    """Append-only run record written as ``manifest.json``."""

    def __init__(self, command: str, cfg: RunConfig, seed: int, argv):
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "git": _git_revision(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": seed,
            "config": cfg.dumps().splitlines(),
            "metrics": [],
            "timings": {},
            "notes": [],
        }
        self._t0 = time.perf_counter()

    def add_metrics(self, row: dict):
        self.data["metrics"].append({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in row.items()})

    def time(self, key: str, seconds: float):
        self.data["timings"][key] = round(seconds, 3)

    def note(self, text: str):
        self.data["notes"].append(text)

    def write(self, out_dir: Path):
        self.data["timings"]["wall_clock"] = round(time.perf_counter() - self._t0, 3)
        (out_dir / "manifest.json").write_text(json.dumps(self.data, indent=2, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _scene_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"{path}: no such scene file or directory")
    files = sorted(path.glob("*.scene"))
    if not files:
        raise DataError(f"{path}: contains no .scene files")
    return files


def _read_scenes(path: Path):
    files = _scene_files(path)
    out = []
    for f in files:
        try:
            out.append(read_scene(f))
        except (SceneFormatError, SceneValidationError, OSError) as exc:
            raise DataError(f"{f}: {exc}") from None
    return files, out


def _checkpoint_config(ckpt: Path, explicit: Path | None, seed, overrides) -> RunConfig:
    """The run config stored next to a checkpoint, unless one is given explicitly."""
    path = explicit
    if path is None and (ckpt.parent / "config.txt").exists():
        path = ckpt.parent / "config.txt"
    cfg = load_config(path, overrides)
    if seed is not None:
        cfg.train.seed = cfg.infer.seed = seed
    return cfg


def _load_model(ckpt: Path, cfg: RunConfig):
    from .pipeline import load_checkpoint
    if not ckpt.exists():
        raise DataError(f"{ckpt}: checkpoint not found")
    try:
        model, _ = load_checkpoint(ckpt, cfg)
    except (tn.CheckpointError, OSError) as exc:
        raise DataError(f"{ckpt}: cannot load checkpoint ({exc})") from None
    return model


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    from .pipeline import generation_config, split_seeds
    from .scenegen import generate_scene

    gen = generation_config(cfg)
    tr, va = split_seeds(cfg)
    index = []
    for split, seeds in (("train", tr), ("val", va)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for s in seeds:
            name = f"{split}/scene_{s:07d}.scene"
            write_scene(generate_scene(gen, s), out / name)
            index.append(f"{split} {s} {name}")
    (out / "splits.txt").write_text("\n".join(index) + "\n")
    manifest.add_metrics({"n_train": len(tr), "n_val": len(va)})
    print(f"wrote {len(tr)} train and {len(va)} val scenes to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    from .pipeline import train

    data = Path(args.data)
    _, train_scenes = _read_scenes(data / "train")
    val_scenes = _read_scenes(data / "val")[1] if (data / "val").is_dir() and any((data / "val").glob("*.scene")) else []
    (out / "config.txt").write_text(cfg.dumps())
    t0 = time.perf_counter()
    res = train(cfg, train_scenes, val_scenes, out, resume=args.resume, epochs=args.epochs,
                progress=manifest.add_metrics)
    manifest.time("train", time.perf_counter() - t0)
    for i, t in enumerate(res.timings):
        manifest.time(f"epoch_{i}", t)
    print(f"trained {len(res.metrics)} epochs; best val mAP@0.25 {res.best_map:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    from .diffusion import write_trajectory_csv
    from .pipeline import make_batch

    ckpt = Path(args.checkpoint)
    model = _load_model(ckpt, cfg)
    files, scenes = _read_scenes(Path(args.scenes))
    sampler = args.sampler or model.default_sampler()
    steps = args.steps or cfg.infer.steps
    det_dir = out / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    for i, (f, sc) in enumerate(zip(files, scenes)):
        rng = np.random.default_rng([cfg.infer.seed, i])
        batch = make_batch([sc], cfg.backbone.num_input, rng)
        res = model.infer(batch.points, sampler, steps, rng)
        write_detections(res.detections[0], det_dir / (f.stem + ".det"))
        if args.trajectory:
            write_trajectory_csv(out / f"{f.stem}_trajectory.csv", res.trajectory)
    manifest.add_metrics({"scenes": len(scenes), "sampler": sampler, "steps": steps})
    print(f"wrote detections for {len(scenes)} scenes to {det_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    files, scenes = _read_scenes(Path(args.scenes))
    det_dir = Path(args.detections)
    dets = []
    for f in files:
        p = det_dir / (f.stem + ".det")
        if not p.exists():
            raise DataError(f"no detection file {p} for scene {f}")
        try:
            dets.append(read_detections(p))
        except (DetectionFormatError, GeometryError, ValueError) as exc:
            raise DataError(f"{p}: {exc}") from None
    extra = sorted({p.stem for p in det_dir.glob("*.det")} - {f.stem for f in files})
    if extra:
        raise DataError(f"detections without a matching scene: {extra[:5]}")
    report = evaluate(dets, [(s.boxes, s.labels) for s in scenes], cfg.scene.num_classes,
                      cfg.eval.thresholds, cfg.eval.iou_mode)
    report.write(out)
    manifest.add_metrics({f"mAP@{t:g}": report.mAP(t) for t in cfg.eval.thresholds})
    print("\n".join(report.lines()))
    return EXIT_OK


def compare_samplers(model, scenes, seed: int, ddpm_model=None, samplers=SWEEP_SAMPLERS, steps_grid=SWEEP_STEPS,
                     progress=None, noise_seed: int | None = None) -> list[dict]:
    """One row per (sampler, steps): localisation error of the denoised samples and val mAP@0.25.

    ``seed`` fixes the starting corruption, ``noise_seed`` the Langevin and
    ancestral noise, so gradient ascent rows do not depend on ``noise_seed``.
    """
    from .pipeline import evaluate_model
    rows = []
    for sampler in samplers:
        m = ddpm_model if sampler in ("ddpm", "ddim") else model
        for steps in steps_grid:
            if m is None:
                row = {"sampler": sampler, "steps": steps, "loc_error": float("nan"), "mAP25": float("nan")}
            else:
                rep = evaluate_model(m, scenes, sampler, steps, seed=seed, noise_seed=noise_seed)
                row = {"sampler": sampler, "steps": steps, "loc_error": rep.center_error, "mAP25": rep.mAP(0.25)}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def write_sampler_csv(path, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sampler", "steps", "loc_error", "mAP25"])
        for r in rows:
            w.writerow([r["sampler"], r["steps"], f"{r['loc_error']:.6f}", f"{r['mAP25']:.6f}"])


def read_sampler_csv(path) -> list[dict]:
    with open(path, encoding="ascii") as fh:
        return [{"sampler": r["sampler"], "steps": int(r["steps"]), "loc_error": float(r["loc_error"]),
                 "mAP25": float(r["mAP25"])} for r in csv.DictReader(fh)]


def cmd_compare_samplers(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    ckpt = Path(args.checkpoint)
    model = _load_model(ckpt, cfg)
    ddpm_model = None
    if args.ddpm_checkpoint:
        dp = Path(args.ddpm_checkpoint)
        dcfg = _checkpoint_config(dp, None, args.seed, _overrides(args.set))
        dcfg.diffusion.mode = "ddpm"
        ddpm_model = _load_model(dp, dcfg)
    else:
        manifest.note("no DDPM checkpoint given; DDPM/DDIM rows are NaN")
    _, scenes = _read_scenes(Path(args.scenes))
    rows = compare_samplers(model, scenes, cfg.infer.seed, ddpm_model, progress=manifest.add_metrics,
                            noise_seed=args.noise_seed)
    write_sampler_csv(out / "samplers.csv", rows)
    print(f"wrote {len(rows)} rows to {out / 'samplers.csv'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, out: Path, manifest: Manifest) -> int:
    from .checks import run_all

    ctx = tn.corrupt_backward(args.corrupt) if args.corrupt else contextlib.nullcontext()
    with ctx:
        results = run_all(cfg.train.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name}: worst relative error {r.worst:.3e} ({r.worst_param})")
        manifest.add_metrics({"check": r.name, "worst": r.worst, "param": r.worst_param, "passed": r.passed})
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "compare-samplers": cmd_compare_samplers,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides data, train and infer seeds")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="votestep", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/val synthetic scenes")
    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--data", required=True, help="directory made by 'generate'")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="run at most this many more epochs")
    i = sub.add_parser("infer", parents=[common], help="detect objects in scene files")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scenes", required=True, help="scene file or directory")
    i.add_argument("--sampler", choices=SWEEP_SAMPLERS)
    i.add_argument("--steps", type=int)
    i.add_argument("--trajectory", action="store_true", help="also write per-scene trajectory CSVs")
    e = sub.add_parser("eval", parents=[common], help="score detection files against scenes")
    e.add_argument("--detections", required=True)
    e.add_argument("--scenes", required=True)
    c = sub.add_parser("compare-samplers", parents=[common], help="sampler x steps sweep")
    c.add_argument("--checkpoint", required=True, help="score-matching model")
    c.add_argument("--ddpm-checkpoint", help="model trained with diffusion.mode = ddpm")
    c.add_argument("--scenes", required=True)
    c.add_argument("--noise-seed", type=int, default=0, help="seed of the sampler noise (Langevin, DDPM)")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of all layers")
    g.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)
    return p


def _thread_limit(deterministic: bool):
    if deterministic:
        return 1
    env = os.environ.get("VOTESTEP_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"VOTESTEP_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("VOTESTEP_THREADS must be >= 1")
        return n
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = _overrides(args.set)
        if args.command in ("infer", "compare-samplers") and args.config is None:
            cfg = _checkpoint_config(Path(args.checkpoint), None, None, overrides)
        else:
            cfg = load_config(args.config, overrides)
        if args.seed is not None:
            cfg.data.seed = cfg.train.seed = cfg.infer.seed = args.seed
        cfg.validate()
        limit = _thread_limit(args.deterministic)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        seed = args.seed if args.seed is not None else cfg.train.seed
        manifest = Manifest(args.command, cfg, seed, argv)
        with threadpool_limits(limits=limit):
            code = COMMANDS[args.command](args, cfg, out, manifest)
        manifest.write(out)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SceneFormatError, SceneValidationError, DetectionFormatError, PlacementError,
            GeometryError, tn.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except (tn.TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
