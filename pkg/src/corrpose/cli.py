"""Command-line interface.

Exit codes: 0 success, 1 threshold or pipeline failure, 2 usage, config or
I/O error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .benchmark import (
    BenchmarkConfig, BenchmarkReport, SceneRecord, evaluate_pose, make_scenes, read_results_csv,
    resolve_mesh, results_csv, run_benchmark, write_report,
)
from .gradcheck import GRAD_TOL, run_gradcheck
from .meshes import PRIMITIVES
from .metrics import average_recall
from .mocks import SCENE_SIZE, NoiseModel
from .plots import plot_error_histograms, plot_recall_curves, plot_sweep
from .templates import build_templates

log = logging.getLogger("corrpose")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "CORRPOSE_SEED"
CONFIG_TYPES = {
    "meshes": (list, str),
    "n_scenes": int,
    "seed": int,
    "noise": dict,
    "n_hypotheses": int,
    "refine_rounds": int,
    "modality": str,
    "template_size": int,
    "jobs": int,
    "out_dir": str,
    "sweep": dict,
}
NOISE_TYPES = {f.name: (int, float) for f in fields(NoiseModel)}


class UsageError(Exception):
    """Invalid input; reported with exit code 2."""


def _check_type(key, value, expected):
    expected = expected if isinstance(expected, tuple) else (expected,)
    # bool is an int subclass but never a valid count or seed
    if isinstance(value, bool) or not isinstance(value, expected):
        names = " or ".join(t.__name__ for t in expected)
        raise UsageError(f"config field '{key}': expected {names}, got {type(value).__name__}")


def validate_config(raw, allow_sweep=False):
    """Check a raw JSON config and split it into benchmark fields and extras."""
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    allowed = set(CONFIG_TYPES) - ({"sweep"} if not allow_sweep else set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise UsageError(f"config: unknown field(s) {unknown}; allowed: {sorted(allowed)}")
    for key, value in raw.items():
        _check_type(key, value, CONFIG_TYPES[key])
    for key, value in raw.get("noise", {}).items():
        if key not in NOISE_TYPES:
            raise UsageError(f"config field 'noise.{key}': unknown; allowed: {sorted(NOISE_TYPES)}")
        _check_type(f"noise.{key}", value, NOISE_TYPES[key])
    bench = {k: v for k, v in raw.items() if k not in ("out_dir", "sweep")}
    try:
        cfg = BenchmarkConfig(**bench)
        cfg.estimator()._check_params()
    except ValueError as exc:
        raise UsageError(f"config: {exc}") from exc
    return cfg, raw.get("out_dir"), raw.get("sweep")


def load_config(path, overrides, allow_sweep=False):
    """Read a JSON config, apply the seed env var and then flag overrides."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path}: must be a JSON object")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV}={env_seed!r} is not an integer") from exc
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(raw, allow_sweep)


def _out_dir(path):
    out = Path(path or "corrpose_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _write(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_gen_templates(args):
    mesh_path = Path(args.mesh)
    if args.mesh not in PRIMITIVES and not mesh_path.is_file():
        raise UsageError(f"cannot read mesh {mesh_path}: no such file")
    try:
        mesh = resolve_mesh(args.mesh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read mesh {mesh_path}: {exc}") from exc
    templates = build_templates(mesh, args.size, n_jobs=args.jobs)
    out = _out_dir(args.out)
    try:
        templates.save(out)
    except OSError as exc:
        raise UsageError(f"cannot write templates to {out}: {exc.strerror or exc}") from exc
    print(f"wrote {len(templates)} templates to {out}")
    return EXIT_OK


def cmd_estimate(args):
    cfg, out_dir, _ = load_config(args.config, {
        "seed": args.seed, "jobs": args.jobs, "n_hypotheses": args.n_hypotheses,
        "n_scenes": args.n_scenes, "out_dir": args.out,
    })
    out = _out_dir(out_dir)
    report = run_benchmark(cfg)
    _write(out / "results.csv", results_csv(report.records))
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for rec in report.records:
        _write(trace_dir / f"scene_{rec.scene_id:04d}.json", json.dumps(rec.trace, indent=1) + "\n")
    write_report(report, out / "report.json")
    for rec in report.records:
        if rec.failure:
            log.warning("scene %d failed: %s", rec.scene_id, rec.failure)
    print(f"AR {report.ar:.4f} over {len(report.records)} scenes "
          f"({report.n_failures} failed); outputs in {out}")
    return EXIT_FAIL if report.n_failures == len(report.records) else EXIT_OK


def cmd_evaluate(args):
    cfg, out_dir, _ = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    try:
        poses = read_results_csv(args.results)
    except OSError as exc:
        raise UsageError(f"cannot read results {args.results}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(out_dir)
    meshes, scenes = make_scenes(cfg)
    records = []
    for i, m, scene in scenes:
        pose = poses.get((i, m + 1))
        records.append(SceneRecord(
            scene_id=i, obj_id=m + 1, mesh=meshes[m].name, pose_gt=scene.pose_gt, pose=pose,
            error=evaluate_pose(pose, scene), score=0.0, time=0.0, trace={},
            failure=None if pose is not None else "missing from results",
        ))
    summary = average_recall([r.error for r in records],
                             [meshes[r.obj_id - 1].diameter for r in records], SCENE_SIZE)
    report = BenchmarkReport(records, summary.ar, summary.ar_vsd, summary.ar_mssd,
                             summary.ar_mspd, summary.curves, {}, cfg.to_dict())
    write_report(report, out / "evaluation.json")
    plot_error_histograms(report, out / "errors.svg")
    plot_recall_curves(report, out / "recall.svg")
    print(f"AR {report.ar:.4f} (VSD {report.ar_vsd:.4f}, MSSD {report.ar_mssd:.4f}, "
          f"MSPD {report.ar_mspd:.4f})")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get(SEED_ENV, 0))
    results = run_gradcheck(seed, args.count, args.pixels, corrupt=args.corrupt_jacobian)
    worst_i = int(np.argmax([r.max_rel for _, r in results]))
    worst = results[worst_i][1]
    print(f"max relative error: flow {max(r.max_rel_flow for _, r in results):.3e}, "
          f"confidence {max(r.max_rel_weight for _, r in results):.3e} "
          f"({args.count} problems)")
    if worst.max_rel < GRAD_TOL:
        return EXIT_OK
    problem = results[worst_i][0]
    dump = {
        "problem": worst_i, "seed": seed, "details": worst.worst,
        "pose_init": problem.pose_init.to_dict(), "intrinsics": problem.k.to_dict(),
        "n_pixels": int((problem.depth_r > 0).sum()),
    }
    print("gradient check failed; worst problem:\n" + json.dumps(dump, indent=1))
    return EXIT_FAIL


def cmd_sweep(args):
    cfg, out_dir, sweep = load_config(args.config, {
        "seed": args.seed, "jobs": args.jobs, "out_dir": args.out}, allow_sweep=True)
    if not sweep:
        raise UsageError("config field 'sweep': required, e.g. {\"offset_sigma\": [0, 0.1]}")
    if len(sweep) != 1:
        raise UsageError("config field 'sweep': exactly one noise parameter may be swept")
    (param, values), = sweep.items()
    if param not in NOISE_TYPES or param == "seed":
        raise UsageError(f"config field 'sweep.{param}': not a sweepable noise parameter")
    if not isinstance(values, list) or not values:
        raise UsageError(f"config field 'sweep.{param}': empty grid")
    rows = []
    for value in values:
        _check_type(f"sweep.{param}", value, NOISE_TYPES[param])
        point = BenchmarkConfig(**{**cfg.to_dict(), "noise": {**cfg.noise, param: value}})
        report = run_benchmark(point)
        rows.append({param: value, "ar": report.ar, "ar_vsd": report.ar_vsd,
                     "ar_mssd": report.ar_mssd, "ar_mspd": report.ar_mspd,
                     "n_failures": report.n_failures})
        print(f"{param}={value}: AR {report.ar:.4f}")
    out = _out_dir(out_dir)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()}
                         for r in rows)
    plot_sweep(param, values, rows, out / "sweep.svg")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="corrpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-templates", help="render the 42 templates of a mesh")
    p.add_argument("mesh", help="mesh file (.obj/.ply) or primitive name")
    p.add_argument("out", help="output directory")
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_templates)

    p = sub.add_parser("estimate", help="run the pipeline on synthetic scenes")
    p.add_argument("config", help="JSON run config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--n-hypotheses", dest="n_hypotheses", type=int)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="score a results CSV against regenerated scenes")
    p.add_argument("config", help="JSON run config used to produce the results")
    p.add_argument("--results", required=True, help="BOP-style results CSV")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="implicit vs finite-difference pose Jacobians")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--pixels", type=int, default=8, help="pixels checked per problem")
    p.add_argument("--corrupt-jacobian", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="AR across a noise-parameter grid")
    p.add_argument("config", help="JSON run config with a 'sweep' field")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
