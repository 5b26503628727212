"""Synthetic benchmark harness: scenes, pipeline runs, errors and reports."""

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .estimator import CorrespondencePoseEstimator, trace_to_json
from .exceptions import CorrPoseError
from .geometry import Pose
from .meshes import PRIMITIVES, load_mesh
from .metrics import PoseError, average_recall, pose_errors
from .mocks import SCENE_SIZE, NoiseModel, make_scene
from .templates import TEMPLATE_SIZE

CSV_COLUMNS = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]


@dataclass
class BenchmarkConfig:
    """Everything a benchmark run depends on.

    ``meshes`` holds primitive names (``cube``, ``icosphere``, ``l_bracket``)
    or mesh file paths; scene ``i`` uses ``meshes[i % len(meshes)]``.
    """

    meshes: list = field(default_factory=lambda: ["cube", "icosphere", "l_bracket"])
    n_scenes: int = 30
    seed: int = 0
    noise: dict = field(default_factory=dict)
    n_hypotheses: int = 1
    refine_rounds: int = 1
    modality: str = "rgb"
    template_size: int = TEMPLATE_SIZE
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.meshes, str):
            self.meshes = [self.meshes]
        if not self.meshes:
            raise ValueError("meshes: at least one mesh is required")
        if int(self.n_scenes) < 0:
            raise ValueError(f"n_scenes: must be >= 0, got {self.n_scenes}")
        if int(self.jobs) < 1:
            raise ValueError(f"jobs: must be >= 1, got {self.jobs}")
        if isinstance(self.noise, NoiseModel):
            self.noise = {f.name: getattr(self.noise, f.name) for f in fields(NoiseModel)}
        unknown = set(self.noise) - {f.name for f in fields(NoiseModel)} - {"seed"}
        if unknown:
            raise ValueError(f"noise: unknown keys {sorted(unknown)}")
        self.noise_model()

    def noise_model(self):
        params = {"seed": self.seed, **{k: v for k, v in self.noise.items() if k != "seed"}}
        return NoiseModel(**params)

    def estimator(self):
        return CorrespondencePoseEstimator(
            n_hypotheses=int(self.n_hypotheses), refine_rounds=int(self.refine_rounds),
            modality=self.modality, noise=self.noise_model(), seed=int(self.seed),
            template_size=int(self.template_size),
        )

    def to_dict(self):
        return asdict(self)


def resolve_mesh(spec):
    """A primitive by name, or a mesh loaded from a path."""
    if spec in PRIMITIVES:
        return PRIMITIVES[spec]()
    return load_mesh(spec)


@dataclass
class SceneRecord:
    scene_id: int
    obj_id: int
    mesh: str
    pose_gt: Pose
    pose: Pose | None
    error: PoseError
    score: float
    time: float
    trace: dict
    failure: str | None = None

    def to_dict(self):
        return {
            "scene_id": self.scene_id,
            "obj_id": self.obj_id,
            "mesh": self.mesh,
            "pose_gt": self.pose_gt.to_dict(),
            "pose": None if self.pose is None else self.pose.to_dict(),
            "error": _json_error(self.error),
            "score": self.score,
            "time": self.time,
            "failure": self.failure,
        }


def _json_error(err):
    # inf is not valid JSON; failures are stored as null
    def f(v):
        return None if not np.isfinite(v) else v
    return {"vsd": [f(v) for v in err.vsd], "mssd": f(err.mssd), "mspd": f(err.mspd)}


@dataclass
class BenchmarkReport:
    """Result of :func:`run_benchmark`.

    ``ar`` is the mean of ``ar_vsd``, ``ar_mssd`` and ``ar_mspd``.
    """

    records: list
    ar: float
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float
    curves: dict
    timings: dict
    config: dict

    @property
    def errors(self):
        return [r.error for r in self.records]

    @property
    def n_failures(self):
        return sum(r.failure is not None for r in self.records)

    def to_dict(self, traces=False):
        out = {
            "ar": self.ar, "ar_vsd": self.ar_vsd, "ar_mssd": self.ar_mssd, "ar_mspd": self.ar_mspd,
            "n_scenes": len(self.records), "n_failures": self.n_failures,
            "curves": self.curves, "timings": self.timings, "config": self.config,
            "scenes": [r.to_dict() for r in self.records],
        }
        if traces:
            out["traces"] = [r.trace for r in self.records]
        return out


def evaluate_pose(pose, scene):
    """:class:`PoseError` of one estimate; unevaluable estimates count as failures."""
    if pose is None:
        return PoseError.failure()
    try:
        return pose_errors(pose, scene.pose_gt, scene.mesh, scene.k, scene.depth)
    except CorrPoseError:
        return PoseError.failure()


def make_scenes(cfg, indices=None):
    """Seeded scenes of a config, with the mesh list resolved once."""
    meshes = [resolve_mesh(m) for m in cfg.meshes]
    indices = range(int(cfg.n_scenes)) if indices is None else indices
    return meshes, [(i, i % len(meshes), make_scene(meshes[i % len(meshes)], i, cfg.seed))
                    for i in indices]


def _run_chunk(cfg, indices):
    meshes, scenes = make_scenes(cfg, indices)
    estimators = {}
    stage = {"templates": 0.0, "coarse": 0.0, "refine": 0.0, "select": 0.0, "evaluate": 0.0}
    records = []
    for i, m, scene in scenes:
        if m not in estimators:
            t0 = time.perf_counter()
            estimators[m] = cfg.estimator().fit(meshes[m])
            stage["templates"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        try:
            pose, trace = estimators[m].estimate(scene)
            failure = None
            for key, value in trace["timing"].items():
                stage[key] += value
            score = float(trace["scores"][trace["top_templates"][0]])
            trace = trace_to_json(trace)
        except CorrPoseError as exc:
            pose, failure, score = None, f"{type(exc).__name__}: {exc}", 0.0
            trace = {"scene_id": i, "failure": failure}
        elapsed = time.perf_counter() - t0
        t1 = time.perf_counter()
        err = evaluate_pose(pose, scene)
        stage["evaluate"] += time.perf_counter() - t1
        records.append(SceneRecord(
            scene_id=i, obj_id=m + 1, mesh=meshes[m].name, pose_gt=scene.pose_gt, pose=pose,
            error=err, score=score, time=elapsed, trace=trace, failure=failure,
        ))
    diameters = {m: meshes[m].diameter for m in range(len(meshes))}
    return records, stage, diameters


def run_benchmark(cfg):
    """Generate scenes, run the pipeline and score it with Average Recall.

    Deterministic for a given config. Per-scene pipeline errors are recorded
    as failures (maximal errors) instead of aborting the run.
    """
    if isinstance(cfg, dict):
        cfg = BenchmarkConfig(**cfg)
    n = int(cfg.n_scenes)
    if n == 0:
        raise ValueError("n_scenes: must be >= 1 to compute a report")
    t0 = time.perf_counter()
    jobs = min(int(cfg.jobs), n)
    if jobs == 1:
        records, stage, diameters = _run_chunk(cfg, range(n))
    else:
        chunks = [list(range(j, n, jobs)) for j in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, [cfg] * jobs, chunks))
        records = sorted((r for p in parts for r in p[0]), key=lambda r: r.scene_id)
        stage = {k: sum(p[1][k] for p in parts) for k in parts[0][1]}
        diameters = parts[0][2]
    stage["total_wall"] = time.perf_counter() - t0

    summary = average_recall(
        [r.error for r in records], [diameters[r.obj_id - 1] for r in records], SCENE_SIZE)
    return BenchmarkReport(
        records=records, ar=summary.ar, ar_vsd=summary.ar_vsd, ar_mssd=summary.ar_mssd,
        ar_mspd=summary.ar_mspd, curves=summary.curves, timings=stage, config=cfg.to_dict(),
    )


# --------------------------------------------------------------------------
# results on disk


def format_csv_row(scene_id, obj_id, score, pose, elapsed, im_id=0):
    """One BOP results row; translation is written in millimeters."""
    return {
        "scene_id": int(scene_id),
        "im_id": int(im_id),
        "obj_id": int(obj_id),
        "score": f"{score:.6f}",
        "R": " ".join(repr(float(v)) for v in pose.rotation.reshape(-1)),
        "t": " ".join(repr(float(v) * 1000.0) for v in pose.translation),
        "time": f"{elapsed:.6f}",
    }


def results_csv(records):
    """BOP-style CSV text for every scene that produced a pose."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        if r.pose is not None:
            writer.writerow(format_csv_row(r.scene_id, r.obj_id, r.score, r.pose, r.time))
    return buf.getvalue()


def read_results_csv(path):
    """Parse a BOP results CSV into ``{(scene_id, obj_id): Pose}`` (meters)."""
    poses = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rot = np.array(row["R"].split(), dtype=np.float64).reshape(3, 3)
                t = np.array(row["t"].split(), dtype=np.float64) / 1000.0
                key = (int(row["scene_id"]), int(row["obj_id"]))
                poses[key] = Pose(rot, t)
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
    return poses


def write_report(report, path, traces=False):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(traces=traces), fh, indent=1)
        fh.write("\n")
