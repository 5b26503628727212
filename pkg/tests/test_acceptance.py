"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the result lines are printed
even when output capture is on.
"""

import itertools
import time

import numpy as np
import pytest

from corrpose.benchmark import BenchmarkConfig, run_benchmark
from corrpose.correspondence import decode_matches, gt_class_and_offset
from corrpose.estimator import CorrespondencePoseEstimator
from corrpose.exceptions import CorrPoseError
from corrpose.flow import FlowField, flow_probability, rgbd_pose
from corrpose.geometry import Intrinsics, Pose, backproject, pose_error, project
from corrpose.gradcheck import GRAD_TOL, run_gradcheck
from corrpose.losses import coarse_loss, flow_nll, pose_loss, refiner_loss
from corrpose.meshes import icosahedron, make_cube, make_icosphere, make_l_bracket, subdivide
from corrpose.metrics import PoseError, average_recall, mspd, mssd, vsd
from corrpose.mocks import make_scene, mock_refiner, perturb_pose
from corrpose.pnp import epnp
from corrpose.robust import RansacConfig
from corrpose.templates import build_templates, icosphere_viewpoints, rasterize

pytestmark = pytest.mark.acceptance

# every RefineInfo produced by the suite, audited by criterion 4
REFINEMENTS = []


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _collect(trace):
    for hyp in trace.get("hypotheses", []):
        REFINEMENTS.extend(hyp["refinements"])


def test_criterion_01_noiseless_recovery(report):
    t0 = time.perf_counter()
    meshes = [make_cube(), make_icosphere(), make_l_bracket()]
    estimators = [CorrespondencePoseEstimator().fit(m) for m in meshes]
    good = 0
    for i in range(200):
        mesh = meshes[i % 3]
        scene = make_scene(mesh, scene_id=i, seed=2024)
        try:
            pose, trace = estimators[i % 3].estimate(scene)
        except CorrPoseError:
            continue
        _collect(trace)
        # symmetric meshes: compare against the closest symmetric equivalent
        rot, trans = min(pose_error(pose, scene.pose_gt @ s) for s in mesh.symmetries)
        good += np.degrees(rot) < 0.1 and trans < 1e-3 * mesh.diameter
    elapsed = time.perf_counter() - t0
    ok = good >= 198 and elapsed < 60.0
    report(1, ok, f"{good}/200 scenes within 0.1 deg / 0.1% diameter in {elapsed:.1f} s")


def test_criterion_02_epnp_oracle(report):
    rng = np.random.default_rng(7)
    k = Intrinsics(320.0, 320.0, 112.0, 112.0)
    worst_rot = worst_t = 0.0
    for trial in range(100):
        n = int(rng.integers(8, 51))
        gt = Pose.from_rotvec(rng.normal(size=3), [rng.normal(0, 0.02), rng.normal(0, 0.02), 0.5])
        if trial % 4 == 0:
            # planar model, tilted at most ~35 degrees from fronto-parallel
            gt = Pose.from_rotvec(rng.normal(0, 0.35, 3), gt.translation)
            pts = np.c_[rng.uniform(-0.06, 0.06, (n, 2)), np.zeros(n)]
        else:
            cam = np.c_[rng.uniform(-0.06, 0.06, (n, 2)), 0.5 + rng.uniform(-0.06, 0.06, n)]
            pts = gt.inverse().apply(cam)
        pose = epnp(pts, project(gt, k, pts), k)
        rot, trans = pose_error(pose, gt)
        worst_rot, worst_t = max(worst_rot, rot), max(worst_t, trans)
    ok = worst_rot < 1e-5 and worst_t < 1e-7
    report(2, ok, f"worst rotation {worst_rot:.2e} rad, translation {worst_t:.2e} m over 100 instances")


def test_criterion_03_gradient_check(report):
    t0 = time.perf_counter()
    results = run_gradcheck(seed=0, count=20)
    elapsed = time.perf_counter() - t0
    flow = max(r.max_rel_flow for _, r in results)
    weight = max(r.max_rel_weight for _, r in results)
    ok = flow < GRAD_TOL and weight < GRAD_TOL and elapsed < 30.0
    report(3, ok, f"max relative error flow {flow:.2e}, confidence {weight:.2e} in {elapsed:.1f} s")


def test_criterion_05_formula_values(report):
    g, kcls = 14, 197
    checks = {
        "P_R(b=R/ln2)": flow_probability(1.0 / np.log(2.0), 1.0) == 0.5,
        "flow_nll zero": flow_nll(np.zeros((2, 2, 2)), np.ones((2, 2)), np.zeros((2, 2, 2)),
                                  np.ones((2, 2), bool)) == 0.0,
        "refiner 26": refiner_loss(1, 1, 1) == 26,
        "uniform CE": abs(coarse_loss(np.full((g, g, kcls), 1.0 / kcls), np.zeros((g, g, 2)),
                                      np.zeros((g, g), int), np.zeros((g, g, 2))).l_cls
                          - np.log(kcls)) < 1e-9,
        "pose_loss(p,p)": pose_loss(Pose.from_rotvec([0.3, 0.1, -0.2], [0, 0, 0.5]),
                                    Pose.from_rotvec([0.3, 0.1, -0.2], [0, 0, 0.5]),
                                    make_l_bracket().sample_points(1000)) == 0.0,
    }
    failed = [name for name, ok in checks.items() if not ok]
    report(5, not failed, "all unit values exact" if not failed else f"failed: {failed}")


def test_criterion_06_template_geometry(report):
    dirs = icosphere_viewpoints()
    v, f = subdivide(*icosahedron())
    brute = min(np.arccos(np.clip(a @ b, -1, 1)) for a, b in itertools.combinations(dirs, 2))
    ang = np.arccos(np.clip(dirs @ dirs.T, -1, 1))
    np.fill_diagonal(ang, np.inf)
    mesh = make_l_bracket()
    a, b = build_templates(mesh), build_templates(mesh)
    identical = all(x.depth.tobytes() == y.depth.tobytes() and
                    x.face_ids.tobytes() == y.face_ids.tobytes() for x, y in zip(a, b))
    ok = (dirs.shape == (42, 3) and v.shape == (42, 3) and len(a) == 42
          and abs(ang.min() - brute) < 1e-12 and identical)
    report(6, ok, f"{len(a)} viewpoints, min angle {np.degrees(brute):.4f} deg, "
                  f"re-render identical: {identical}")


def test_criterion_07_metrics(report):
    rng = np.random.default_rng(3)
    d = 0.1
    zero = average_recall([PoseError([0.0] * 10, 0.0, 0.0)] * 3, d, 224).ar
    beyond = average_recall([PoseError([1.0] * 10, 0.5 * d, 50 * 224 / 640)] * 3, d, 224).ar

    cube, k = make_cube(), Intrinsics(320.0, 320.0, 112.0, 112.0)
    gt = Pose.from_rotvec([0.4, -0.3, 0.2], [0.0, 0.0, 0.5])
    sym = max(max(mssd(gt @ s, gt, cube), mspd(gt @ s, gt, cube, k)) for s in cube.symmetries)

    bracket = make_l_bracket()
    gt_b = Pose.from_rotvec([0.4, -0.3, 0.2], [0.0, 0.0, 0.5])
    depth = rasterize(bracket, gt_b, k, 224).depth
    errs = vsd(gt_b.retract(rng.normal(0, 0.03, 6)), gt_b, bracket, k, depth,
               np.linspace(0.001, 0.1, 40))
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))

    errors = [PoseError(rng.random(10), rng.uniform(0, 0.6 * d), rng.uniform(0, 20)) for _ in range(40)]
    got = average_recall(errors, d, 224)
    hits = []
    for kind in ("mssd", "mspd", "vsd"):
        n = t = 0
        for j in range(10):
            for e in errors:
                if kind == "mssd":
                    n += e.mssd < (j + 1) * 0.05 * d
                    t += 1
                elif kind == "mspd":
                    n += e.mspd < (j + 1) * 5 * 224 / 640
                    t += 1
                else:
                    for theta in range(1, 11):
                        n += e.vsd[j] < theta * 0.05
                        t += 1
        hits.append(n / t)
    recount = (hits[0] + hits[1] + hits[2]) / 3
    diff = abs(got.ar - recount)
    ok = zero == 1.0 and beyond == 0.0 and sym < 1e-9 and monotone and diff < 1e-12
    report(7, ok, f"AR zero={zero}, beyond={beyond}, symmetry error {sym:.1e}, "
                  f"VSD monotone={monotone}, recount diff {diff:.1e}")


def test_criterion_08_robustness_trend(report):
    base = {"class_flip_prob": 0.2, "occlusion_frac": 0.2, "flow_sigma_b": 1.0}
    sweep = [0.0, 0.1, 0.2, 0.25]
    ars = []
    for sigma in sweep:
        rep = run_benchmark(BenchmarkConfig(n_scenes=24, seed=0, noise={**base, "offset_sigma": sigma}))
        REFINEMENTS.extend(info for r in rep.records for h in r.trace.get("hypotheses", [])
                           for info in _infos(h))
        ars.append(rep.ar)
    monotone = all(b <= a + 0.02 for a, b in zip(ars, ars[1:]))
    n1 = ars[1]
    rep5 = run_benchmark(BenchmarkConfig(n_scenes=24, seed=0, n_hypotheses=5,
                                         noise={**base, "offset_sigma": 0.1}))
    REFINEMENTS.extend(info for r in rep5.records for h in r.trace.get("hypotheses", [])
                       for info in _infos(h))
    ok = monotone and rep5.ar >= n1 - 0.02
    report(8, ok, f"AR over offset sigma {sweep}: {[round(a, 3) for a in ars]}; "
                  f"N=5 {rep5.ar:.3f} vs N=1 {n1:.3f}")


class _Info:
    """LM record rebuilt from a JSON trace."""

    def __init__(self, steps):
        self.lm_steps = steps

    def accepted_steps_monotone(self):
        return all(after <= before for before, after, ok, _ in self.lm_steps if ok)


def _infos(hyp):
    return [_Info(r["lm_steps"]) for r in hyp.get("refinements", [])]


def test_criterion_09_rgbd(report):
    mesh = make_l_bracket()
    exact_worst = 0.0
    good = 0
    for trial in range(100):
        scene = make_scene(mesh, scene_id=trial, seed=99)
        rng = np.random.default_rng(trial)
        init = perturb_pose(scene.pose_gt, rng, (0.005, 0.005, 0.01), 3.0)
        field, render = mock_refiner(scene, init)
        if trial < 20:
            pose = rgbd_pose(field, scene.depth, render.depth, scene.k, init)
            exact_worst = max(exact_worst, *pose_error(pose, scene.pose_gt))
        rows, cols = np.nonzero(render.mask)
        bad = rng.random(rows.size) < 0.3
        angle = rng.uniform(0, 2 * np.pi, bad.sum())
        mu = field.mu.copy()
        mu[rows[bad], cols[bad]] += 50.0 * np.c_[np.cos(angle), np.sin(angle)]
        noisy = FlowField(mu, field.b, field.certainty, field.sensitivity)
        try:
            pose = rgbd_pose(noisy, scene.depth, render.depth, scene.k, init,
                             RansacConfig(threshold=0.005, scoring="msac", seed=trial))
        except CorrPoseError:
            continue
        good += np.degrees(pose_error(pose, scene.pose_gt)[0]) < 0.5
    ok = exact_worst < 1e-6 and good >= 95
    report(9, ok, f"noiseless worst error {exact_worst:.1e}; {good}/100 outlier trials under 0.5 deg")


def test_criterion_10_round_trips(report):
    rng = np.random.default_rng(10)
    g = 14
    worst_decode = 0.0
    for target in rng.uniform(0, 224, (1000, 2)):
        cls, off = gt_class_and_offset(target, 16, grid=g)
        c = np.zeros((g, g, g * g + 1))
        c[..., g * g] = 1.0
        c[0, 0] = 0.0
        c[0, 0, cls] = 1.0
        u = np.zeros((g, g, 2))
        u[0, 0] = off
        worst_decode = max(worst_decode, np.abs(decode_matches(c, u).target[0] - target).max())

    k = Intrinsics(320.0, 320.0, 112.0, 112.0)
    pose = Pose.from_rotvec(rng.normal(size=3), rng.normal(0, 0.05, 3))
    depth = rng.uniform(0.2, 2.0, (224, 224))
    pixels = rng.uniform(0, 224, (1000, 2))
    worst_proj = 0.0
    for px in pixels:
        point = backproject(pose, k, depth, px)
        worst_proj = max(worst_proj, np.abs(project(pose, k, point[None])[0] - px).max())
    ok = worst_decode < 1e-9 and worst_proj < 1e-9
    report(10, ok, f"decode round trip {worst_decode:.1e} px, projection round trip {worst_proj:.1e} px")


def test_criterion_04_lm_monotonicity(report):
    if not REFINEMENTS:
        # run alone: produce refinements from a small noisy benchmark
        rep = run_benchmark(BenchmarkConfig(n_scenes=6, noise={"flow_sigma_b": 1.0}))
        REFINEMENTS.extend(info for r in rep.records for h in r.trace.get("hypotheses", [])
                           for info in _infos(h))
    steps = sum(len(info.lm_steps) for info in REFINEMENTS)
    bad = sum(not info.accepted_steps_monotone() for info in REFINEMENTS)
    report(4, bad == 0 and steps > 0,
           f"{len(REFINEMENTS)} refinements, {steps} LM steps, {bad} with an increasing accepted step")
