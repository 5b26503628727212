"""Finite-difference checks of the implicit pose Jacobians."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, backproject_depths, pixel_centers, project
from .meshes import make_l_bracket
from .pnp import RefineProblem, refine_pose, refine_pose_grad
from .templates import rasterize

GRAD_TOL = 1e-3
FD_STEP = 1e-4
PROBLEM_SIZE = 40


def random_refine_problem(rng, mesh=None, size=PROBLEM_SIZE, flow_noise=0.3):
    """A small dense refinement problem with noisy flow and random confidence.

    The query pose is random; the render pose is a small perturbation of it.
    Flow is the exact rendered-to-query flow plus Gaussian noise, so the
    optimum has nonzero residuals.
    """
    mesh = mesh or make_l_bracket()
    k = Intrinsics(1.5 * size, 1.5 * size, size / 2.0, size / 2.0)
    gt = Pose.from_rotvec(rng.normal(size=3), [0.0, 0.0, 0.5])
    init = gt.retract(np.r_[rng.normal(0.0, 0.05, 3), rng.normal(0.0, 0.005, 3)])
    depth = rasterize(mesh, init, k, size).depth
    rows, cols = np.nonzero(depth > 0)
    centres = pixel_centers(rows, cols)
    pts = backproject_depths(init, k, centres, depth[rows, cols])
    flow = np.zeros((size, size, 2))
    flow[rows, cols] = project(gt, k, pts) - centres + rng.normal(0.0, flow_noise, (rows.size, 2))
    conf = np.zeros((size, size))
    # kept below 1 so central differences stay inside [0, 1]
    conf[rows, cols] = rng.uniform(0.2, 0.95, rows.size)
    return RefineProblem(init, flow, conf, depth, k)


@dataclass
class GradcheckResult:
    """Worst column-wise relative errors ``||fd - an|| / ||fd||``."""

    max_rel_flow: float = 0.0
    max_rel_weight: float = 0.0
    n_columns: int = 0
    worst: dict = field(default_factory=dict)

    @property
    def max_rel(self):
        return max(self.max_rel_flow, self.max_rel_weight)


def _solve(problem, flow=None, confidence=None):
    p = RefineProblem(problem.pose_init,
                      problem.flow if flow is None else flow,
                      problem.confidence if confidence is None else confidence,
                      problem.depth_r, problem.k)
    # fully converged solves; the default stopping rule is too loose for FD
    return refine_pose(p, gn_tol=0.0, gn_iters=30)


def _rel(fd, an):
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), 1e-12))


def check_gradients(problem, rng, n_pixels=8, h=FD_STEP, corrupt=False):
    """Compare implicit Jacobians against central differences on a pixel subset.

    Args:
        problem: :class:`~corrpose.pnp.RefineProblem`.
        rng: generator choosing the checked pixels.
        n_pixels: pixels checked (two flow columns and one weight column each).
        h: finite-difference step.
        corrupt: perturb the analytic Jacobians first (negative control).
    """
    pose, jac = refine_pose_grad(problem, gn_tol=0.0, gn_iters=30)
    d_flow, d_weight = jac.d_pose_d_flow, jac.d_pose_d_weight
    if corrupt:
        d_flow = d_flow * 1.1
        d_weight = d_weight + 0.1 * np.abs(d_weight).max()
    weighted = np.flatnonzero(problem.confidence[jac.rows, jac.cols] > 0)
    picks = rng.choice(weighted, size=min(n_pixels, weighted.size), replace=False)
    out = GradcheckResult()
    for i in picks:
        r, c = jac.rows[i], jac.cols[i]
        for comp in range(2):
            flow = problem.flow.copy()
            flow[r, c, comp] += h
            plus = _solve(problem, flow=flow)
            flow[r, c, comp] -= 2 * h
            minus = _solve(problem, flow=flow)
            fd = (pose.local_coordinates(plus) - pose.local_coordinates(minus)) / (2 * h)
            err = _rel(fd, d_flow[:, 2 * i + comp])
            if err > out.max_rel_flow:
                out.max_rel_flow = err
                out.worst["flow"] = {"pixel": [int(r), int(c)], "component": comp, "rel_error": err}
        conf = problem.confidence.copy()
        conf[r, c] += h
        plus = _solve(problem, confidence=conf)
        conf[r, c] -= 2 * h
        minus = _solve(problem, confidence=conf)
        fd = (pose.local_coordinates(plus) - pose.local_coordinates(minus)) / (2 * h)
        err = _rel(fd, d_weight[:, i])
        if err > out.max_rel_weight:
            out.max_rel_weight = err
            out.worst["weight"] = {"pixel": [int(r), int(c)], "rel_error": err}
        out.n_columns += 3
    return out


def run_gradcheck(seed=0, count=20, n_pixels=8, corrupt=False):
    """Check ``count`` random problems; returns per-problem results."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(count):
        problem = random_refine_problem(rng)
        results.append((problem, check_gradients(problem, rng, n_pixels, corrupt=corrupt)))
    return results
