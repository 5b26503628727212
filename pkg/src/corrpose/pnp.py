"""Perspective-n-point solvers.

* :func:`epnp` -- closed-form EPnP (4 control points, or 3 for planar
  scenes) with Gauss-Newton refinement of the kernel coefficients.
* :func:`ransac_pnp` -- EPnP inside RANSAC with an inlier re-fit.
* :func:`refine_pose` -- confidence-weighted dense reprojection
  minimisation (Levenberg-Marquardt then Gauss-Newton).
* :func:`refine_pose_grad` -- the same solve plus implicit-function
  Jacobians of the optimum w.r.t. flow and confidences.

Pose increments are 6-vectors ``(omega, dt)`` applied through
:meth:`Pose.retract` (left-multiplied rotation, additive translation).
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    CorrPoseError,
    DegenerateConfigurationError,
    InsufficientSupportError,
    NoConsensusError,
    NonFiniteResidualError,
    PointBehindCameraError,
    SingularSystemError,
)
from .geometry import MIN_DEPTH, Pose, backproject_depths, kabsch, pixel_centers, skew
from .robust import RansacConfig, ransac
from .validation import check_depth, check_points, check_weights

# --------------------------------------------------------------------------
# shared reprojection machinery


def _reprojection_errors(pose, k, points3d, points2d):
    """Per-point pixel error; inf for points at or behind the camera."""
    cam = pose.apply(points3d)
    z = cam[:, 2]
    ok = z > MIN_DEPTH
    safe = np.where(ok, z, 1.0)
    du = k.fx * cam[:, 0] / safe + k.cx - points2d[:, 0]
    dv = k.fy * cam[:, 1] / safe + k.cy - points2d[:, 1]
    return np.where(ok, np.hypot(du, dv), np.inf)


def _linearize(pose, k, points3d, targets, weights):
    """Weighted residuals ``(2n,)`` and Jacobian ``(2n, 6)``.

    Raises:
        PointBehindCameraError: if any point leaves the front half-space.
    """
    a = points3d @ pose.rotation.T
    p = a + pose.translation
    z = p[:, 2]
    bad = np.flatnonzero(z <= MIN_DEPTH)
    if bad.size:
        raise PointBehindCameraError(bad[0], z[bad[0]])
    iz = 1.0 / z
    proj = np.stack([k.fx * p[:, 0] * iz + k.cx, k.fy * p[:, 1] * iz + k.cy], axis=1)
    res = (proj - targets) * weights[:, None]

    n = p.shape[0]
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = k.fx * iz
    dpi[:, 0, 2] = -k.fx * p[:, 0] * iz * iz
    dpi[:, 1, 1] = k.fy * iz
    dpi[:, 1, 2] = -k.fy * p[:, 1] * iz * iz
    jac = np.empty((n, 2, 6))
    # d(exp(w) a)/dw at w = 0 is -[a]_x, so dpi @ (-[a]_x) = cross(a, dpi_row).
    jac[:, :, :3] = np.cross(a[:, None, :], dpi)
    jac[:, :, 3:] = dpi
    jac *= weights[:, None, None]
    return res.reshape(-1), jac.reshape(-1, 6)


def _objective(pose, k, points3d, targets, weights):
    try:
        res, _ = _linearize(pose, k, points3d, targets, weights)
    except PointBehindCameraError:
        return np.inf
    return 0.5 * float(res @ res)


def _solve(h, g):
    try:
        step = np.linalg.solve(h, -g)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal equations are singular: {exc}") from None
    if not np.all(np.isfinite(step)):
        raise SingularSystemError("normal equations produced a non-finite step")
    return step


def gauss_newton_pose(pose, k, points3d, points2d, weights=None, iters=10, tol=1e-10):
    """Plain Gauss-Newton on reprojection error; keeps the best iterate."""
    w = check_weights(weights, points3d.shape[0])
    f = _objective(pose, k, points3d, points2d, w)
    for _ in range(iters):
        try:
            r, j = _linearize(pose, k, points3d, points2d, w)
            step = _solve(j.T @ j, j.T @ r)
        except (PointBehindCameraError, SingularSystemError):
            break
        cand = pose.retract(step)
        f_new = _objective(cand, k, points3d, points2d, w)
        if not f_new <= f * (1 + 1e-10) + 1e-300:
            break
        pose, f = cand, f_new
        if np.linalg.norm(step) < tol:
            break
    return pose


# --------------------------------------------------------------------------
# EPnP

# Four non-coplanar points leave a 4-D kernel whose distance constraints are
# underdetermined after linearisation; five points make the kernel 2-D.
MINIMAL_SAMPLE = 5


def _control_points(points, planar_tol):
    c0 = points.mean(axis=0)
    centred = points - c0
    evals, evecs = np.linalg.eigh(centred.T @ centred / points.shape[0])
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if evals[0] <= 0 or evals[1] <= 1e-20 * evals[0]:
        raise DegenerateConfigurationError("3D points are collinear or coincident")
    planar = evals[2] <= planar_tol * evals[0]
    dims = 2 if planar else 3
    scales = np.sqrt(evals[:dims])
    axes = evecs[:, :dims]
    ctrl = np.vstack([c0, c0 + (axes * scales).T])
    rest = centred @ axes / scales
    alphas = np.column_stack([1.0 - rest.sum(axis=1), rest])
    return ctrl, alphas


def _pair_indices(nc):
    return [(a, b) for a in range(nc) for b in range(a + 1, nc)]


def _betas_linearized(kernel_diffs, rho, n_kernels):
    """Approximate kernel coefficients from the linearised distance constraints."""
    pairs = [(a, b) for a in range(n_kernels) for b in range(a, n_kernels)]
    if len(pairs) > rho.shape[0]:
        return None
    lmat = np.empty((rho.shape[0], len(pairs)))
    for col, (a, b) in enumerate(pairs):
        dot = np.einsum("pi,pi->p", kernel_diffs[a], kernel_diffs[b])
        lmat[:, col] = dot if a == b else 2.0 * dot
    sol, *_ = np.linalg.lstsq(lmat, rho, rcond=None)
    betas = np.zeros(n_kernels)
    betas[0] = np.sqrt(abs(sol[0]))
    for b in range(1, n_kernels):
        diag = pairs.index((b, b))
        cross = pairs.index((0, b))
        betas[b] = np.sqrt(abs(sol[diag])) * (np.sign(sol[cross]) or 1.0)
    return betas


def _refine_betas(betas, kernel_diffs, rho, iters=10):
    for _ in range(iters):
        diff = np.einsum("k,kpi->pi", betas, kernel_diffs)
        res = np.einsum("pi,pi->p", diff, diff) - rho
        jac = 2.0 * np.einsum("pi,kpi->pk", diff, kernel_diffs)
        try:
            step = np.linalg.solve(jac.T @ jac, -(jac.T @ res))
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        betas = betas + step
        if np.linalg.norm(step) <= 1e-15 * max(np.linalg.norm(betas), 1.0):
            break
    return betas


def epnp(points3d, points2d, k, refine=True, planar_tol=1e-10):
    """Pose from 2D-3D correspondences with EPnP.

    Args:
        points3d: ``(n, 3)`` model-frame points, n >= 4.
        points2d: ``(n, 2)`` observed pixels.
        k: camera intrinsics.
        refine: polish the best closed-form pose with Gauss-Newton on the
            reprojection error.
        planar_tol: relative spread below which points count as coplanar,
            switching to three control points.

    Raises:
        InsufficientSupportError: fewer than 4 correspondences.
        DegenerateConfigurationError: collinear points or no valid solution.
        PointBehindCameraError: the best solution puts points behind the camera.
    """
    pw = check_points(points3d, name="points3d")
    uv = check_points(points2d, dim=2, name="points2d")
    n = pw.shape[0]
    if n < 4 or uv.shape[0] != n:
        raise InsufficientSupportError(f"EPnP needs >= 4 matched correspondences, got {n}")

    ctrl, alphas = _control_points(pw, planar_tol)
    nc = ctrl.shape[0]
    xn = (uv[:, 0] - k.cx) / k.fx
    yn = (uv[:, 1] - k.cy) / k.fy
    m = np.zeros((2 * n, 3 * nc))
    m[0::2, 0::3] = alphas
    m[0::2, 2::3] = -alphas * xn[:, None]
    m[1::2, 1::3] = alphas
    m[1::2, 2::3] = -alphas * yn[:, None]
    _, _, vt = np.linalg.svd(m, full_matrices=True)
    n_kernels = min(4, nc)
    kernels = vt[::-1][:n_kernels].reshape(n_kernels, nc, 3)

    pairs = _pair_indices(nc)
    ia = [a for a, _ in pairs]
    ib = [b for _, b in pairs]
    rho = np.sum((ctrl[ia] - ctrl[ib]) ** 2, axis=1)
    diffs = kernels[:, ia] - kernels[:, ib]

    best = None
    for n_used in range(1, n_kernels + 1):
        init = _betas_linearized(diffs[:n_used], rho, n_used)
        if init is None:
            continue
        betas = np.zeros(n_kernels)
        betas[:n_used] = init
        # the Gauss-Newton polish never increases the distance residual, so
        # only the polished coefficients are scored
        cand = _refine_betas(betas, diffs, rho)
        pc = alphas @ np.einsum("k,kci->ci", cand, kernels)
        if pc[:, 2].mean() < 0:
            pc = -pc
        try:
            pose = kabsch(pw, pc)
        except DegenerateConfigurationError:
            continue
        score = float(np.mean(_reprojection_errors(pose, k, pw, uv)))
        if best is None or score < best[0]:
            best = (score, pose)
    if best is None:
        raise DegenerateConfigurationError("EPnP found no valid solution")
    pose = best[1]
    cam_z = pose.apply(pw)[:, 2]
    if np.any(cam_z <= MIN_DEPTH):
        i = int(np.argmin(cam_z))
        raise PointBehindCameraError(i, cam_z[i])
    if refine:
        pose = gauss_newton_pose(pose, k, pw, uv)
    return pose


def ransac_pnp(points3d, points2d, k, cfg=None):
    """Robust EPnP.

    Minimal samples of five are fitted with EPnP; the best consensus under
    ``cfg.threshold`` pixels is re-fitted on all its inliers.

    Returns:
        ``(pose, inlier_mask)``.

    Raises:
        NoConsensusError: fewer than 4 inliers for every hypothesis.
    """
    cfg = cfg or RansacConfig()
    pw = check_points(points3d, name="points3d")
    uv = check_points(points2d, dim=2, name="points2d")
    if pw.shape[0] != uv.shape[0]:
        raise ValueError("points3d and points2d differ in length")
    if pw.shape[0] < 4:
        raise InsufficientSupportError(f"RANSAC-PnP needs >= 4 correspondences, got {pw.shape[0]}")

    def fit(idx):
        return epnp(pw[idx], uv[idx], k, refine=len(idx) > MINIMAL_SAMPLE)

    if pw.shape[0] < MINIMAL_SAMPLE:
        try:
            pose = fit(np.arange(pw.shape[0]))
        except CorrPoseError as exc:
            raise NoConsensusError(f"single EPnP fit failed: {exc}") from exc
        mask = _reprojection_errors(pose, k, pw, uv) < cfg.threshold
        if mask.sum() < 4:
            raise NoConsensusError(f"only {int(mask.sum())} inliers, need 4")
        return pose, mask

    def residuals(pose):
        return _reprojection_errors(pose, k, pw, uv)

    return ransac(pw.shape[0], fit, residuals, MINIMAL_SAMPLE, cfg, min_inliers=4)


# --------------------------------------------------------------------------
# dense weighted refinement


@dataclass(eq=False)
class RefineProblem:
    """Inputs of the dense reprojection refinement.

    Attributes:
        pose_init: pose used to render ``depth_r``.
        flow: ``(H, W, 2)`` flow from rendered pixels to the query, pixels.
        confidence: ``(H, W)`` weights in [0, 1].
        depth_r: ``(H, W)`` rendered depth.
        k: intrinsics of the rendered (and query) view.
    """

    pose_init: Pose
    flow: np.ndarray
    confidence: np.ndarray
    depth_r: np.ndarray
    k: object

    def __post_init__(self):
        self.depth_r = check_depth(self.depth_r, "depth_r")
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        h, w = self.depth_r.shape
        if self.flow.shape != (h, w, 2) or self.confidence.shape != (h, w):
            raise ValueError("flow, confidence and depth_r must share their image shape")
        c = self.confidence
        if not np.all(np.isfinite(c)) or np.any(c < 0) or np.any(c > 1):
            raise ValueError("confidence must lie in [0, 1]")

    def support(self):
        """Row/col indices of rendered pixels (depth > 0), row-major."""
        return np.nonzero(self.depth_r > 0)

    def observations(self, rows, cols):
        """Model points, target pixels and weights for the given pixels."""
        centres = pixel_centers(rows, cols)
        pts = backproject_depths(self.pose_init, self.k, centres, self.depth_r[rows, cols])
        targets = centres + self.flow[rows, cols]
        return pts, targets, self.confidence[rows, cols]


@dataclass
class RefineInfo:
    """Convergence record of :func:`refine_pose`.

    ``lm_steps`` holds ``(objective_before, objective_after, accepted,
    damping)`` for every LM trial step.
    """

    initial_objective: float
    final_objective: float = np.nan
    lm_steps: list = field(default_factory=list)
    lm_objectives: list = field(default_factory=list)
    gn_objectives: list = field(default_factory=list)
    gn_iterations: int = 0
    n_pixels: int = 0

    def accepted_steps_monotone(self):
        return all(after <= before for before, after, ok, _ in self.lm_steps if ok)


def refine_pose(problem, lm_iters=3, gn_iters=10, gn_tol=1e-10, lam0=1e-3,
                max_trials=10, full_output=False):
    """Minimise the confidence-weighted reprojection error of dense flow.

    Every rendered pixel with positive confidence is lifted to the model
    frame with ``problem.pose_init`` and ``problem.depth_r``; the pose is
    then fitted so these points reproject onto ``pixel + flow``. Three
    Levenberg-Marquardt iterations (Marquardt scaling, damping x10 on a
    rejected trial, /10 on an accepted one) are followed by Gauss-Newton
    until the step norm drops below ``gn_tol`` or ``gn_iters`` is reached.

    Returns:
        The refined :class:`Pose`, or ``(pose, RefineInfo)`` with
        ``full_output=True``.

    Raises:
        InsufficientSupportError: fewer than 3 pixels with depth and weight.
        NonFiniteResidualError: the initial residual is not finite.
    """
    rows, cols = problem.support()
    keep = problem.confidence[rows, cols] > 0
    rows, cols = rows[keep], cols[keep]
    if rows.size < 3:
        raise InsufficientSupportError(
            f"refinement needs >= 3 weighted rendered pixels, got {rows.size}"
        )
    pts, targets, w = problem.observations(rows, cols)
    k = problem.k
    pose = problem.pose_init

    res, jac = _linearize(pose, k, pts, targets, w)
    if not np.all(np.isfinite(res)):
        raise NonFiniteResidualError("initial residuals are not finite")
    f = 0.5 * float(res @ res)
    info = RefineInfo(initial_objective=f, n_pixels=int(rows.size))
    info.lm_objectives.append(f)

    lam = lam0
    for _ in range(lm_iters):
        g = jac.T @ res
        h = jac.T @ jac
        damp = np.diag(np.maximum(np.diag(h), 1e-12))
        for _ in range(max_trials):
            step = _solve(h + lam * damp, g)
            cand = pose.retract(step)
            f_new = _objective(cand, k, pts, targets, w)
            accepted = f_new <= f
            info.lm_steps.append((f, f_new, accepted, lam))
            if accepted:
                pose, f = cand, f_new
                lam /= 10.0
                break
            lam *= 10.0
        info.lm_objectives.append(f)
        res, jac = _linearize(pose, k, pts, targets, w)

    for _ in range(gn_iters):
        step = _solve(jac.T @ jac, jac.T @ res)
        cand = pose.retract(step)
        f_new = _objective(cand, k, pts, targets, w)
        if not np.isfinite(f_new) or f_new > f * (1 + 1e-9) + 1e-300:
            break
        pose, f = cand, f_new
        info.gn_iterations += 1
        info.gn_objectives.append(f)
        res, jac = _linearize(pose, k, pts, targets, w)
        if np.linalg.norm(step) < gn_tol:
            break
    info.final_objective = f
    return (pose, info) if full_output else pose


@dataclass(eq=False)
class PnPJacobians:
    """Sensitivities of the refined pose.

    Columns follow the rendered pixels (depth > 0) in row-major order, given
    by ``rows``/``cols``. The pose is expressed in tangent coordinates
    ``(omega, dt)`` at the solution.

    Attributes:
        d_pose_d_flow: ``(6, 2n)``; columns ``2i`` and ``2i + 1`` are the x
            and y flow components of pixel ``i``.
        d_pose_d_weight: ``(6, n)``.
    """

    d_pose_d_flow: np.ndarray
    d_pose_d_weight: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    condition_number: float


def _projection_hessians(k, p):
    """Second derivatives of (u, v) w.r.t. the camera point, ``(n, 2, 3, 3)``."""
    n = p.shape[0]
    iz = 1.0 / p[:, 2]
    out = np.zeros((n, 2, 3, 3))
    out[:, 0, 0, 2] = out[:, 0, 2, 0] = -k.fx * iz ** 2
    out[:, 0, 2, 2] = 2.0 * k.fx * p[:, 0] * iz ** 3
    out[:, 1, 1, 2] = out[:, 1, 2, 1] = -k.fy * iz ** 2
    out[:, 1, 2, 2] = 2.0 * k.fy * p[:, 1] * iz ** 3
    return out


def objective_hessian(pose, k, points3d, targets, weights):
    """Exact Hessian of ``0.5 * sum ||w (pi(R x + t) - q)||^2`` in the retract chart.

    Returns ``(H, J, r)`` with ``J`` and ``r`` unweighted (per point
    ``(2, 6)`` and ``(2,)``).
    """
    a = points3d @ pose.rotation.T
    p = a + pose.translation
    iz = 1.0 / p[:, 2]
    n = p.shape[0]
    proj = np.stack([k.fx * p[:, 0] * iz + k.cx, k.fy * p[:, 1] * iz + k.cy], axis=1)
    r = proj - targets
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = k.fx * iz
    dpi[:, 0, 2] = -k.fx * p[:, 0] * iz * iz
    dpi[:, 1, 1] = k.fy * iz
    dpi[:, 1, 2] = -k.fy * p[:, 1] * iz * iz
    dp = np.zeros((n, 3, 6))
    dp[:, :, :3] = -np.stack([skew(ai) for ai in a])
    dp[:, :, 3:] = np.eye(3)
    jac = np.einsum("nkm,nmj->nkj", dpi, dp)

    w2 = weights ** 2
    h = np.einsum("n,nki,nkj->ij", w2, jac, jac)
    # residual-weighted curvature of the projection
    hp = _projection_hessians(k, p)
    curv = np.einsum("nk,nkab->nab", r, hp)
    h += np.einsum("n,nai,nab,nbj->ij", w2, dp, curv, dp)
    # curvature of the rotation chart: d2(exp(w) a)_m / dw2 = (e_m a^T + a e_m^T)/2 - a_m I
    g = np.einsum("nk,nkm->nm", r, dpi)
    ga = np.einsum("nm,nm->n", g, a)
    rot = 0.5 * (np.einsum("nm,nl->nml", g, a) + np.einsum("nm,nl->nml", a, g))
    rot -= ga[:, None, None] * np.eye(3)
    h[:3, :3] += np.einsum("n,nml->ml", w2, rot)
    return h, jac, r


def refine_pose_grad(problem, max_condition=1e12, **kwargs):
    """Refine the pose and differentiate the optimum implicitly.

    At the solution the gradient ``G(theta, Y, W) = sum_i w_i^2 J_i^T r_i``
    vanishes, so ``d theta = -H^-1 dG`` with ``H`` the exact Hessian
    (including residual curvature). This yields

    * ``d theta / d Y_i = H^-1 w_i^2 J_i^T``
    * ``d theta / d w_i = -2 H^-1 w_i J_i^T r_i``

    Pixels with zero confidence get exactly zero columns.

    Returns:
        ``(pose, PnPJacobians)``.

    Raises:
        SingularSystemError: when ``cond(H) >= max_condition``.
    """
    pose = refine_pose(problem, **kwargs)
    rows, cols = problem.support()
    pts, targets, w = problem.observations(rows, cols)
    h, jac, r = objective_hessian(pose, problem.k, pts, targets, w)
    cond = float(np.linalg.cond(h))
    if not np.isfinite(cond) or cond >= max_condition:
        raise SingularSystemError(f"Hessian condition number {cond:.3g} exceeds {max_condition:.0e}")
    h_inv = np.linalg.inv(h)
    w2 = w ** 2
    d_flow = np.einsum("ij,nkj->ink", h_inv, jac * w2[:, None, None]).reshape(6, -1)
    jr = np.einsum("nkj,nk->nj", jac, r)
    d_weight = -2.0 * (h_inv @ (jr * w[:, None]).T)
    return pose, PnPJacobians(d_flow, d_weight, rows, cols, cond)


def solve_2d3d(points3d, points2d, k, weights=None, pose_init=None):
    """Weighted Gauss-Newton PnP from an initial guess (EPnP when absent)."""
    pw = check_points(points3d)
    uv = check_points(points2d, dim=2)
    pose = pose_init if pose_init is not None else epnp(pw, uv, k)
    return gauss_newton_pose(pose, k, pw, uv, weights)

