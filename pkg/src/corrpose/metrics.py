"""Pose-error functions (VSD, MSSD, MSPD) and Average Recall."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import EmptyVisibilityError
from .geometry import project
from .templates import rasterize

N_SURFACE_POINTS = 1000
VSD_DELTA = 0.015
REFERENCE_WIDTH = 640.0
# threshold grids, BOP 2019 protocol
DIAMETER_FRACTIONS = np.arange(1, 11) * 0.05
VSD_THETAS = np.arange(1, 11) * 0.05
MSPD_STEPS = np.arange(1, 11) * 5.0


def vsd_taus(diameter):
    return DIAMETER_FRACTIONS * float(diameter)


def mspd_thresholds(image_width):
    return MSPD_STEPS * (float(image_width) / REFERENCE_WIDTH)


@dataclass
class PoseError:
    """Errors of one estimate: VSD per tau, MSSD in meters, MSPD in pixels."""

    vsd: list
    mssd: float
    mspd: float

    def __post_init__(self):
        self.vsd = [float(v) for v in np.atleast_1d(self.vsd)]
        self.mssd = float(self.mssd)
        self.mspd = float(self.mspd)
        if any(v < 0 for v in self.vsd) or self.mssd < 0 or self.mspd < 0:
            raise ValueError("pose errors must be nonnegative")

    @classmethod
    def failure(cls, n_tau=len(DIAMETER_FRACTIONS)):
        """Error record for a scene where no pose was produced."""
        return cls([1.0] * n_tau, np.inf, np.inf)


def _points(mesh, points):
    return mesh.sample_points(N_SURFACE_POINTS) if points is None else np.asarray(points)


def mssd(p, gt, mesh, points=None):
    """Max symmetry-aware surface distance in meters.

    ``min_S max_x || p(x) - gt(S x) ||`` over the mesh symmetries and a
    farthest-point sample of the vertices.
    """
    pts = _points(mesh, points)
    est = p.apply(pts)
    return float(min(
        np.linalg.norm(est - gt.apply(s.apply(pts)), axis=1).max() for s in mesh.symmetries
    ))


def mspd(p, gt, mesh, k, points=None):
    """Max symmetry-aware projection distance in pixels.

    Raises:
        PointBehindCameraError: if a sampled point is behind either camera.
    """
    pts = _points(mesh, points)
    est = project(p, k, pts)
    return float(min(
        np.linalg.norm(est - project(gt, k, s.apply(pts)), axis=1).max() for s in mesh.symmetries
    ))


def visibility_mask(d_scene, d_model, delta=VSD_DELTA):
    """Rendered pixels not hidden by the scene (missing scene depth counts as visible)."""
    return (d_model > 0) & ((d_model - d_scene <= delta) | (d_scene == 0))


def vsd_from_depths(d_est, d_gt, d_scene, tau, delta=VSD_DELTA):
    """VSD from rendered depths; ``tau`` may be a scalar or a sequence.

    A pixel is counted as an error when it lies in only one visibility mask
    or its depth difference exceeds ``tau``.

    Raises:
        EmptyVisibilityError: when neither pose has a visible pixel.
    """
    visib_gt = visibility_mask(d_scene, d_gt, delta)
    visib_est = visibility_mask(d_scene, d_est, delta) | (visib_gt & (d_est > 0))
    union = visib_gt | visib_est
    n_union = int(union.sum())
    if n_union == 0:
        raise EmptyVisibilityError("no visible pixels under either pose")
    inter = visib_gt & visib_est
    n_exclusive = n_union - int(inter.sum())
    dist = np.abs(d_gt[inter] - d_est[inter])
    taus = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    errs = [(int((dist > t).sum()) + n_exclusive) / n_union for t in taus]
    return errs[0] if np.ndim(tau) == 0 else errs


def vsd(p, gt, mesh, k, scene_depth, tau, delta=VSD_DELTA):
    """Visible surface discrepancy of ``p`` against ``gt`` in a scene.

    Both poses are rendered at the scene resolution; visibility is tested
    against ``scene_depth`` with occlusion tolerance ``delta`` (meters).
    """
    scene_depth = np.asarray(scene_depth, dtype=np.float64)
    h, w = scene_depth.shape
    d_est = rasterize(mesh, p, k, w, h).depth
    d_gt = rasterize(mesh, gt, k, w, h).depth
    return vsd_from_depths(d_est, d_gt, scene_depth, tau, delta)


def pose_errors(p, gt, mesh, k, scene_depth, points=None, delta=VSD_DELTA):
    """All three errors of one estimate on the standard tau grid."""
    pts = _points(mesh, points)
    return PoseError(
        vsd=vsd(p, gt, mesh, k, scene_depth, vsd_taus(mesh.diameter), delta),
        mssd=mssd(p, gt, mesh, pts),
        mspd=mspd(p, gt, mesh, k, pts),
    )


@dataclass
class RecallSummary:
    ar: float
    ar_vsd: float
    ar_mssd: float
    ar_mspd: float
    curves: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _recall_curve(values, thresholds):
    values = np.asarray(values, dtype=np.float64)
    return [float(np.mean(values < th)) for th in np.asarray(thresholds)]


def average_recall(errors, diameter, image_width):
    """BOP Average Recall over a list of :class:`PoseError`.

    Args:
        errors: non-empty list of pose errors.
        diameter: object diameter in meters, scalar or one per error.
        image_width: width in pixels of the evaluated images; MSPD
            thresholds scale by ``width / 640``.

    Returns:
        :class:`RecallSummary`; ``curves`` holds the recall per threshold.
    """
    if len(errors) == 0:
        raise ValueError("average_recall needs at least one error")
    d = np.broadcast_to(np.asarray(diameter, dtype=np.float64), (len(errors),))
    # normalising by diameter lets heterogeneous objects share one grid
    mssd_rel = np.array([e.mssd for e in errors]) / d
    mssd_curve = _recall_curve(mssd_rel, DIAMETER_FRACTIONS)
    mspd_curve = _recall_curve([e.mspd for e in errors], mspd_thresholds(image_width))
    vsd_mat = np.array([e.vsd for e in errors], dtype=np.float64)
    if vsd_mat.shape[1] != len(DIAMETER_FRACTIONS):
        raise ValueError(f"VSD lists must have {len(DIAMETER_FRACTIONS)} entries (one per tau)")
    # rows: tau, cols: theta
    vsd_curve = [[float(np.mean(vsd_mat[:, i] < th)) for th in VSD_THETAS]
                 for i in range(vsd_mat.shape[1])]
    ar_vsd = float(np.mean(vsd_curve))
    ar_mssd = float(np.mean(mssd_curve))
    ar_mspd = float(np.mean(mspd_curve))
    return RecallSummary(
        ar=(ar_vsd + ar_mssd + ar_mspd) / 3.0,
        ar_vsd=ar_vsd,
        ar_mssd=ar_mssd,
        ar_mspd=ar_mspd,
        curves={"vsd": vsd_curve, "mssd": mssd_curve, "mspd": mspd_curve},
    )
