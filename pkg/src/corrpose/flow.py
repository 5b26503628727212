"""Probabilistic flow fields, confidence fusion and the RGB-D pose path."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InsufficientSupportError
from .geometry import Pose, backproject_depths, kabsch, pixel_centers, sample_depth
from .robust import RansacConfig, ransac
from .validation import check_depth

DEFAULT_RADIUS = 1.0
CERTAINTY_THRESHOLD = 0.5
PLANES = ("mu_x", "mu_y", "b", "certainty", "sensitivity")


@dataclass(eq=False)
class FlowField:
    """Per-pixel Laplace flow from the rendered view to the query.

    Attributes:
        mu: ``(H, W, 2)`` mean flow in pixels.
        b: ``(H, W)`` Laplace scale in pixels, strictly positive.
        certainty: ``(H, W)`` probability the flow target is unoccluded.
        sensitivity: ``(H, W)`` pose-informativeness weights.
    """

    mu: np.ndarray
    b: np.ndarray
    certainty: np.ndarray
    sensitivity: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.certainty = np.asarray(self.certainty, dtype=np.float64)
        self.sensitivity = np.asarray(self.sensitivity, dtype=np.float64)
        h, w = self.b.shape
        if self.mu.shape != (h, w, 2):
            raise ValueError(f"mu must have shape ({h}, {w}, 2), got {self.mu.shape}")
        if self.certainty.shape != (h, w) or self.sensitivity.shape != (h, w):
            raise ValueError("certainty and sensitivity must match b")
        if not np.all(self.b > 0):
            raise ValueError("Laplace scale b must be positive everywhere")
        for name in ("certainty", "sensitivity"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def shape(self):
        return self.b.shape

    def save(self, path):
        """Write a JSON header (``<path>.json``) and f32 planes (``<path>.bin``)."""
        path = Path(path)
        h, w = self.shape
        header = {"width": w, "height": h, "dtype": "<f4", "planes": list(PLANES)}
        path.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n", encoding="utf-8")
        planes = [self.mu[..., 0], self.mu[..., 1], self.b, self.certainty, self.sensitivity]
        with open(path.with_suffix(".bin"), "wb") as fh:
            for plane in planes:
                fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if header["planes"] != list(PLANES):
            raise ValueError(f"unexpected plane order {header['planes']}")
        h, w = header["height"], header["width"]
        data = np.fromfile(path.with_suffix(".bin"), dtype=header["dtype"])
        if data.size != len(PLANES) * h * w:
            raise ValueError(f"{path}: expected {len(PLANES) * h * w} values, got {data.size}")
        mx, my, b, cert, sens = data.reshape(len(PLANES), h, w).astype(np.float64)
        return cls(np.stack([mx, my], axis=-1), b, cert, sens)


def flow_probability(b, radius=DEFAULT_RADIUS):
    """Probability that the true flow lies within L1 ``radius`` of the mean.

    ``P_R = 1 - exp(-R / b)``; works elementwise on arrays.
    """
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0):
        raise ValueError("Laplace scale b must be positive")
    if np.any(np.asarray(radius) < 0):
        raise ValueError("radius must be nonnegative")
    p = -np.expm1(-np.asarray(radius, dtype=np.float64) / b)
    return float(p) if p.ndim == 0 else p


def fuse_confidence(flow, radius=DEFAULT_RADIUS):
    """Per-pixel confidence: certainty x sensitivity x ``P_R``."""
    return flow.certainty * flow.sensitivity * flow_probability(flow.b, radius)


def rgbd_correspondences(flow, depth_q, depth_r, k, pose_init,
                         certainty_threshold=CERTAINTY_THRESHOLD):
    """3D-3D pairs from flow and two depth maps.

    Rendered pixels are lifted to the model frame with ``pose_init``; their
    flow targets are lifted into the query camera frame with ``depth_q``.
    Pixels below the certainty threshold are dropped, as are targets whose
    query depth cannot be interpolated on a planar stencil (no depth, or a
    depth edge nearby).

    Returns:
        ``(model_points, camera_points, rows, cols)``.
    """
    depth_q = check_depth(depth_q, "depth_q")
    depth_r = check_depth(depth_r, "depth_r")
    rows, cols = np.nonzero((depth_r > 0) & (flow.certainty >= certainty_threshold))
    centres = pixel_centers(rows, cols)
    targets = centres + flow.mu[rows, cols]
    dq, exact = sample_depth(depth_q, targets, return_exact=True)
    ok = exact & (dq > 0)
    rows, cols, centres, targets, dq = rows[ok], cols[ok], centres[ok], targets[ok], dq[ok]
    model = backproject_depths(pose_init, k, centres, depth_r[rows, cols])
    camera = backproject_depths(Pose.identity(), k, targets, dq)
    return model, camera, rows, cols


def robust_kabsch(src, dst, cfg):
    """MSAC over 3-point Kabsch hypotheses followed by an inlier re-fit."""
    def fit(idx):
        return kabsch(src[idx], dst[idx])

    def residuals(pose):
        return np.linalg.norm(pose.apply(src) - dst, axis=1)

    return ransac(src.shape[0], fit, residuals, 3, cfg, min_inliers=3)


def rgbd_pose(flow, depth_q, depth_r, k, pose_init, cfg=None,
              certainty_threshold=CERTAINTY_THRESHOLD):
    """Pose from dense flow plus query and rendered depth.

    Args:
        flow: :class:`FlowField` from the rendered view to the query.
        depth_q: query depth map (meters).
        depth_r: depth rendered under ``pose_init``.
        k: shared intrinsics.
        pose_init: pose used for rendering.
        cfg: :class:`~corrpose.robust.RansacConfig`; defaults to MSAC with a
            5 mm threshold.

    Raises:
        InsufficientSupportError: fewer than 3 pairs survive filtering.
    """
    cfg = cfg or RansacConfig(threshold=0.005, scoring="msac")
    model, camera, _, _ = rgbd_correspondences(
        flow, depth_q, depth_r, k, pose_init, certainty_threshold)
    if model.shape[0] < 3:
        raise InsufficientSupportError(
            f"RGB-D fit needs >= 3 certain correspondences with depth, got {model.shape[0]}"
        )
    pose, _ = robust_kabsch(model, camera, cfg)
    return pose

