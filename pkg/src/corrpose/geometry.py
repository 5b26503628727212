"""Rigid poses, pinhole cameras, projection and rigid alignment.

Conventions used throughout the package:

* A :class:`Pose` maps model-frame points into the camera frame,
  ``x_cam = R @ x_model + t``.
* The camera frame is right-handed with +z forward, +x right and +y down.
* Pixel coordinates are continuous ``(u, v)`` with the origin at the
  top-left image corner; the centre of pixel ``[row, col]`` sits at
  ``(col + 0.5, row + 0.5)``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import DegenerateConfigurationError, PointBehindCameraError, ZeroDepthError
from .validation import check_depth, check_points, check_rotation, check_weights

MIN_DEPTH = 1e-9


def skew(v):
    """Cross-product matrix ``[v]_x`` so that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(rotvec):
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def so3_log(rotation):
    return Rotation.from_matrix(rotation).as_rotvec()


def rotation_angle(r_a, r_b):
    """Geodesic angle in radians between two rotation matrices."""
    cos = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    # arccos loses precision near 0; the rotvec norm does not.
    if cos > 0.999:
        return float(np.linalg.norm(so3_log(np.asarray(r_a).T @ np.asarray(r_b))))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform from the model frame to the camera frame.

    Args:
        rotation: 3x3 orthonormal matrix with determinant +1.
        translation: 3-vector in meters.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        return cls(so3_exp(rotvec), translation)

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other):
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def retract(self, delta):
        """Apply a tangent increment ``(omega, dt)``.

        The rotation is left-multiplied by ``exp(omega)`` and ``dt`` is added
        to the translation; this is the chart used by the pose solvers.
        """
        delta = np.asarray(delta, dtype=np.float64)
        return Pose(so3_exp(delta[:3]) @ self.rotation, self.translation + delta[3:])

    def local_coordinates(self, other):
        """Inverse of :meth:`retract`: the increment taking ``self`` to ``other``."""
        return np.concatenate(
            [so3_log(other.rotation @ self.rotation.T), other.translation - self.translation]
        )

    def allclose(self, other, atol=1e-9):
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def to_dict(self):
        return {"R": self.rotation.reshape(-1).tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["R"], dtype=np.float64).reshape(3, 3), data["t"])

    def to_quaternion(self):
        """Rotation as a scalar-last unit quaternion ``(x, y, z, w)``."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def __repr__(self):
        rv = np.round(so3_log(self.rotation), 6).tolist()
        return f"Pose(rotvec={rv}, t={np.round(self.translation, 6).tolist()})"


def pose_error(estimate, reference):
    """Return ``(rotation error in radians, translation error in meters)``."""
    return (
        rotation_angle(estimate.rotation, reference.rotation),
        float(np.linalg.norm(estimate.translation - reference.translation)),
    )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, pixels):
        """Camera-frame rays with unit z through continuous pixel positions."""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        rays = np.ones((px.shape[0], 3))
        rays[:, 0] = (px[:, 0] - self.cx) / self.fx
        rays[:, 1] = (px[:, 1] - self.cy) / self.fy
        return rays

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]))


def project_camera(k, points_cam):
    """Project camera-frame points; raises on the first point with z <= 1e-9."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    bad = np.flatnonzero(p[:, 2] <= MIN_DEPTH)
    if bad.size:
        raise PointBehindCameraError(bad[0], p[bad[0], 2])
    out = np.empty((p.shape[0], 2))
    out[:, 0] = k.fx * p[:, 0] / p[:, 2] + k.cx
    out[:, 1] = k.fy * p[:, 1] / p[:, 2] + k.cy
    return out


def project(pose, k, points):
    """Project model-frame points to pixels.

    Returns:
        ``(n, 2)`` array of ``(u, v)`` pixel coordinates.

    Raises:
        PointBehindCameraError: if a transformed point has z <= 1e-9.
    """
    pts = check_points(points)
    return project_camera(k, pose.apply(pts))


def pixel_index(pixels):
    """Integer ``(row, col)`` of the pixel cells containing continuous positions."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cols = np.floor(px[:, 0]).astype(np.int64)
    rows = np.floor(px[:, 1]).astype(np.int64)
    return rows, cols


def pixel_centers(rows, cols):
    return np.stack([np.asarray(cols, dtype=np.float64) + 0.5,
                     np.asarray(rows, dtype=np.float64) + 0.5], axis=-1)


def backproject_depths(pose, k, pixels, depths):
    """Vectorised backprojection with explicit per-pixel depths.

    ``x = R^-1 (K^-1 d (u, v, 1)^T - t)``.
    """
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    cam = k.rays(pixels) * depths[:, None]
    return (cam - pose.translation) @ pose.rotation


def backproject(pose, k, depth, pixel):
    """Lift one pixel to a model-frame 3D point using a depth map.

    The depth is read from the pixel cell that contains ``pixel``.

    Raises:
        ZeroDepthError: when the depth there is 0 or the pixel is outside the map.
    """
    d = check_depth(depth)
    (row,), (col,) = pixel_index(pixel)
    if not (0 <= row < d.shape[0] and 0 <= col < d.shape[1]) or d[row, col] <= 0:
        raise ZeroDepthError(f"no depth at pixel {tuple(np.ravel(pixel))}")
    return backproject_depths(pose, k, pixel, [d[row, col]])[0]


def sample_depth(depth, pixels, planar_tol=1e-9, return_exact=False):
    """Depth at continuous pixel positions.

    Inverse depth is interpolated bilinearly between the four surrounding
    pixel centres. Inverse depth is affine in ``(u, v)`` over a plane, so the
    result is exact when the surface there is a single plane. This is
    checked on the surrounding 4x4 block of pixels: every first-order mixed
    and second-order difference of inverse depth must vanish. A 2x2 block
    alone cannot see a step edge that runs along a pixel axis. Positions
    that fail the check (an edge or an empty pixel nearby) fall back to the
    containing pixel's depth; positions outside the map return 0.

    With ``return_exact`` a boolean mask of positions that were interpolated
    on a planar stencil is returned as well.
    """
    d = np.asarray(depth, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = d.shape
    out = np.zeros(px.shape[0])
    rows, cols = pixel_index(px)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    out[inside] = d[rows[inside], cols[inside]]
    exact = np.zeros(px.shape[0], dtype=bool)

    gx = px[:, 0] - 0.5
    gy = px[:, 1] - 0.5
    c0 = np.floor(gx).astype(np.int64)
    r0 = np.floor(gy).astype(np.int64)
    ok = inside & (c0 >= 1) & (r0 >= 1) & (c0 + 2 < w) & (r0 + 2 < h)
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return (out, exact) if return_exact else out
    r, c = r0[idx], c0[idx]
    off = np.arange(-1, 3)
    block = d[(r[:, None] + off)[:, :, None], (c[:, None] + off)[:, None, :]]  # (n, 4, 4)
    valid = np.all(block > 0, axis=(1, 2))
    inv = np.where(block > 0, 1.0 / np.where(block > 0, block, 1.0), 0.0)
    mixed = inv[:, :-1, :-1] + inv[:, 1:, 1:] - inv[:, :-1, 1:] - inv[:, 1:, :-1]
    ddx = inv[:, :, :-2] - 2.0 * inv[:, :, 1:-1] + inv[:, :, 2:]
    ddy = inv[:, :-2, :] - 2.0 * inv[:, 1:-1, :] + inv[:, 2:, :]
    tol = planar_tol * np.maximum(np.abs(inv[:, 1, 1]), 1e-300)
    affine = valid & np.all(
        [np.abs(x).max(axis=(1, 2)) <= tol for x in (mixed, ddx, ddy)], axis=0)
    fx = gx[idx] - c
    fy = gy[idx] - r
    i00, i01, i10, i11 = inv[:, 1, 1], inv[:, 1, 2], inv[:, 2, 1], inv[:, 2, 2]
    interp = (i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy)
              + i10 * (1 - fx) * fy + i11 * fx * fy)
    use = affine & (interp > 0)
    out[idx[use]] = 1.0 / interp[use]
    exact[idx[use]] = True
    return (out, exact) if return_exact else out


def kabsch(src, dst, weights=None):
    """Weighted least-squares rigid transform taking ``src`` onto ``dst``.

    Minimises ``sum_i w_i ||dst_i - (R src_i + t)||^2`` with det(R) = +1.

    Raises:
        DegenerateConfigurationError: when the weighted points are collinear
            or fewer than three carry weight.
    """
    src = check_points(src, name="src")
    dst = check_points(dst, name="dst")
    if src.shape != dst.shape:
        raise ValueError(f"src and dst differ in shape: {src.shape} vs {dst.shape}")
    w = check_weights(weights, src.shape[0])
    if np.count_nonzero(w) < 3:
        raise DegenerateConfigurationError("kabsch needs at least 3 weighted points")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    a = src - mu_s
    b = dst - mu_d
    spread = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if spread[0] == 0 or spread[1] <= 1e-12 * spread[0]:
        raise DegenerateConfigurationError("kabsch input points are collinear")
    cov = (b * w[:, None]).T @ a
    u, _, vt = np.linalg.svd(cov)
    s = np.ones(3)
    s[2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = (u * s) @ vt
    return Pose(r, mu_d - r @ mu_s)


def farthest_point_sample(points, count):
    """Deterministic farthest-point subset, seeded at index 0."""
    pts = check_points(points)
    n = pts.shape[0]
    if count >= n:
        return pts.copy()
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for i in range(1, count):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(pts - pts[chosen[i]], axis=1))
    return pts[chosen]
