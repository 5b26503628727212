"""Viewpoint sampling, software z-buffer rendering and template sets."""

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import MIN_DEPTH, Intrinsics, Pose, pixel_index
from .meshes import icosahedron, subdivide

TEMPLATE_SIZE = 224
N_VIEWPOINTS = 42


def icosphere_viewpoints():
    """The 42 vertices of a once-subdivided icosahedron as unit vectors.

    Order: the 12 icosahedron vertices followed by the 30 edge midpoints in
    sorted edge order.
    """
    verts, faces = icosahedron()
    verts, _ = subdivide(verts, faces)
    return verts / np.linalg.norm(verts, axis=1, keepdims=True)


def look_at(direction, radius, up=(0.0, 1.0, 0.0)):
    """Camera pose on a sphere of ``radius`` looking at the model origin.

    The camera sits at ``radius * direction`` in the model frame with its
    +z axis through the origin. Image +y follows world ``-up``; when the
    viewing axis is parallel to ``up`` the x axis is used as up instead.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = -d
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(z, up)) < 1e-6:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return Pose(rot, -rot @ (radius * d))


@dataclass(frozen=True, eq=False)
class Viewpoint:
    direction: np.ndarray
    camera_pose: Pose
    radius: float
    index: int = -1


@dataclass(frozen=True, eq=False)
class Template:
    """A rendered view: depth, per-pixel triangle ids and the camera.

    ``depth`` is 0 where no surface is hit; ``face_ids`` is -1 there.
    """

    depth: np.ndarray
    face_ids: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    viewpoint: Viewpoint | None = None

    @property
    def mask(self):
        return self.depth > 0

    @property
    def size(self):
        return self.depth.shape[1]

    @property
    def shape(self):
        return self.depth.shape


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns_edge(ax, ay, bx, by):
    # Tie-break for centres exactly on an edge. A shared edge is walked in
    # opposite directions by its two triangles, so exactly one owns it.
    dy = by - ay
    return dy < 0 or (dy == 0 and bx - ax > 0)


def rasterize(mesh, pose, k, size, height=None):
    """Render a depth map with a z-buffer.

    Coverage is tested at pixel centres ``(col + 0.5, row + 0.5)``; depth is
    the exact intersection of the pixel ray with the triangle plane, so
    backprojected depths lie on the surface. No back-face culling is done.
    Triangles with a corner at z <= 1e-9 are skipped.

    Args:
        mesh: :class:`~corrpose.meshes.Mesh`.
        pose: model-to-camera pose.
        k: intrinsics.
        size: image width in pixels (and height unless ``height`` is given).

    Returns:
        :class:`Template` without a viewpoint.
    """
    width = int(size)
    height = int(height or size)
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    depth = np.full((height, width), np.inf)
    face_ids = np.full((height, width), -1, dtype=np.int64)

    cam = pose.apply(mesh.vertices)
    tri = cam[mesh.triangles]
    front = np.all(tri[:, :, 2] > MIN_DEPTH, axis=1)
    safe_z = np.where(tri[:, :, 2] > MIN_DEPTH, tri[:, :, 2], 1.0)
    us = k.fx * tri[:, :, 0] / safe_z + k.cx
    vs = k.fy * tri[:, :, 1] / safe_z + k.cy
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    offsets = np.einsum("ij,ij->i", normals, tri[:, 0])

    for f in np.flatnonzero(front):
        u, v = us[f], vs[f]
        c0 = max(int(np.ceil(u.min() - 0.5)), 0)
        c1 = min(int(np.floor(u.max() - 0.5)), width - 1)
        r0 = max(int(np.ceil(v.min() - 0.5)), 0)
        r1 = min(int(np.floor(v.max() - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        (ax, bx, cx), (ay, by, cy) = u, v
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0:
            continue
        if area < 0:
            bx, by, cx, cy = cx, cy, bx, by
        px = np.arange(c0, c1 + 1) + 0.5
        py = (np.arange(r0, r1 + 1) + 0.5)[:, None]
        inside = np.ones((r1 - r0 + 1, c1 - c0 + 1), dtype=bool)
        for (x0, y0), (x1, y1) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)), ((cx, cy), (ax, ay))):
            e = _edge(x0, y0, x1, y1, px, py)
            inside &= (e > 0) | ((e == 0) & _owns_edge(x0, y0, x1, y1))
        if not inside.any():
            continue
        rx = ((px - k.cx) / k.fx)[None, :]
        ry = (py - k.cy) / k.fy
        n = normals[f]
        denom = n[0] * rx + n[1] * ry + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = offsets[f] / denom
        z = np.where(inside & (z > MIN_DEPTH), z, np.inf)
        block = depth[r0:r1 + 1, c0:c1 + 1]
        closer = z < block
        block[closer] = z[closer]
        face_ids[r0:r1 + 1, c0:c1 + 1][closer] = f

    depth[~np.isfinite(depth)] = 0.0
    return Template(depth=depth, face_ids=face_ids, pose=pose, intrinsics=k)


def surface_depth(render, mesh, pixels):
    """Exact depth of the visible surface at continuous pixel positions.

    Candidate triangles are the ones visible in the 3x3 pixel neighbourhood
    of each position in ``render.face_ids``; each candidate's plane is
    intersected with the pixel ray and the nearest covering hit wins.
    Returns 0 where no candidate covers the position.
    """
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = render.depth.shape
    k = render.intrinsics
    rows, cols = pixel_index(px)
    cand = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = np.clip(rows + dr, 0, h - 1)
            c = np.clip(cols + dc, 0, w - 1)
            valid = (rows + dr >= 0) & (rows + dr < h) & (cols + dc >= 0) & (cols + dc < w)
            cand.append(np.where(valid, render.face_ids[r, c], -1))
    cand = np.stack(cand, axis=1)  # (n, 9)

    cam = render.pose.apply(mesh.vertices)
    tri = cam[mesh.triangles[np.maximum(cand, 0)]]  # (n, 9, 3, 3)
    z = tri[..., 2]
    safe_z = np.where(z > MIN_DEPTH, z, 1.0)
    u = k.fx * tri[..., 0] / safe_z + k.cx
    v = k.fy * tri[..., 1] / safe_z + k.cy
    qx = px[:, 0][:, None]
    qy = px[:, 1][:, None]
    e0 = _edge(u[..., 0], v[..., 0], u[..., 1], v[..., 1], qx, qy)
    e1 = _edge(u[..., 1], v[..., 1], u[..., 2], v[..., 2], qx, qy)
    e2 = _edge(u[..., 2], v[..., 2], u[..., 0], v[..., 0], qx, qy)
    area = e0 + e1 + e2
    tol = 1e-9 * np.abs(area)
    sgn = np.sign(area)
    covered = (cand >= 0) & (area != 0) & (sgn * e0 >= -tol) & (sgn * e1 >= -tol) & (sgn * e2 >= -tol)

    normals = np.cross(tri[..., 1, :] - tri[..., 0, :], tri[..., 2, :] - tri[..., 0, :])
    offset = np.einsum("...i,...i->...", normals, tri[..., 0, :])
    rays = k.rays(px)[:, None, :]
    denom = np.einsum("...i,...i->...", normals, rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = offset / denom
    depth = np.where(covered & (depth > MIN_DEPTH), depth, np.inf)
    best = depth.min(axis=1)
    return np.where(np.isfinite(best), best, 0.0)


@dataclass(frozen=True, eq=False)
class TemplateSet:
    templates: list
    mesh_id: str

    def __len__(self):
        return len(self.templates)

    def __getitem__(self, i):
        return self.templates[i]

    def __iter__(self):
        return iter(self.templates)

    def save(self, directory):
        """Write ``index.json`` plus one ``.depth`` file per template.

        A ``.depth`` file is a little-endian header of two u32 (width,
        height) followed by width*height f32 depths in row-major order.
        """
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, t in enumerate(self.templates):
            name = f"{i:03d}.depth"
            write_depth(out / name, t.depth)
            entries.append({
                "index": i,
                "file": name,
                "direction": t.viewpoint.direction.tolist(),
                "radius": t.viewpoint.radius,
                "camera_pose": t.pose.to_dict(),
                "intrinsics": t.intrinsics.to_dict(),
                "size": t.size,
            })
        index = {"mesh_id": self.mesh_id, "count": len(entries), "templates": entries}
        with open(out / "index.json", "w", encoding="utf-8") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory, mesh=None):
        """Read a set written by :meth:`save`.

        Face ids are not persisted; pass ``mesh`` to re-render them.
        """
        root = Path(directory)
        with open(root / "index.json", encoding="utf-8") as fh:
            index = json.load(fh)
        templates = []
        for e in index["templates"]:
            pose = Pose.from_dict(e["camera_pose"])
            k = Intrinsics.from_dict(e["intrinsics"])
            vp = Viewpoint(np.asarray(e["direction"]), pose, float(e["radius"]), int(e["index"]))
            depth = read_depth(root / e["file"])
            if mesh is not None:
                face_ids = rasterize(mesh, pose, k, e["size"]).face_ids
            else:
                face_ids = np.where(depth > 0, 0, -1)
            templates.append(Template(depth, face_ids, pose, k, vp))
        return cls(templates, index["mesh_id"])


def write_depth(path, depth):
    d = np.asarray(depth)
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_depth(path):
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: truncated depth file")
    return data.reshape(h, w).astype(np.float64)


def default_camera_distance(mesh, k, size, fill=0.9):
    """Distance at which the mesh's bounding sphere spans ``fill`` of the crop."""
    radius = mesh.diameter / 2.0
    half_angle = np.arctan(fill * size / (2.0 * min(k.fx, k.fy)))
    return float(radius / np.sin(half_angle))


def default_template_intrinsics(size=TEMPLATE_SIZE, focal=None):
    f = float(focal if focal is not None else 1.4 * size)
    return Intrinsics(f, f, size / 2.0, size / 2.0)


def build_templates(mesh, size=TEMPLATE_SIZE, intrinsics=None, distance=None, n_jobs=1):
    """Render the mesh from the 42 icosphere viewpoints.

    Args:
        mesh: mesh to render.
        size: square template size in pixels.
        intrinsics: template camera; defaults to focal ``1.4 * size``
            centred on the crop.
        distance: camera distance; by default the bounding sphere fills
            ~90% of the crop.
        n_jobs: threads used to render views concurrently.
    """
    k = intrinsics or default_template_intrinsics(size)
    radius = distance if distance is not None else default_camera_distance(mesh, k, size)
    dirs = icosphere_viewpoints()

    def render(i):
        pose = look_at(dirs[i], radius)
        t = rasterize(mesh, pose, k, size)
        vp = Viewpoint(dirs[i], pose, float(radius), i)
        return Template(t.depth, t.face_ids, pose, k, vp)

    if n_jobs == 1:
        templates = [render(i) for i in range(len(dirs))]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            templates = list(pool.map(render, range(len(dirs))))
    return TemplateSet(templates, mesh.name)
