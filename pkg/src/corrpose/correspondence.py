"""Hybrid patch-classification + offset correspondences.

Grid tensors are indexed ``[i, j]`` where ``i`` runs along image x (u) and
``j`` along image y (v), so cell ``(i, j)`` covers the query patch centred
at ``((i + 0.5) * patch, (j + 0.5) * patch)``.

Class ``c`` in ``[0, G*G)`` names the template patch in column ``c % G``
and row ``c // G``; class ``G*G`` (the last one) means "no match".
"""

import json
from dataclasses import dataclass

import numpy as np

from .geometry import backproject_depths, project, sample_depth
from .templates import surface_depth

PATCH_SIZE = 16
OCCLUSION_TOL = 1e-4


def check_class_tensor(c, atol=1e-6):
    """Validate a ``(G, G, G*G + 1)`` probability tensor and return it."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 3 or c.shape[0] != c.shape[1] or c.shape[2] != c.shape[0] ** 2 + 1:
        raise ValueError(f"class tensor must have shape (G, G, G*G+1), got {c.shape}")
    if np.any(c < 0) or not np.allclose(c.sum(axis=2), 1.0, rtol=0.0, atol=atol):
        raise ValueError("class tensor cells must be probability vectors")
    return c


def check_offset_tensor(u, grid):
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (grid, grid, 2):
        raise ValueError(f"offset tensor must have shape ({grid}, {grid}, 2), got {u.shape}")
    if np.any(np.abs(u) > 0.5 + 1e-12):
        raise ValueError("offsets must lie in [-0.5, 0.5]")
    return u


def no_match_class(grid):
    return grid * grid


@dataclass(eq=False)
class MatchSet:
    """Query-to-template pixel correspondences with confidences."""

    query: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    image_size: int

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64).reshape(-1, 2)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        n = self.query.shape[0]
        if self.target.shape[0] != n or self.weight.shape[0] != n:
            raise ValueError("query, target and weight must have equal length")
        if np.any(self.weight < 0) or np.any(self.weight > 1):
            raise ValueError("match weights must lie in [0, 1]")
        for name, arr in (("query", self.query), ("target", self.target)):
            if np.any(arr < 0) or np.any(arr > self.image_size):
                raise ValueError(f"{name} pixels fall outside a {self.image_size}px image")

    def __len__(self):
        return self.query.shape[0]

    def to_jsonl(self):
        return "".join(
            json.dumps({"q": q.tolist(), "t": t.tolist(), "w": float(w)}) + "\n"
            for q, t, w in zip(self.query, self.target, self.weight)
        )

    @classmethod
    def from_jsonl(cls, text, image_size):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(
            [r["q"] for r in rows], [r["t"] for r in rows], [r["w"] for r in rows], image_size
        )


def decode_matches(c, u, patch=PATCH_SIZE):
    """Turn class/offset tensors into semi-dense matches.

    Cells whose argmax is the no-match class emit nothing. The weight of a
    match is the cell's maximum class probability.
    """
    c = check_class_tensor(c)
    g = c.shape[0]
    u = check_offset_tensor(u, g)
    cls = np.argmax(c, axis=2)
    ii, jj = np.nonzero(cls != no_match_class(g))
    k = cls[ii, jj]
    query = np.stack([(ii + 0.5) * patch, (jj + 0.5) * patch], axis=1)
    target = np.stack([
        (k % g + 0.5 + u[ii, jj, 0]) * patch,
        (k // g + 0.5 + u[ii, jj, 1]) * patch,
    ], axis=1)
    return MatchSet(query, target, c[ii, jj, k], g * patch)


def similarity_score(c):
    """Sum of per-cell maximum probabilities over cells that found a match."""
    c = check_class_tensor(c)
    best = c.max(axis=2)
    matched = np.argmax(c, axis=2) != no_match_class(c.shape[0])
    return float(best[matched].sum())


def select_template(scores):
    """Index of the highest score; ties resolve to the lowest index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot select from an empty score list")
    return int(np.argmax(s))


def top_templates(scores, n):
    """The ``n`` best indices in descending score order (stable on ties)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot select from an empty score list")
    order = np.argsort(-s, kind="stable")
    return order[: min(n, s.size)].tolist()


def gt_class_and_offset(target_px, patch=PATCH_SIZE, grid=None, size=None):
    """Ground-truth class index and offset for a template pixel.

    Args:
        target_px: ``(u, v)`` in the template, or an ``(n, 2)`` array.
        patch: patch size in pixels.
        grid: patches per side ``G``; defaults to ``size // patch``.
        size: template size in pixels; defaults to ``grid * patch``.

    Returns:
        ``(class, offset)``; arrays when the input is batched.
    """
    if grid is None and size is None:
        raise ValueError("give grid or size")
    grid = int(grid if grid is not None else size // patch)
    size = size if size is not None else grid * patch
    t = np.asarray(target_px, dtype=np.float64)
    single = t.ndim == 1
    t = t.reshape(-1, 2)
    if np.any(t < 0) or np.any(t >= size):
        raise ValueError(f"target pixel outside the {size}px template")
    scaled = t / patch
    cell = np.floor(scaled)
    cls = (cell[:, 1] * grid + cell[:, 0]).astype(np.int64)
    offset = scaled - cell - 0.5
    if single:
        return int(cls[0]), offset[0]
    return cls, offset


@dataclass(eq=False)
class GroundTruthMatches:
    """Per-cell labels produced by :func:`gt_correspondences`."""

    matches: MatchSet
    classes: np.ndarray  # (G, G) int, no-match = G*G
    offsets: np.ndarray  # (G, G, 2), zero on unmatched cells
    on_object: np.ndarray  # (G, G) bool, the query patch centre hits the object
    points: np.ndarray  # (G, G, 3) model-frame surface points (nan off-object)


def query_cell_centers(grid, patch=PATCH_SIZE):
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.stack([(ii + 0.5) * patch, (jj + 0.5) * patch], axis=-1)


def gt_correspondences(mesh, query_render, template, patch=PATCH_SIZE, tol=OCCLUSION_TOL):
    """Project the mesh into query and template views to label every cell.

    For each query patch centre on the object the visible surface point is
    recovered from the query view and projected into the template. The cell
    becomes no-match when the centre misses the object, the projection leaves
    the template, or the template sees a different surface there (depth test
    with tolerance ``tol`` meters).

    Args:
        mesh: the object mesh.
        query_render: query view rendered by :func:`~corrpose.templates.rasterize`.
        template: template view (a :class:`~corrpose.templates.Template`).
    """
    size_q = query_render.depth.shape[1]
    size_t = template.size
    grid = size_q // patch
    nomatch = no_match_class(grid)
    centers = query_cell_centers(grid, patch).reshape(-1, 2)

    dq = surface_depth(query_render, mesh, centers)
    on = dq > 0
    points = np.full((centers.shape[0], 3), np.nan)
    points[on] = backproject_depths(query_render.pose, query_render.intrinsics, centers[on], dq[on])

    classes = np.full(centers.shape[0], nomatch, dtype=np.int64)
    offsets = np.zeros((centers.shape[0], 2))
    idx = np.flatnonzero(on)
    if idx.size:
        cam_t = template.pose.apply(points[idx])
        front = cam_t[:, 2] > 1e-9
        idx, cam_t = idx[front], cam_t[front]
        tgt = project(template.pose, template.intrinsics, points[idx])
        inframe = np.all((tgt >= 0) & (tgt < size_t), axis=1)
        idx, cam_t, tgt = idx[inframe], cam_t[inframe], tgt[inframe]
        dt = surface_depth(template, mesh, tgt)
        visible = (dt > 0) & (np.abs(dt - cam_t[:, 2]) <= tol)
        idx, tgt = idx[visible], tgt[visible]
        if idx.size:
            cls, off = gt_class_and_offset(tgt, patch, size=size_t, grid=size_t // patch)
            classes[idx] = cls
            offsets[idx] = off

    matched = classes != nomatch
    g_t = size_t // patch
    tgt_px = np.stack([
        (classes % g_t + 0.5 + offsets[:, 0]) * patch,
        (classes // g_t + 0.5 + offsets[:, 1]) * patch,
    ], axis=1)
    ms = MatchSet(centers[matched], tgt_px[matched], np.ones(int(matched.sum())), size_q)
    return GroundTruthMatches(
        matches=ms,
        classes=classes.reshape(grid, grid),
        offsets=offsets.reshape(grid, grid, 2),
        on_object=on.reshape(grid, grid),
        points=points.reshape(grid, grid, 3),
    )


def matches_to_2d3d(matches, template):
    """Lift template-side pixels to model-frame points via template depth.

    Returns ``(points3d, points2d, weights)`` for matches whose target lands
    on the rendered object.
    """
    d = sample_depth(template.depth, matches.target)
    ok = d > 0
    pts3d = backproject_depths(template.pose, template.intrinsics, matches.target[ok], d[ok])
    return pts3d, matches.query[ok], matches.weight[ok]
