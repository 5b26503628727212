"""Triangle meshes: container, file I/O, primitives and symmetry discovery.

Meshes are stored in meters. BOP-style model files and ``models_info``
entries are in millimeters; load them with ``scale=1e-3`` (the JSON
metadata read here already uses meters, see :func:`load_metadata`).
"""

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.distance import pdist

from .geometry import Pose, farthest_point_sample, kabsch
from .validation import check_points


def _max_pairwise_distance(vertices):
    pts = np.unique(vertices, axis=0)
    if pts.shape[0] > 64:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(pdist(pts).max()) if pts.shape[0] > 1 else 0.0


@dataclass(eq=False)
class Mesh:
    """Triangle mesh in the model frame (meters).

    ``diameter`` defaults to the maximum pairwise vertex distance and
    ``symmetries`` always contains the identity as its first entry.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float | None = None
    symmetries: list = field(default_factory=list)
    name: str = "mesh"

    def __post_init__(self):
        self.vertices = check_points(self.vertices, name="vertices", min_count=3)
        tris = np.asarray(self.triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3 or tris.shape[0] == 0:
            raise ValueError(f"triangles must have shape (m, 3), got {tris.shape}")
        if tris.min() < 0 or tris.max() >= self.vertices.shape[0]:
            raise ValueError("triangle index out of range")
        self.triangles = tris
        if self.diameter is None:
            self.diameter = _max_pairwise_distance(self.vertices)
        self.diameter = float(self.diameter)
        if not self.diameter > 0:
            raise ValueError("mesh diameter must be positive")
        syms = [s if isinstance(s, Pose) else Pose.from_matrix(s) for s in self.symmetries]
        if not any(s.allclose(Pose.identity(), atol=1e-9) for s in syms):
            syms.insert(0, Pose.identity())
        self.symmetries = syms

    @property
    def triangle_vertices(self):
        """``(m, 3, 3)`` array of corner coordinates."""
        return self.vertices[self.triangles]

    def sample_points(self, count=1000):
        """Deterministic farthest-point subset of the vertices."""
        return farthest_point_sample(self.vertices, count)


# --------------------------------------------------------------------------
# file formats


def load_obj(path):
    """Read ``v`` and ``f`` records of an ASCII OBJ file.

    Faces with more than three corners are fan-triangulated; texture and
    normal indices (``f 1/2/3``) are ignored.
    """
    vertices, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], a, b])
    return np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def save_obj(path, vertices, triangles):
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in triangles:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def load_ply(path):
    """Read a binary little-endian PLY with vertex xyz and face index lists."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        elements = []
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                elements[-1][2].append(tokens[1:])
            elif tokens[0] == "end_header":
                break
        if fmt != "binary_little_endian":
            raise ValueError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")

        vertices = faces = None
        for name, count, props in elements:
            if name == "vertex":
                if any(p[0] == "list" for p in props):
                    raise ValueError(f"{path}: list properties on vertices are not supported")
                dtype = np.dtype([(p[-1], "<" + _PLY_TYPES[p[0]]) for p in props])
                data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
                vertices = np.stack([data[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
            elif name == "face":
                faces = []
                for _ in range(count):
                    tri = None
                    for p in props:
                        if p[0] == "list":
                            cfmt, ifmt = "<" + _PLY_TYPES[p[1]], "<" + _PLY_TYPES[p[2]]
                            (n,) = struct.unpack(cfmt, fh.read(struct.calcsize(cfmt)))
                            vals = struct.unpack("<" + ifmt[1] * n, fh.read(struct.calcsize(ifmt) * n))
                            if p[-1] in ("vertex_indices", "vertex_index"):
                                tri = vals
                        else:
                            fh.read(struct.calcsize("<" + _PLY_TYPES[p[0]]))
                    for a, b in zip(tri[1:-1], tri[2:]):
                        faces.append([tri[0], a, b])
                faces = np.asarray(faces, dtype=np.int64)
            else:
                stride = sum(struct.calcsize("<" + _PLY_TYPES[p[0]]) for p in props)
                fh.read(stride * count)
    if vertices is None or faces is None:
        raise ValueError(f"{path}: PLY needs vertex and face elements")
    return vertices, faces


def save_ply(path, vertices, triangles):
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(vertices, dtype="<f4").tobytes())
        for f in triangles:
            fh.write(struct.pack("<B3i", 3, *(int(i) for i in f)))


def load_metadata(path):
    """Read ``diameter_m`` and ``symmetries_discrete`` (4x4 row-major lists)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    diameter = data.get("diameter_m")
    syms = [Pose.from_matrix(np.asarray(m, dtype=np.float64).reshape(4, 4))
            for m in data.get("symmetries_discrete", [])]
    return diameter, syms


def save_metadata(path, mesh):
    data = {
        "diameter_m": mesh.diameter,
        "symmetries_discrete": [s.matrix.reshape(-1).tolist() for s in mesh.symmetries],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=1)


def load_mesh(path, metadata=None, scale=1.0):
    """Load an OBJ or PLY mesh plus its optional JSON metadata sidecar.

    Args:
        path: ``.obj`` or ``.ply`` file.
        metadata: JSON metadata path. Defaults to ``<path stem>.json`` next to
            the mesh when that file exists.
        scale: factor applied to vertex coordinates (``1e-3`` for mm models).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        vertices, faces = load_obj(path)
    elif suffix == ".ply":
        vertices, faces = load_ply(path)
    else:
        raise ValueError(f"{path}: unsupported mesh format {suffix!r}")
    diameter, syms = None, []
    meta_path = Path(metadata) if metadata else path.with_suffix(".json")
    if metadata or meta_path.exists():
        diameter, syms = load_metadata(meta_path)
    return Mesh(vertices * scale, faces, diameter=diameter, symmetries=syms, name=path.stem)


# --------------------------------------------------------------------------
# primitives


def icosahedron():
    """Unit icosahedron with poles on the z axis (Blender's icosphere layout).

    Returns 12 vertices (top pole, upper ring of five, lower ring of five,
    bottom pole) and 20 outward-oriented faces.
    """
    z = 1.0 / np.sqrt(5.0)
    rho = 2.0 / np.sqrt(5.0)
    verts = [[0.0, 0.0, 1.0]]
    for k in range(5):
        a = np.deg2rad(72.0 * k)
        verts.append([rho * np.cos(a), rho * np.sin(a), z])
    for k in range(5):
        a = np.deg2rad(36.0 + 72.0 * k)
        verts.append([rho * np.cos(a), rho * np.sin(a), -z])
    verts.append([0.0, 0.0, -1.0])
    faces = []
    for k in range(5):
        u0, u1 = 1 + k, 1 + (k + 1) % 5
        l0, l1 = 6 + k, 6 + (k + 1) % 5
        faces += [[0, u0, u1], [u0, l0, u1], [u1, l0, l1], [11, l1, l0]]
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def subdivide(vertices, faces):
    """Split every triangle into four, pushing new vertices onto the unit sphere.

    New vertices are appended in sorted order of the edges they bisect, so
    the output is deterministic.
    """
    edges = sorted({tuple(sorted((int(f[a]), int(f[b]))))
                    for f in faces for a, b in ((0, 1), (1, 2), (2, 0))})
    index = {}
    new = [np.asarray(vertices, dtype=np.float64)]
    n = len(vertices)
    mids = []
    for i, (a, b) in enumerate(edges):
        m = vertices[a] + vertices[b]
        mids.append(m / np.linalg.norm(m))
        index[(a, b)] = n + i
    new.append(np.asarray(mids))

    def mid(a, b):
        return index[(min(a, b), max(a, b))]

    out = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return np.concatenate(new), np.asarray(out, dtype=np.int64)


def find_rotational_symmetries(vertices, atol=1e-6):
    """All proper rotations about the origin that map the vertex set onto itself.

    Brute force: fix two non-collinear reference vertices, try every image
    pair with matching norms and angle, and keep the rotations that permute
    the full vertex set. Intended for small, origin-centred primitives.
    """
    pts = check_points(vertices)
    norms = np.linalg.norm(pts, axis=1)
    order = np.argsort(-norms, kind="stable")
    a = pts[order[0]]
    b = next((pts[i] for i in order[1:]
              if np.linalg.norm(np.cross(a, pts[i])) > 1e-3 * norms[order[0]] ** 2), None)
    if b is None:
        return [Pose.identity()]
    tree = cKDTree(pts)
    found = []
    cand_a = np.flatnonzero(np.abs(norms - np.linalg.norm(a)) < atol)
    cand_b = np.flatnonzero(np.abs(norms - np.linalg.norm(b)) < atol)
    src = np.stack([a, b, np.cross(a, b)])
    for i, j in itertools.product(cand_a, cand_b):
        pa, pb = pts[i], pts[j]
        if abs(pa @ pb - a @ b) > atol or np.linalg.norm(np.cross(pa, pb)) < 1e-12:
            continue
        dst = np.stack([pa, pb, np.cross(pa, pb)])
        rot = kabsch(np.vstack([src, np.zeros(3)]), np.vstack([dst, np.zeros(3)])).rotation
        dist, _ = tree.query(pts @ rot.T)
        if np.all(dist < atol) and not any(np.allclose(rot, f, atol=1e-9) for f in found):
            found.append(rot)
    found.sort(key=lambda r: (not np.allclose(r, np.eye(3)), -np.trace(r)))
    return [Pose(r, np.zeros(3)) for r in found]


def make_cube(size=0.1, with_symmetries=True):
    """Axis-aligned cube centred at the origin (8 vertices, 12 triangles)."""
    h = size / 2.0
    verts = np.array(list(itertools.product((-h, h), repeat=3)), dtype=np.float64)
    faces = np.array([
        [0, 2, 1], [1, 2, 3],  # x = -h
        [4, 5, 6], [5, 7, 6],  # x = +h
        [0, 1, 4], [1, 5, 4],  # y = -h
        [2, 6, 3], [3, 6, 7],  # y = +h
        [0, 4, 2], [2, 4, 6],  # z = -h
        [1, 3, 5], [3, 7, 5],  # z = +h
    ])
    syms = find_rotational_symmetries(verts) if with_symmetries else []
    return Mesh(verts, faces, symmetries=syms, name="cube")


def make_icosphere(radius=0.05, subdivisions=1, with_symmetries=True):
    """Icosphere with the 60 icosahedral rotations as its symmetry list."""
    verts, faces = icosahedron()
    base = verts
    for _ in range(subdivisions):
        verts, faces = subdivide(verts, faces)
    syms = find_rotational_symmetries(base) if with_symmetries else []
    return Mesh(verts * radius, faces, symmetries=syms, name="icosphere")


def make_l_bracket(long_arm=0.12, short_arm=0.07, thickness=0.025, depth=0.04):
    """Asymmetric L-shaped prism, centred on its bounding box.

    Unequal arms leave no proper rotational symmetry besides the identity.
    """
    outline = np.array([
        [0.0, 0.0], [long_arm, 0.0], [long_arm, thickness],
        [thickness, thickness], [thickness, short_arm], [0.0, short_arm],
    ])
    n = len(outline)
    verts = np.vstack([np.c_[outline, np.zeros(n)], np.c_[outline, np.full(n, depth)]])
    cap = [[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]]
    faces = [[a, c, b] for a, b, c in cap] + [[a + n, b + n, c + n] for a, b, c in cap]
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, j + n], [i, j + n, i + n]]
    verts -= (verts.max(axis=0) + verts.min(axis=0)) / 2.0
    return Mesh(verts, np.asarray(faces), name="l_bracket")


def make_plane(width=0.1, height=0.1):
    """Two-triangle square in the z = 0 plane facing -z."""
    w, h = width / 2.0, height / 2.0
    verts = np.array([[-w, -h, 0.0], [w, -h, 0.0], [w, h, 0.0], [-w, h, 0.0]])
    return Mesh(verts, np.array([[0, 1, 2], [0, 2, 3]]), name="plane")


PRIMITIVES = {
    "cube": make_cube,
    "icosphere": make_icosphere,
    "l_bracket": make_l_bracket,
}
