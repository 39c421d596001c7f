"""Triangle meshes, point clouds, OBJ / PCD1 I/O and surface sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

PathLike = Union[str, Path]

PCD_MAGIC = b"PCD1"


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class EmptyMeshError(MeshError):
    pass


class DisconnectedComponentError(MeshError):
    """Raised when geodesic endpoints lie on different edge-connected parts."""


class ZeroAreaError(MeshError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        nv = len(self.vertices)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= nv:
                raise MeshError(
                    f"face index out of range (vertex count {nv}, max index {self.faces.max()})"
                )
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face with repeated vertex index")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinate")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != nv:
                raise MeshError("color count does not match vertex count")
            if np.any(self.colors < 0) or np.any(self.colors > 1):
                raise MeshError("vertex colors must lie in [0, 1]")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        v = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise EmptyMeshError("empty mesh has no bounding box")
        return self.vertices.min(0), self.vertices.max(0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (E, 2) index pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def transformed(self, points_fn) -> "TriangleMesh":
        return TriangleMesh(points_fn(self.vertices), self.faces.copy(), self.colors)


@dataclass
class PointCloud:
    points: np.ndarray
    seed: Optional[int] = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise MeshError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


def merge_meshes(meshes) -> TriangleMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.n_vertices
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------------------
# OBJ subset: "v x y z [r g b]" and triangular "f a b c" (1-based)
# ---------------------------------------------------------------------------

_IGNORED_OBJ = {"o", "g", "s", "usemtl", "mtllib"}


def load_mesh(path: PathLike) -> TriangleMesh:
    path = Path(path)
    verts, cols, faces = [], [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kind = tok[0]
            if kind == "v":
                if len(tok) not in (4, 7):
                    raise ObjParseError(path, lineno, "vertex line needs 3 or 6 numbers")
                try:
                    nums = [float(t) for t in tok[1:]]
                except ValueError:
                    raise ObjParseError(path, lineno, "malformed number") from None
                verts.append(nums[:3])
                cols.append(nums[3:] if len(nums) == 6 else None)
            elif kind == "f":
                if len(tok) != 4:
                    raise ObjParseError(path, lineno, "only triangular faces are supported")
                try:
                    idx = [int(t.split("/")[0]) for t in tok[1:]]
                except ValueError:
                    raise ObjParseError(path, lineno, "malformed face index") from None
                for i in idx:
                    if i < 1 or i > len(verts):
                        raise ObjParseError(
                            path, lineno, f"vertex index {i} out of range (have {len(verts)})"
                        )
                if len(set(idx)) != 3:
                    raise ObjParseError(path, lineno, "face with repeated vertex index")
                faces.append([i - 1 for i in idx])
            elif kind in _IGNORED_OBJ:
                continue
            else:
                raise ObjParseError(path, lineno, f"unsupported directive {kind!r}")
    has_col = [c is not None for c in cols]
    if any(has_col) and not all(has_col):
        raise MeshError(f"{path}: vertex colors must be given for all vertices or none")
    colors = np.array(cols, dtype=np.float64) if cols and all(has_col) else None
    return TriangleMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        colors,
    )


def save_mesh(mesh: TriangleMesh, path: PathLike, comment: Optional[str] = None) -> None:
    lines = [f"# {c}" for c in (comment.splitlines() if comment else [])]
    if mesh.colors is None:
        for v in mesh.vertices:
            lines.append("v %.17g %.17g %.17g" % tuple(v))
    else:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append("v %.17g %.17g %.17g %.9g %.9g %.9g" % (*v, *c))
    for f in mesh.faces:
        lines.append("f %d %d %d" % tuple(f + 1))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


# ---------------------------------------------------------------------------
# Binary point clouds: b"PCD1", u32 count, count*3 float32 (little endian)
# ---------------------------------------------------------------------------


def write_pcd(path: PathLike, points) -> None:
    pts = np.asarray(points.points if isinstance(points, PointCloud) else points)
    pts = pts.reshape(-1, 3).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(PCD_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_pcd(path: PathLike) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != PCD_MAGIC:
        raise MeshError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack("<I", data[4:8])
    payload = np.frombuffer(data[8:], dtype="<f4")
    if payload.size != 3 * count:
        raise MeshError(f"{path}: payload has {payload.size} floats, header says {3 * count}")
    return PointCloud(payload.reshape(count, 3).astype(np.float64))


# ---------------------------------------------------------------------------
# Queries and sampling
# ---------------------------------------------------------------------------


def nearest_vertices(mesh: TriangleMesh, queries) -> np.ndarray:
    """Index of the closest vertex for each query; exact ties go to the smaller index."""
    if mesh.n_vertices == 0:
        raise EmptyMeshError("nearest-vertex query on an empty mesh")
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    tree = cKDTree(mesh.vertices)
    dist, idx = tree.query(q, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    # cKDTree does not promise a tie order, so re-resolve among near-equal candidates
    radius = dist * (1 + 1e-9) + 1e-12
    cand = tree.query_ball_point(q, radius)
    for n, c in enumerate(cand):
        if len(c) > 1:
            c = np.asarray(c)
            d2 = np.sum((mesh.vertices[c] - q[n]) ** 2, axis=1)
            best = c[d2 == d2.min()]
            idx[n] = best.min()
    return idx


def nearest_vertex(mesh: TriangleMesh, query) -> int:
    return int(nearest_vertices(mesh, np.asarray(query, dtype=np.float64).reshape(1, 3))[0])


def sample_points_uniform(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform samples on the surface; degenerate faces are never chosen."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas() if mesh.n_faces else np.zeros(0)
    total = areas.sum()
    if not total > 0:
        raise ZeroAreaError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[face_idx]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return PointCloud(pts, seed=seed)


def sample_points_with_faces(mesh: TriangleMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`sample_points_uniform` but also returns the face each point lies on."""
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ZeroAreaError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[face_idx]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return pts, face_idx


# ---------------------------------------------------------------------------
# Primitive builders (used by tests, benchmarks and the fitting initialiser)
# ---------------------------------------------------------------------------


def icosphere(subdivisions: int = 0, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    f = [list(x) for x in faces]
    for _ in range(subdivisions):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return TriangleMesh(np.array(v) * radius, np.array(f, dtype=np.int64))


def grid_rectangle(width: float, height: float, nx: int, ny: int) -> TriangleMesh:
    """Flat rectangle [0,width]x[0,height] in the z=0 plane, split into 2*nx*ny triangles."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    faces = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b = (i + 1) * (ny + 1) + j
            faces.append([a, b, b + 1])
            faces.append([a, b + 1, a + 1])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def box_mesh(center, size, divisions: int = 1) -> TriangleMesh:
    """Closed axis-aligned box with outward-facing triangles; each face split into a grid."""
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(size, dtype=np.float64) / 2.0
    n = max(1, int(divisions))
    verts, faces = [], []
    index: dict = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    g = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, w = [a for a in range(3) if a != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u] = g[i + di]
                        p[w] = g[j + dj]
                        quad.append(vid(center + p * half))
                    a, b, c, d = quad
                    tri = [[a, b, c], [a, c, d]]
                    # (u, w, axis) right-handed iff axis order is cyclic
                    cyclic = (u, w) in ((1, 2), (2, 0), (0, 1))
                    if (sign > 0) != cyclic:
                        tri = [[a, c, b], [a, d, c]]
                    faces += tri
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def cylinder_mesh(radius: float, length: float, n_around: int = 32, n_along: int = 16,
                  axis: int = 0, caps: bool = True) -> TriangleMesh:
    """Cylinder centred at the origin along ``axis`` with optional fan caps."""
    ang = np.linspace(0.0, 2 * np.pi, n_around, endpoint=False)
    s = np.linspace(-length / 2, length / 2, n_along + 1)
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius
    verts = []
    for x in s:
        for c, d in ring:
            verts.append([x, c, d])
    faces = []
    for i in range(n_along):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c = a + n_around
            d = b + n_around
            faces += [[a, b, d], [a, d, c]]
    if caps:
        c0 = len(verts)
        verts.append([s[0], 0.0, 0.0])
        c1 = len(verts)
        verts.append([s[-1], 0.0, 0.0])
        top = n_along * n_around
        for j in range(n_around):
            faces.append([c0, (j + 1) % n_around, j])
            faces.append([c1, top + j, top + (j + 1) % n_around])
    v = np.array(verts, dtype=np.float64)
    perm = {0: [0, 1, 2], 1: [2, 0, 1], 2: [1, 2, 0]}[axis]
    return TriangleMesh(v[:, perm], np.array(faces, dtype=np.int64))
