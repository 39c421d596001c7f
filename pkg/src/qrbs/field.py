"""Canonical SDF and colour lattices, density conversion, volume rendering and mesh extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from skimage.measure import marching_cubes

from .lattice import cell_coords, lattice_nodes, trilinear
from .mesh import TriangleMesh


def _check_box(res, lo, hi):
    if len(res) != 3 or min(res) < 2:
        raise ValueError("grid resolution must be >= 2 per axis")
    if np.any(np.asarray(hi) <= np.asarray(lo)):
        raise ValueError("grid bounds must satisfy lo < hi per axis")


@dataclass
class SDFGrid:
    """Signed distances (negative inside) at lattice nodes over an axis-aligned box."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.values.ndim != 3:
            raise ValueError("SDF grid must be 3-D")
        _check_box(self.values.shape, self.lo, self.hi)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SDF grid has non-finite values")

    @property
    def resolution(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.resolution) - 1)

    @classmethod
    def from_function(cls, fn: Callable, lo, hi, resolution) -> "SDFGrid":
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        nodes = lattice_nodes(np.asarray(lo, float), np.asarray(hi, float), res)
        return cls(np.asarray(fn(nodes.reshape(-1, 3))).reshape(res), lo, hi)

    @classmethod
    def sphere(cls, radius=1.0, center=(0, 0, 0), lo=(-1.2,) * 3, hi=(1.2,) * 3, resolution=64) -> "SDFGrid":
        c = np.asarray(center, dtype=np.float64)
        return cls.from_function(lambda p: np.linalg.norm(p - c, axis=1) - radius, lo, hi, resolution)

    def __call__(self, points) -> np.ndarray:
        """Trilinear lookup; outside the box, the clamped value plus distance to the box."""
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        inside = np.clip(P, self.lo, self.hi)
        return trilinear(self.values, P, self.lo, self.hi) + np.linalg.norm(P - inside, axis=1)

    def gradient(self, points) -> np.ndarray:
        """Analytic gradient of the trilinear interpolant (inside the box)."""
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        i0, f = cell_coords(P, self.lo, self.hi, self.resolution)
        h = self.spacing
        g = np.zeros_like(P)
        v = self.values
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c = v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                    wx = f[:, 0] if dx else 1 - f[:, 0]
                    wy = f[:, 1] if dy else 1 - f[:, 1]
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    sx, sy, sz = (1 if dx else -1), (1 if dy else -1), (1 if dz else -1)
                    g[:, 0] += c * sx * wy * wz
                    g[:, 1] += c * wx * sy * wz
                    g[:, 2] += c * wx * wy * sz
        return g / h

    def save(self, path) -> None:
        _save_grid(path, b"SDF1", self.values[..., None], self.lo, self.hi)

    @classmethod
    def load(cls, path) -> "SDFGrid":
        vals, lo, hi = _load_grid(path, b"SDF1", 1)
        return cls(vals[..., 0], lo, hi)


@dataclass
class ColorGrid:
    """RGB in [0, 1] at the nodes of a lattice shaped like the SDF grid."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.values.ndim != 4 or self.values.shape[3] != 3:
            raise ValueError("colour grid must be (Rx, Ry, Rz, 3)")
        _check_box(self.values.shape[:3], self.lo, self.hi)

    @classmethod
    def constant(cls, rgb, lo, hi, resolution=8) -> "ColorGrid":
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        return cls(np.broadcast_to(np.asarray(rgb, dtype=np.float64), res + (3,)).copy(), lo, hi)

    def __call__(self, points) -> np.ndarray:
        return np.clip(trilinear(self.values, np.atleast_2d(points), self.lo, self.hi), 0.0, 1.0)

    def save(self, path) -> None:
        _save_grid(path, b"COL1", self.values, self.lo, self.hi)

    @classmethod
    def load(cls, path) -> "ColorGrid":
        vals, lo, hi = _load_grid(path, b"COL1", 3)
        return cls(vals, lo, hi)


def _save_grid(path, magic, values, lo, hi):
    res = values.shape[:3]
    # x-fastest order means Fortran order over the three spatial axes
    payload = np.ascontiguousarray(np.transpose(values, (2, 1, 0, 3)), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<3I", *res))
        fh.write(struct.pack("<6d", *lo, *hi))
        fh.write(payload.tobytes())


def _load_grid(path, magic, channels):
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    res = struct.unpack_from("<3I", data, 4)
    b = struct.unpack_from("<6d", data, 16)
    n = res[0] * res[1] * res[2] * channels
    payload = np.frombuffer(data, dtype="<f4", count=n, offset=64)
    if len(data) != 64 + 4 * n:
        raise ValueError(f"{path}: payload size does not match header")
    vals = payload.reshape(res[2], res[1], res[0], channels).transpose(2, 1, 0, 3)
    return vals.astype(np.float64), np.array(b[:3]), np.array(b[3:])


# ---------------------------------------------------------------------------
# density and rendering
# ---------------------------------------------------------------------------


def laplace_cdf(u, beta):
    u = np.asarray(u, dtype=np.float64)
    e = 0.5 * np.exp(-np.abs(u) / beta)
    return np.where(u <= 0, e, 1.0 - e)


def density(s, beta: float):
    """Laplace CDF of the negated signed distance: 1/2 on the surface, 1 deep inside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return laplace_cdf(-np.asarray(s, dtype=np.float64), beta)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    frame: int = 0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit")
        if not (0 <= self.near < self.far):
            raise ValueError("ray interval must satisfy 0 <= near < far")


@dataclass
class RenderConfig:
    """``density_scale`` multiplies the CDF; None means 1/beta."""

    n_samples: int = 64
    beta: float = 1e-3
    density_scale: Optional[float] = None
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def sigma_scale(self) -> float:
        return 1.0 / self.beta if self.density_scale is None else self.density_scale


def sample_depths(near, far, n, rng: Optional[np.random.Generator]):
    """(R, n) stratified depths; ``rng`` None means bin midpoints."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = np.full((len(near), n), 0.5) if rng is None else rng.random((len(near), n))
    step = (far - near)[:, None] / n
    return near[:, None] + (np.arange(n)[None] + u) * step


def composite(sigma, depths, far, return_transmittance: bool = False):
    """Front-to-back alpha compositing; returns the per-sample contributions tau.

    With ``return_transmittance`` also returns the light left after the last
    sample.  ``1 - transmittance`` equals ``tau.sum(1)`` up to rounding but,
    unlike the float sum, never exceeds 1.
    """
    delta = np.diff(np.concatenate([depths, np.asarray(far, dtype=np.float64).reshape(-1, 1)], axis=1), axis=1)
    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.cumprod(np.concatenate([np.ones((len(alpha), 1)), 1.0 - alpha], axis=1), axis=1)
    tau = alpha * trans[:, :-1]
    return (tau, trans[:, -1]) if return_transmittance else tau


def render_rays(sdf, color, rays, cfg: RenderConfig, deform: Optional[Callable] = None):
    """Render a list of rays; returns (R, 3) rgb and (R,) opacity.

    ``sdf`` and ``color`` are callables on (N, 3) canonical points (grids
    qualify).  ``deform`` maps observation-space samples to canonical space.
    """
    rays = list(rays)
    if not rays:
        return np.zeros((0, 3)), np.zeros(0)
    O = np.stack([r.origin for r in rays])
    D = np.stack([r.direction for r in rays])
    near = np.array([r.near for r in rays])
    far = np.array([r.far for r in rays])
    rng = np.random.default_rng(cfg.seed) if cfg.stratified else None
    t = sample_depths(near, far, cfg.n_samples, rng)
    X = (O[:, None, :] + t[..., None] * D[:, None, :]).reshape(-1, 3)
    Xc = deform(X) if deform is not None else X
    sigma = cfg.sigma_scale * density(np.asarray(sdf(Xc)), cfg.beta).reshape(t.shape)
    tau, left = composite(sigma, t, far, return_transmittance=True)
    c = np.asarray(color(Xc)).reshape(t.shape + (3,))
    rgb = np.einsum("rn,rnc->rc", tau, c)
    return np.clip(rgb, 0.0, 1.0), 1.0 - left


def render_ray(sdf, color, ray: Ray, cfg: RenderConfig, deform: Optional[Callable] = None):
    rgb, op = render_rays(sdf, color, [ray], cfg, deform)
    return rgb[0], float(op[0])


@dataclass
class PinholeCamera:
    """Looks down +z of its own frame; ``cam_to_world`` is a 3x4 matrix."""

    width: int
    height: int
    focal: float
    cam_to_world: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def rays(self, near: float, far: float) -> list:
        j, i = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack([(i + 0.5 - self.width / 2) / self.focal, (j + 0.5 - self.height / 2) / self.focal,
                      np.ones_like(i, dtype=np.float64)], axis=-1).reshape(-1, 3)
        M = np.asarray(self.cam_to_world, dtype=np.float64)
        d = d @ M[:, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return [Ray(M[:, 3], di, near, far) for di in d]


def render_image(sdf, color, camera: PinholeCamera, cfg: RenderConfig, near: float, far: float, deform=None):
    rgb, op = render_rays(sdf, color, camera.rays(near, far), cfg, deform)
    return rgb.reshape(camera.height, camera.width, 3), op.reshape(camera.height, camera.width)


def write_ppm(path, rgb, comment: Optional[str] = None) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        if comment:
            fh.write(b"# " + comment.encode("ascii") + b"\n")
        fh.write(b"%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def write_opacity_map(path, opacity) -> None:
    """PCD1-style header (magic, u32 count) followed by u32 height, width and float32 values."""
    op = np.asarray(opacity, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"PCD1")
        fh.write(struct.pack("<3I", op.size, *op.shape))
        fh.write(op.tobytes())


def read_opacity_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != b"PCD1":
        raise ValueError(f"{path}: bad magic")
    n, h, w = struct.unpack_from("<3I", data, 4)
    return np.frombuffer(data, dtype="<f4", count=n, offset=16).reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def extract_mesh(sdf: SDFGrid, iso: float = 0.0) -> TriangleMesh:
    """Iso-surface of the grid with normals facing increasing SDF; empty when there is no crossing."""
    v = sdf.values
    if not (v.min() < iso < v.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # with skimage's winding, "descent" yields normals pointing toward larger values
    verts, faces, _, _ = marching_cubes(v, level=iso, spacing=tuple(sdf.spacing), gradient_direction="descent",
                                        allow_degenerate=False)
    verts = np.clip(verts + sdf.lo, sdf.lo, sdf.hi)
    return TriangleMesh(verts.astype(np.float64), faces.astype(np.int64))
