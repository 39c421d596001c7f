"""Trilinear interpolation on regular axis-aligned lattices (numpy)."""

from __future__ import annotations

import numpy as np


def cell_coords(points, lo, hi, res):
    """Integer base corner and fractional offsets of points on a lattice.

    Nodes sit at ``linspace(lo, hi, res)`` per axis; points outside the box
    are clamped onto it.
    """
    p = np.asarray(points, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    res = np.asarray(res, dtype=np.int64)
    u = (p - lo) / (hi - lo) * (res - 1)
    u = np.clip(u, 0.0, res - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    return i0, u - i0


def trilinear(values, points, lo, hi):
    """Sample ``values`` of shape (Rx, Ry, Rz, ...) at (N, 3) points."""
    values = np.asarray(values)
    res = values.shape[:3]
    i0, f = cell_coords(points, lo, hi, res)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    x, y, z = i0[:, 0], i0[:, 1], i0[:, 2]
    extra = (slice(None),) + (None,) * (values.ndim - 3)
    out = 0.0
    for dx in (0, 1):
        wx = fx if dx else 1 - fx
        for dy in (0, 1):
            wy = fy if dy else 1 - fy
            for dz in (0, 1):
                wz = fz if dz else 1 - fz
                out = out + (wx * wy * wz)[extra] * values[x + dx, y + dy, z + dz]
    return out


def lattice_nodes(lo, hi, res):
    """(Rx, Ry, Rz, 3) node positions."""
    axes = [np.linspace(lo[k], hi[k], res[k]) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X, Y, Z], axis=-1)
