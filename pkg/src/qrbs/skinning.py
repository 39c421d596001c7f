"""Gaussian-bone skinning, geodesic point assignment and quasi-rigid blend skinning.

Bones are Gaussians placed near part centroids.  A point's weights are a
temperature-sharpened softmax over negative Mahalanobis distances plus a
learned delta field.  Geodesic point assignment labels every surface point as
belonging to one bone or to the joint between two bones; the sparse skinning
loss then penalises weight mass outside the assigned bones.  Deformation blends
the per-bone dual quaternions with those weights.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2

from .dualquat import (
    RigidTransform,
    dq_apply_array,
    dq_blend_array,
    dq_conj,
    dq_to_matrix,
    quat_from_matrix,
    quat_to_matrix,
)
from .geodesic import ExactGeodesic
from .lattice import trilinear
from .mesh import DisconnectedComponentError, PointCloud, TriangleMesh, nearest_vertices

BLEND_MODES = ("dq", "lbs", "rigid")


@dataclass
class BoneSet:
    centers: np.ndarray
    orientations: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        B = len(self.centers)
        if B < 1:
            raise ValueError("a rig needs at least one bone")
        self.orientations = np.asarray(self.orientations, dtype=np.float64).reshape(B, 3, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(B, 3)
        eye = np.eye(3)
        for V in self.orientations:
            if np.abs(V.T @ V - eye).max() > 1e-6 or abs(np.linalg.det(V) - 1) > 1e-6:
                raise ValueError("bone orientation is not a rotation")
        if np.any(self.scales <= 0):
            raise ValueError("bone scales must be positive")

    @property
    def n_bones(self) -> int:
        return len(self.centers)

    @classmethod
    def isotropic(cls, centers, precision) -> "BoneSet":
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        B = len(centers)
        prec = np.broadcast_to(np.asarray(precision, dtype=np.float64).reshape(-1, 1), (B, 3))
        return cls(centers, np.repeat(np.eye(3)[None], B, 0), prec.copy())

    def transported(self, bone_dqs) -> "BoneSet":
        """Gaussians carried along by each bone's own motion."""
        M = dq_to_matrix(np.asarray(bone_dqs, dtype=np.float64))
        R, t = M[..., :3], M[..., 3]
        centers = np.einsum("bij,bj->bi", R, self.centers) + t
        orient = np.einsum("bij,bkj->bik", self.orientations, R)
        return BoneSet(centers, orient, self.scales.copy())

    def to_dict(self) -> dict:
        return {
            "B": self.n_bones,
            "bones": [
                {
                    "center": c.tolist(),
                    "orientation": quat_from_matrix(V).tolist(),
                    "scale": s.tolist(),
                }
                for c, V, s in zip(self.centers, self.orientations, self.scales)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoneSet":
        bones = d["bones"]
        if "B" in d and d["B"] != len(bones):
            raise ValueError("rig B does not match the number of bones")
        q = np.array([b["orientation"] for b in bones], dtype=np.float64)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return cls(
            [b["center"] for b in bones],
            quat_to_matrix(q),
            [b["scale"] for b in bones],
        )


@dataclass
class DeltaWeightField:
    """Per-bone trilinear lattice of additive logits over the canonical box."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or min(self.values.shape[1:]) < 2:
            raise ValueError("delta lattice must be (B, R, R, R) with R >= 2")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("delta lattice has non-finite values")
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("delta lattice bounds must satisfy lo < hi")

    @classmethod
    def zeros(cls, n_bones: int, lo, hi, resolution: int = 8) -> "DeltaWeightField":
        return cls(np.zeros((n_bones, resolution, resolution, resolution)), lo, hi)

    @property
    def n_bones(self) -> int:
        return self.values.shape[0]

    def evaluate(self, points) -> np.ndarray:
        """(N, B) logits at canonical points."""
        lat = np.moveaxis(self.values, 0, -1)
        return trilinear(lat, np.atleast_2d(points), self.lo, self.hi)

    def evaluate_per_bone(self, points_per_bone) -> np.ndarray:
        """(N, B) logits where bone b is looked up at ``points_per_bone[:, b]``."""
        P = np.asarray(points_per_bone, dtype=np.float64)
        out = np.empty(P.shape[:2])
        for b in range(self.n_bones):
            out[:, b] = trilinear(self.values[b], P[:, b], self.lo, self.hi)
        return out


@dataclass
class PoseState:
    """One frame's motion: per-bone dual quaternions plus root and camera transforms."""

    bone_dqs: np.ndarray
    root: RigidTransform = field(default_factory=RigidTransform.identity)
    cam: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        self.bone_dqs = np.asarray(self.bone_dqs, dtype=np.float64).reshape(-1, 8)
        n = np.linalg.norm(self.bone_dqs[:, :4], axis=1)
        if np.abs(n - 1).max() > 1e-9:
            raise ValueError("bone dual quaternions must be unit")
        if np.abs(np.sum(self.bone_dqs[:, :4] * self.bone_dqs[:, 4:], axis=1)).max() > 1e-9:
            raise ValueError("bone dual quaternion parts must be orthogonal")

    @classmethod
    def identity(cls, n_bones: int) -> "PoseState":
        q = np.zeros((n_bones, 8))
        q[:, 0] = 1.0
        return cls(q)

    @property
    def global_transform(self) -> RigidTransform:
        return self.cam.compose(self.root)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def mahalanobis(bones: BoneSet, X) -> np.ndarray:
    """Squared Mahalanobis distance of each point to each bone: (B,) or (N, B)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    d = X[:, None, :] - bones.centers[None]
    local = np.einsum("bij,nbj->nbi", bones.orientations, d)
    out = np.sum(bones.scales[None] * local**2, axis=-1)
    return out[0] if single else out


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def skin_weights(bones: BoneSet, X, delta: Optional[DeltaWeightField] = None, gamma: float = 1.0) -> np.ndarray:
    """softmax((-d_M + W_delta) / gamma), one simplex row per point."""
    if gamma <= 0:
        raise ValueError("temperature must be positive")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    logits = -mahalanobis(bones, X)
    if delta is not None:
        logits = logits + delta.evaluate(X)
    W = softmax(logits / gamma)
    return W[0] if single else W


def rigid_binarize(W) -> np.ndarray:
    """One-hot at the largest weight; ties go to the lowest bone index."""
    W = np.asarray(W, dtype=np.float64)
    out = np.zeros_like(W)
    idx = np.argmax(W, axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# geodesic point assignment
# ---------------------------------------------------------------------------

BRANCH_FALLBACK = 0
BRANCH_MAHALANOBIS = 1
BRANCH_JOINT = 2
BRANCH_GEODESIC = 3


def assign_point_branch(dM_i, dM_j, dG_i, dG_j, i, j, eta, zeta, B):
    """Assignment mask and the branch that produced it (1, 2 or 3)."""
    if i == j:
        raise ValueError("bones i and j must differ")
    M = np.zeros(B, dtype=np.int8)
    if dM_j == 0:
        # both points sit on bone centres: treat as joint
        M[i] = M[j] = 1
        return M, BRANCH_JOINT
    if dM_i / dM_j < 1 - eta:
        M[i] = 1
        return M, BRANCH_MAHALANOBIS
    lo = min(dG_i, dG_j)
    if lo == 0:
        M[i if dG_i <= dG_j else j] = 1
        return M, BRANCH_GEODESIC
    if abs(dG_i - dG_j) / lo < zeta:
        M[i] = M[j] = 1
        return M, BRANCH_JOINT
    M[i if dG_i <= dG_j else j] = 1
    return M, BRANCH_GEODESIC


def assign_point(dM_i, dM_j, dG_i, dG_j, i, j, eta, zeta, B) -> np.ndarray:
    return assign_point_branch(dM_i, dM_j, dG_i, dG_j, i, j, eta, zeta, B)[0]


@dataclass
class AssignmentResult:
    masks: np.ndarray  # (N, B) int8
    branches: np.ndarray  # (N,)
    bone_pairs: np.ndarray  # (N, 2) nearest / second-nearest bone
    dM: np.ndarray  # (N, 2)
    dG: np.ndarray  # (N, 2), nan where geodesics were unavailable
    fallback_count: int = 0

    def __len__(self):
        return len(self.masks)

    def branch_counts(self) -> dict:
        return {int(b): int(np.sum(self.branches == b)) for b in (0, 1, 2, 3)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["point", "bone_i", "bone_j", "dM_i", "dM_j", "dG_i", "dG_j", "branch", "M"])
            for n in range(len(self.masks)):
                w.writerow([
                    n,
                    int(self.bone_pairs[n, 0]),
                    int(self.bone_pairs[n, 1]),
                    repr(float(self.dM[n, 0])),
                    repr(float(self.dM[n, 1])),
                    repr(float(self.dG[n, 0])),
                    repr(float(self.dG[n, 1])),
                    int(self.branches[n]),
                    "".join(str(int(m)) for m in self.masks[n]),
                ])


class GeodesicFields:
    """Geodesic distance from each bone's anchor vertex to every mesh vertex.

    Geodesic distance is symmetric, so one propagation per bone answers the
    point-to-bone queries for any number of points.
    """

    def __init__(self, mesh: TriangleMesh, bones: BoneSet, solver: Optional[ExactGeodesic] = None):
        self.mesh = mesh
        self.solver = solver or ExactGeodesic(mesh)
        self.anchors = nearest_vertices(mesh, bones.centers)
        self.components = self.solver.components()
        self.fields = np.stack([self.solver.distances(int(a)) for a in self.anchors])

    def lookup(self, vertex_idx, bone_idx) -> np.ndarray:
        """Distances for (vertex, bone) pairs; nan where they are not edge-connected."""
        v = np.asarray(vertex_idx)
        b = np.asarray(bone_idx)
        d = self.fields[b, v]
        same = self.components[v] == self.components[self.anchors[b]]
        return np.where(same & np.isfinite(d), d, np.nan)


def assign_points(mesh: TriangleMesh, bones: BoneSet, points, eta: float = 0.2, zeta: float = 0.2,
                  fields: Optional[GeodesicFields] = None) -> AssignmentResult:
    """Run geodesic point assignment for every point.

    Points whose anchor vertex cannot reach a candidate bone's anchor along
    the surface fall back to the nearest bone by Mahalanobis distance.
    """
    P = points.points if isinstance(points, PointCloud) else np.atleast_2d(np.asarray(points, dtype=np.float64))
    N, B = len(P), bones.n_bones
    dM_all = mahalanobis(bones, P)
    masks = np.zeros((N, B), dtype=np.int8)
    branches = np.zeros(N, dtype=np.int64)
    if B == 1:
        masks[:, 0] = 1
        return AssignmentResult(masks, np.full(N, BRANCH_MAHALANOBIS), np.zeros((N, 2), np.int64),
                                np.stack([dM_all[:, 0], dM_all[:, 0]], 1), np.full((N, 2), np.nan))
    order = np.argsort(dM_all, axis=1, kind="stable")
    pairs = order[:, :2]
    dM = np.take_along_axis(dM_all, pairs, axis=1)
    if fields is None:
        fields = GeodesicFields(mesh, bones)
    Xhat = nearest_vertices(mesh, P)
    dG = np.stack([fields.lookup(Xhat, pairs[:, 0]), fields.lookup(Xhat, pairs[:, 1])], axis=1)
    fallback = 0
    for n in range(N):
        i, j = int(pairs[n, 0]), int(pairs[n, 1])
        if np.isnan(dG[n]).any():
            masks[n, i] = 1
            branches[n] = BRANCH_FALLBACK
            fallback += 1
            continue
        masks[n], branches[n] = assign_point_branch(dM[n, 0], dM[n, 1], dG[n, 0], dG[n, 1], i, j, eta, zeta, B)
    return AssignmentResult(masks, branches, pairs, dM, dG, fallback)


def sparse_skin_loss(W, M) -> float:
    """Squared weight mass on unassigned bones, normalised by the unassigned count."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if W.shape != M.shape:
        raise ValueError(f"shape mismatch {W.shape} vs {M.shape}")
    Mbar = 1.0 - M
    denom = Mbar.sum()
    if denom == 0:
        return 0.0
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(((W * Mbar) ** 2).ravel()) / denom


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------


def _blend_apply(W, bone_dqs, X, blend):
    if blend == "rigid":
        W = rigid_binarize(W)
        blend = "dq"
    if blend == "dq":
        return dq_apply_array(dq_blend_array(W, bone_dqs), X)
    if blend == "lbs":
        mats = dq_to_matrix(bone_dqs)
        A = np.einsum("nb,bij->nij", W, mats)
        return np.einsum("nij,nj->ni", A[..., :3], X) + A[..., 3]
    raise ValueError(f"unknown blend mode {blend!r}; expected one of {BLEND_MODES}")


def qrbs_forward(X, bones: BoneSet, delta: Optional[DeltaWeightField], gamma: float, pose: PoseState,
                 blend: str = "dq") -> np.ndarray:
    """Canonical -> observation: blended bone motion, then the global transform."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    W = skin_weights(bones, X, delta, gamma)
    Y = pose.global_transform.apply(_blend_apply(W, pose.bone_dqs, X, blend))
    return Y[0] if single else Y


def inverse_weights(bones: BoneSet, Y, delta: Optional[DeltaWeightField], gamma: float, bone_dqs) -> np.ndarray:
    """Weights at observation-space points using Gaussians transported by each bone."""
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    inv = dq_conj(bone_dqs)
    B = bones.n_bones
    # bone b's Gaussian (and delta lattice) is evaluated in its own canonical frame
    local = np.stack([dq_apply_array(inv[b], Y) for b in range(B)], axis=1)
    d = local - bones.centers[None]
    loc = np.einsum("bij,nbj->nbi", bones.orientations, d)
    logits = -np.sum(bones.scales[None] * loc**2, axis=-1)
    if delta is not None:
        logits = logits + delta.evaluate_per_bone(local)
    if gamma <= 0:
        raise ValueError("temperature must be positive")
    return softmax(logits / gamma)


def qrbs_inverse(Xt, bones: BoneSet, delta: Optional[DeltaWeightField], gamma: float, pose: PoseState,
                 blend: str = "dq") -> np.ndarray:
    """Observation -> canonical: strip the global transform, blend the inverted bone motions."""
    Xt = np.asarray(Xt, dtype=np.float64)
    single = Xt.ndim == 1
    Y = pose.global_transform.inverse().apply(np.atleast_2d(Xt))
    W = inverse_weights(bones, Y, delta, gamma, pose.bone_dqs)
    X = _blend_apply(W, dq_conj(pose.bone_dqs), Y, blend)
    return X[0] if single else X


def cycle_residual(points, bones: BoneSet, delta: Optional[DeltaWeightField], gamma: float, pose: PoseState,
                   blend: str = "dq") -> np.ndarray:
    P = points.points if isinstance(points, PointCloud) else np.atleast_2d(np.asarray(points, dtype=np.float64))
    back = qrbs_inverse(qrbs_forward(P, bones, delta, gamma, pose, blend), bones, delta, gamma, pose, blend)
    return np.linalg.norm(back - P, axis=1)


# ---------------------------------------------------------------------------
# initialisation and rig files
# ---------------------------------------------------------------------------


def init_bones_kmeans(points, n_bones: int, seed: int = 0) -> BoneSet:
    """k-means centres, identity orientations, isotropic precision from cluster radii."""
    P = np.asarray(points.points if isinstance(points, PointCloud) else points, dtype=np.float64)
    if n_bones == 1:
        centers = P.mean(0, keepdims=True)
        labels = np.zeros(len(P), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        centers, labels = kmeans2(P, n_bones, minit="++", seed=rng)
    prec = np.empty(n_bones)
    for b in range(n_bones):
        members = P[labels == b]
        if len(members) == 0:
            members = P
        r2 = np.mean(np.sum((members - centers[b]) ** 2, axis=1))
        prec[b] = 1.0 / max(r2, 1e-12)
    order = np.lexsort(centers.T[::-1])  # deterministic bone order (by x, then y, z)
    return BoneSet.isotropic(centers[order], prec[order])


def save_rig(path, bones: BoneSet, gamma: float, eta: float, zeta: float) -> None:
    d = bones.to_dict()
    d.update({"gamma": gamma, "eta": eta, "zeta": zeta})
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def load_rig(path) -> tuple[BoneSet, dict]:
    d = json.loads(Path(path).read_text())
    params = {k: float(d[k]) for k in ("gamma", "eta", "zeta") if k in d}
    return BoneSet.from_dict(d), params
