"""Synthetic articulated sequences and reconstruction metrics (Chamfer, F-score)."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dualquat import RigidTransform, dq_from_rt, rotation_about_axis
from .mesh import (
    EmptyMeshError,
    PointCloud,
    TriangleMesh,
    box_mesh,
    cylinder_mesh,
    merge_meshes,
    sample_points_uniform,
)
from .skinning import PoseState

CD_CONVENTION = "mean squared bidirectional chamfer x1e4 on clouds divided by the ground-truth bbox diagonal"


@dataclass
class PartSpec:
    """A box (``size``) or cylinder (``radius``/``length`` along ``axis``) primitive."""

    kind: str
    center: tuple
    size: tuple = (1.0, 1.0, 1.0)
    radius: float = 0.5
    length: float = 1.0
    axis: int = 0
    moving: bool = False
    divisions: int = 4

    def mesh(self) -> TriangleMesh:
        if self.kind == "box":
            if min(self.size) <= 0:
                raise ValueError("box dimensions must be positive")
            return box_mesh(self.center, self.size, self.divisions)
        if self.kind == "cylinder":
            if self.radius <= 0 or self.length <= 0:
                raise ValueError("cylinder dimensions must be positive")
            m = cylinder_mesh(self.radius, self.length, 24, max(1, self.divisions), self.axis)
            return TriangleMesh(m.vertices + np.asarray(self.center, dtype=np.float64), m.faces)
        raise ValueError(f"unknown part kind {self.kind!r}")


@dataclass
class SyntheticSpec:
    parts: list
    hinge_point: tuple
    hinge_axis: tuple
    angles: list

    def __post_init__(self):
        self.parts = [p if isinstance(p, PartSpec) else PartSpec(**p) for p in self.parts]
        if not self.parts:
            raise ValueError("a synthetic object needs at least one part")
        if len(self.angles) < 1:
            raise ValueError("frame count must be at least 1")
        if abs(np.linalg.norm(self.hinge_axis) - 1.0) > 1e-9:
            raise ValueError("hinge axis must be a unit vector")

    @property
    def n_frames(self) -> int:
        return len(self.angles)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["angles"] = [float(a) for a in self.angles]
        return d

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        return cls(**d)


def mirror_schedule(angles) -> list:
    """Schedule followed by the same frames in reverse order."""
    a = [float(x) for x in angles]
    return a + a[::-1]


def hinge_spec(n_frames: int = 20, max_angle_deg: float = 60.0, mirrored: bool = False) -> SyntheticSpec:
    """Two slabs of unequal length hinged along the bottom edge of their shared face.

    Positive angles fold the shorter slab downward, opening a wedge at the top.
    """
    angles = list(np.linspace(0.0, np.radians(max_angle_deg), n_frames))
    if mirrored:
        angles = mirror_schedule(angles)
    return SyntheticSpec(
        parts=[
            PartSpec("box", (-0.5, 0.0, 0.0), (1.0, 0.4, 0.2)),
            PartSpec("box", (0.35, 0.0, 0.0), (0.7, 0.4, 0.2), moving=True),
        ],
        hinge_point=(0.0, 0.0, -0.1),
        hinge_axis=(0.0, 1.0, 0.0),
        angles=angles,
    )


@dataclass
class SyntheticSequence:
    spec: SyntheticSpec
    rest: TriangleMesh
    moving_mask: np.ndarray
    meshes: list
    poses: list
    clouds: list
    seed: int

    def hinge_transform(self, t: int) -> RigidTransform:
        return RigidTransform.about_point(self.spec.hinge_point, self.spec.hinge_axis, self.spec.angles[t])

    def pose_json(self) -> dict:
        return {
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "frames": [
                {"t": t, "angle": float(a), "bone_dqs": self.poses[t].bone_dqs.tolist()}
                for t, a in enumerate(self.spec.angles)
            ],
        }


def frame_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(t)]).generate_state(1)[0])


def generate_sequence(spec: SyntheticSpec, seed: int, n_points: int = 2000) -> SyntheticSequence:
    """Part 1 stays fixed, moving parts rotate by theta_t about the hinge; clouds are seeded per frame."""
    meshes, moving = [], []
    for p in spec.parts:
        m = p.mesh()
        meshes.append(m)
        moving.append(np.full(m.n_vertices, p.moving))
    rest = merge_meshes(meshes)
    mask = np.concatenate(moving)
    frames, poses, clouds = [], [], []
    fixed_boxes = [p for p in spec.parts if not p.moving and p.kind == "box"]
    for t, theta in enumerate(spec.angles):
        R = rotation_about_axis(spec.hinge_axis, theta)
        c = np.asarray(spec.hinge_point, dtype=np.float64)
        tr = c - R @ c
        V = rest.vertices.copy()
        V[mask] = V[mask] @ R.T + tr
        mesh_t = TriangleMesh(V, rest.faces.copy())
        frames.append(mesh_t)
        bone = np.stack([dq_from_rt(np.eye(3), np.zeros(3)), dq_from_rt(R, tr)])
        poses.append(PoseState(bone))
        clouds.append(sample_points_uniform(mesh_t, n_points, frame_seed(seed, t)))
        for fb in fixed_boxes:
            lo = np.asarray(fb.center) - np.asarray(fb.size) / 2
            hi = np.asarray(fb.center) + np.asarray(fb.size) / 2
            inside = np.all((V[mask] > lo + 1e-9) & (V[mask] < hi - 1e-9), axis=1)
            if inside.any():
                warnings.warn(f"frame {t}: moving part intersects a fixed part", stacklevel=2)
                break
    return SyntheticSequence(spec, rest, mask, frames, poses, clouds, seed)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _points(x) -> np.ndarray:
    P = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise EmptyMeshError("metric undefined for an empty point cloud")
    return P


def _sq(d):
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_sq_dists(A, B) -> np.ndarray:
    """Squared distance from each point of A to its nearest point of B.

    The tree proposes a few candidates; distances are recomputed exactly so
    the result matches an exhaustive search bit for bit.
    """
    A, B = _points(A), _points(B)
    k = min(4, len(B))
    _, idx = cKDTree(B).query(A, k=k)
    idx = idx.reshape(len(A), k)
    d2 = _sq(A[:, None, :] - B[idx])
    return d2.min(axis=1)


def chamfer(A, B) -> float:
    return float(nearest_sq_dists(A, B).mean() + nearest_sq_dists(B, A).mean())


def fscore(A, B, d: float) -> float:
    """F-score in percent at threshold d times the diagonal of the joint bounding box."""
    if not (0 < d < 1):
        raise ValueError("threshold fraction must be in (0, 1)")
    A, B = _points(A), _points(B)
    both = np.concatenate([A, B])
    thr = d * float(np.linalg.norm(both.max(0) - both.min(0)))
    P = float(np.mean(nearest_sq_dists(A, B) <= thr * thr))
    R = float(np.mean(nearest_sq_dists(B, A) <= thr * thr))
    if P + R == 0:
        return 0.0
    return 2 * P * R / (P + R) * 100.0


@dataclass
class MetricsRecord:
    cd: float
    f10: float
    f5: float
    seed: int = 0
    n_points: int = 10000
    convention: str = CD_CONVENTION
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cd < 0 or not (0 <= self.f10 <= 100 and 0 <= self.f5 <= 100):
            raise ValueError("metric values out of range")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["seed", "cd", "f10", "f5", "n_points"] + sorted(self.extra)
        w.writerow(keys)
        vals = asdict(self)
        w.writerow([repr(vals[k]) if k in vals else repr(self.extra[k]) for k in keys])
        return buf.getvalue()

    def save(self, directory, stem: str = "metrics") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(self.to_json())
        (d / f"{stem}.csv").write_text(self.to_csv())


def evaluate(pred: TriangleMesh, gt: TriangleMesh, seed: int, n_points: int = 10000) -> MetricsRecord:
    pa = sample_points_uniform(pred, n_points, seed).points
    pb = sample_points_uniform(gt, n_points, seed).points
    diag = gt.bbox_diagonal()
    cd = chamfer(pa / diag, pb / diag) * 1e4
    return MetricsRecord(cd, fscore(pa, pb, 0.10), fscore(pa, pb, 0.05), seed, n_points)


def normalized_rms_chamfer(pred: TriangleMesh, gt: TriangleMesh, seed: int, n_points: int = 10000) -> float:
    """Root of the per-direction mean squared distance, as a fraction of the ground-truth diagonal."""
    pa = sample_points_uniform(pred, n_points, seed).points
    pb = sample_points_uniform(gt, n_points, seed).points
    return float(np.sqrt(chamfer(pa, pb) / 2.0) / gt.bbox_diagonal())


def save_sequence(seq: SyntheticSequence, directory) -> None:
    from .mesh import save_mesh, write_pcd

    d = Path(directory)
    (d / "meshes").mkdir(parents=True, exist_ok=True)
    for t, (m, c) in enumerate(zip(seq.meshes, seq.clouds)):
        save_mesh(m, d / "meshes" / f"frame_{t:04d}.obj", comment=f"seed {seq.seed} frame {t}")
        write_pcd(d / "meshes" / f"frame_{t:04d}.pcd", c.points)
    (d / "ground_truth.json").write_text(json.dumps(seq.pose_json(), indent=2, sort_keys=True) + "\n")


def load_sequence(directory) -> tuple[list, list, dict]:
    """Meshes, clouds and the ground-truth JSON written by ``save_sequence``."""
    from .mesh import load_mesh, read_pcd

    d = Path(directory)
    gt = json.loads((d / "ground_truth.json").read_text())
    n = len(gt["frames"])
    meshes = [load_mesh(d / "meshes" / f"frame_{t:04d}.obj") for t in range(n)]
    clouds = [read_pcd(d / "meshes" / f"frame_{t:04d}.pcd") for t in range(n)]
    return meshes, clouds, gt


def relative_angle(pose: PoseState, i: int = 0, j: int = 1) -> float:
    """Rotation angle between two bones' transforms in radians."""
    from .dualquat import dq_to_matrix, rotation_angle

    M = dq_to_matrix(pose.bone_dqs)
    return rotation_angle(M[j, :, :3] @ M[i, :, :3].T)


def hinge_angles(poses, i: int = 0, j: int = 1) -> np.ndarray:
    """Per-frame articulation angle (radians) of bone j relative to bone i, measured from frame 0.

    The canonical shape may sit anywhere along the articulation, so the
    part-to-part rotation is compared against the first frame's.
    """
    from .dualquat import dq_to_matrix, rotation_angle

    rel = []
    for p in poses:
        M = dq_to_matrix(p.bone_dqs)
        rel.append(M[i, :, :3].T @ M[j, :, :3])
    return np.array([rotation_angle(rel[0].T @ r) for r in rel])


def joint_path(a, b, n: int = 1000) -> np.ndarray:
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) * np.asarray(a, dtype=np.float64) + s * np.asarray(b, dtype=np.float64)


def joint_discontinuity(deform, a, b, n: int = 1000) -> float:
    """Largest gap between consecutive deformed samples of the straight path a -> b.

    A blended deformation stretches the path smoothly; hard part assignment
    tears it where the labels switch.
    """
    if n < 2:
        raise ValueError("need at least two path samples")
    Y = np.asarray(deform(joint_path(a, b, n)))
    return float(np.sqrt(_sq(np.diff(Y, axis=0))).max())
