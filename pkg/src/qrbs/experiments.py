"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import benchmark as bm
from .dualquat import dq_from_rt, rotation_about_axis
from .fitting import FitConfig, FitState, FrameObservation, fit
from .mesh import cylinder_mesh
from .skinning import BoneSet, PoseState, qrbs_forward

BACKENDS = ("dq", "lbs", "rigid")


@dataclass
class HingeRun:
    blend: str
    seed: int
    seconds: float
    angles_deg: np.ndarray
    true_deg: np.ndarray
    rms: list
    cd: list
    discontinuity: float
    state: Optional[FitState] = field(default=None, repr=False)

    @property
    def median_angle_error(self) -> float:
        return float(np.median(np.abs(self.angles_deg - self.true_deg)))

    @property
    def final_rms(self) -> float:
        return float(self.rms[-1])

    @property
    def mean_cd(self) -> float:
        return float(np.mean(self.cd))

    def summary(self) -> dict:
        return {
            "blend": self.blend, "seed": self.seed, "seconds": round(self.seconds, 1),
            "median_angle_error_deg": self.median_angle_error, "final_rms_chamfer": self.final_rms,
            "mean_cd": self.mean_cd, "discontinuity": self.discontinuity,
        }


def hinge_observations(seed: int = 0, n_frames: int = 20, max_angle_deg: float = 60.0):
    seq = bm.generate_sequence(bm.hinge_spec(n_frames, max_angle_deg), seed)
    return seq, [FrameObservation(t, c) for t, c in enumerate(seq.clouds)]


def run_hinge(blend: str = "dq", seed: int = 0, cfg: Optional[FitConfig] = None, n_eval: int = 10000,
              keep_state: bool = False) -> HingeRun:
    """Fit the two-part hinge with one blend backend and score poses, shape and seam."""
    cfg = cfg or FitConfig()
    cfg = cfg.with_overrides([("blend", blend), ("seed", seed), ("n_bones", 2)])
    seq, obs = hinge_observations(seed)
    t0 = time.perf_counter()
    state = fit(obs, cfg)
    seconds = time.perf_counter() - t0
    meshes = state.frame_meshes(cfg.extract_resolution)
    rms = [bm.normalized_rms_chamfer(m, g, seed, n_eval) for m, g in zip(meshes, seq.meshes)]
    cd = [bm.evaluate(m, g, seed, n_eval).cd for m, g in zip(meshes, seq.meshes)]
    # straight path between the two parts' centres, taken through canonical space
    a = state.to_canonical(np.asarray(seq.spec.parts[0].center, dtype=np.float64))
    b = state.to_canonical(np.asarray(seq.spec.parts[1].center, dtype=np.float64))
    last = state.n_frames - 1
    disc = bm.joint_discontinuity(lambda X: state.deform_points(X, last), a, b)
    return HingeRun(blend, seed, seconds, np.degrees(bm.hinge_angles(state.poses)), np.degrees(seq.spec.angles),
                    rms, cd, disc, state if keep_state else None)


def run_ablation(seed: int = 0, cfg: Optional[FitConfig] = None) -> dict:
    return {b: run_hinge(b, seed, cfg) for b in BACKENDS}


def candy_wrapper(blend: str, radius: float = 1.0, length: float = 4.0, twist_deg: float = 180.0,
                  gamma: float = 1.0) -> np.ndarray:
    """Radii of the middle ring of a two-bone cylinder after twisting one end about the axis."""
    cyl = cylinder_mesh(radius, length, 48, 16, axis=0)
    bones = BoneSet.isotropic(np.array([[-length / 4, 0, 0], [length / 4, 0, 0]]), 1.0)
    twist = rotation_about_axis((1.0, 0.0, 0.0), np.radians(twist_deg))
    pose = PoseState(np.stack([dq_from_rt(np.eye(3), np.zeros(3)), dq_from_rt(twist, np.zeros(3))]))
    mid = np.abs(cyl.vertices[:, 0]) < 1e-9
    Y = qrbs_forward(cyl.vertices[mid], bones, None, gamma, pose, blend)
    return np.linalg.norm(Y[:, 1:], axis=1)
