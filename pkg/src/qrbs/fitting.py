"""Gradient-based recovery of rig, poses, blend weights and canonical shape from observed clouds.

The objective combines a Chamfer data term between warped canonical surface
samples and each observed cloud, an SDF surface term on observations pulled
back to canonical space, the sparse skinning loss against geodesic
assignments, a cycle-consistency penalty, light regularisers and an eikonal
term on the SDF lattice.  Optional silhouette and colour terms render the
deformed field along camera rays.

Fitting runs in stages: canonical shape warm-up on frame 0, sequential
per-frame pose tracking, then alternating rounds that refine the rig and
weights with poses held, and the poses with the rig held, while the skinning
temperature anneals from round to round.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import torch_ops as T
from .dualquat import RigidTransform, dq_conj, dq_from_rt, dq_mul, dq_normalize, dq_to_matrix
from .field import ColorGrid, PinholeCamera, SDFGrid, extract_mesh
from .geodesic import ExactGeodesic
from .mesh import PointCloud, TriangleMesh, sample_points_with_faces
from .skinning import (
    AssignmentResult,
    BoneSet,
    DeltaWeightField,
    GeodesicFields,
    PoseState,
    assign_points,
    init_bones_kmeans,
    qrbs_forward,
)

log = logging.getLogger(__name__)

GROUPS = ("centers", "orientations", "scales", "poses", "root", "delta", "sdf", "color", "beta")
TERMS = ("data", "surface", "sparse", "cycle", "reg", "eikonal", "mask", "rgb")

DEFAULT_LR = {
    "centers": 1e-2,
    "orientations": 3e-3,
    "scales": 1e-2,
    "poses": 3e-3,
    "root": 1e-3,
    "delta": 1e-1,
    "sdf": 2e-3,
    "color": 1e-2,
    "beta": 1e-2,
}


class ConfigError(ValueError):
    pass


class FitDivergenceError(RuntimeError):
    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


@dataclass
class FitConfig:
    n_bones: int = 2
    seed: int = 0
    blend: str = "dq"
    sparse: bool = True
    warmup_iterations: int = 400
    track_iterations: int = 30
    rounds: int = 8
    rig_iterations: int = 60
    pose_iterations: int = 60
    refine_shape: bool = False
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    lambda_data: float = 1.0
    lambda_surface: float = 1.0
    lambda_sparse: float = 0.003
    lambda_cycle: float = 0.1
    lambda_reg: float = 0.01
    lambda_eikonal: float = 0.1
    lambda_mask: float = 0.0
    lambda_rgb: float = 0.0
    gamma_start: float = 1.0
    gamma_end: float = 0.1
    beta_start: float = 0.1
    beta_end: float = 0.001
    eta: float = 0.2
    zeta: float = 0.2
    refresh_every: int = 100
    resample_every: int = 10
    n_surface_samples: int = 1000
    n_obs_samples: int = 1000
    n_cycle_samples: int = 250
    grid_resolution: int = 48
    grid_levels: list = field(default_factory=lambda: [8, 16])
    grid_bound: float = 1.2
    delta_resolution: int = 16
    color_resolution: int = 16
    assign_resolution: int = 32
    extract_resolution: int = 128
    canonical_radius: float = 0.8
    cycle_eps: float = 1e-3
    n_rays: int = 128
    render_samples: int = 32
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        self.lr = {**DEFAULT_LR, **self.lr}
        self.validate()

    def validate(self):
        if self.n_bones < 1:
            raise ConfigError("n_bones must be >= 1")
        if self.rounds < 1 or min(self.warmup_iterations, self.track_iterations,
                                  self.rig_iterations, self.pose_iterations) < 0:
            raise ConfigError("rounds must be >= 1 and iteration counts >= 0")
        if self.blend not in ("dq", "lbs", "rigid"):
            raise ConfigError(f"blend must be dq, lbs or rigid, got {self.blend!r}")
        for k in TERMS:
            if getattr(self, f"lambda_{k}") < 0:
                raise ConfigError(f"lambda_{k} must be >= 0")
        if self.gamma_start <= 0 or self.gamma_end <= 0 or self.beta_start <= 0 or self.beta_end <= 0:
            raise ConfigError("temperature and density scale schedules must be positive")
        unknown = set(self.lr) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown step-size groups {sorted(unknown)}")
        for k, v in self.lr.items():
            if v < 0:
                raise ConfigError(f"lr.{k} must be >= 0")
        if not (0 < self.eta < 1) or self.zeta <= 0:
            raise ConfigError("need 0 < eta < 1 and zeta > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "lr" in d:
            lr = dict(DEFAULT_LR)
            lr.update(d["lr"])
            d["lr"] = lr
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_json(cls, path) -> "FitConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(d.get("fit", d))

    @staticmethod
    def override_keys() -> list:
        keys = []
        for f in fields(FitConfig):
            if f.name == "lr":
                keys += [f"lr.{g}" for g in GROUPS]
            else:
                keys.append(f.name)
        return keys

    def with_overrides(self, pairs) -> "FitConfig":
        d = self.to_dict()
        for key, value in pairs:
            set_dotted(d, key, value, self.override_keys())
        return FitConfig.from_dict(d)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(d: dict, key: str, value, allowed) -> None:
    if key not in allowed:
        raise ConfigError(f"unknown override key {key!r}")
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = parse_value(value) if isinstance(value, str) else value


@dataclass
class FrameObservation:
    t: int
    cloud: PointCloud
    mask: Optional[np.ndarray] = None
    image: Optional[np.ndarray] = None
    camera: Optional[PinholeCamera] = None

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("observation cloud is empty")
        if self.mask is not None:
            if self.camera is None or self.mask.shape != (self.camera.height, self.camera.width):
                raise ValueError("silhouette dimensions must match the camera")


@dataclass
class FitState:
    bones: BoneSet
    poses: list
    delta: DeltaWeightField
    sdf: SDFGrid
    color: ColorGrid
    beta: float
    gamma: float
    norm_center: np.ndarray
    norm_scale: float
    blend: str = "dq"
    mesh: Optional[TriangleMesh] = None
    assignments: Optional[AssignmentResult] = None
    history: list = field(default_factory=list)
    samples: Optional[np.ndarray] = None
    sample_dirs: Optional[np.ndarray] = None
    sample_masks: Optional[np.ndarray] = None
    geo: Optional[GeodesicFields] = None
    assign_bones: Optional[BoneSet] = None
    step: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def to_world(self, X):
        return np.asarray(X) / self.norm_scale + self.norm_center

    def to_canonical(self, X):
        return (np.asarray(X) - self.norm_center) * self.norm_scale

    def canonical_mesh(self, resolution: Optional[int] = None) -> TriangleMesh:
        g = self.sdf
        if resolution is not None and tuple(g.resolution) != (resolution,) * 3:
            g = SDFGrid.from_function(g, g.lo, g.hi, resolution)
        return extract_mesh(g)

    def deform_points(self, X, t: int) -> np.ndarray:
        """Canonical (normalised) points to frame t in world units."""
        return self.to_world(qrbs_forward(X, self.bones, self.delta, self.gamma, self.poses[t], self.blend))

    def frame_meshes(self, resolution: int = 128) -> list:
        m = self.canonical_mesh(resolution)
        return [TriangleMesh(self.deform_points(m.vertices, t), m.faces.copy()) for t in range(self.n_frames)]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _tt(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=T.DTYPE)


def _beta_schedule(cfg, frac):
    return cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** frac


def _gamma_schedule(cfg, frac):
    return cfg.gamma_start * (cfg.gamma_end / cfg.gamma_start) ** frac


class _Params:
    """Optimisable leaves around the current state; rotations use zero-centred tangents."""

    def __init__(self, state: FitState):
        B, F = state.bones.n_bones, state.n_frames
        self._constants(state)
        self.leaves = {
            "centers": _tt(state.bones.centers),
            "orientations": torch.zeros(B, 3, dtype=T.DTYPE),
            "scales": _tt(np.log(state.bones.scales)),
            "poses": torch.zeros(F, B, 6, dtype=T.DTYPE),
            "root": torch.zeros(F, 6, dtype=T.DTYPE),
            "delta": _tt(state.delta.values),
            "sdf": _tt(state.sdf.values),
            "color": _tt(state.color.values),
            "beta": torch.zeros(1, dtype=T.DTYPE),
        }
        self.extra_sdf = []  # coarse levels added on top of the lattice during fitting

    def _constants(self, state: FitState):
        self.V0 = _tt(state.bones.orientations)
        self.pose0 = _tt(np.stack([p.bone_dqs for p in state.poses]))
        self.root0 = _tt(np.stack([_rigid_dq(p.root) for p in state.poses]))
        self.cam = _tt(np.stack([_rigid_dq(p.cam) for p in state.poses]))
        self.lo = _tt(state.sdf.lo)
        self.hi = _tt(state.sdf.hi)
        self.dlo = _tt(state.delta.lo)
        self.dhi = _tt(state.delta.hi)
        self.spacing = _tt(state.sdf.spacing)
        self.beta0 = state.beta

    def requires_grad(self, groups):
        for k, v in self.leaves.items():
            v.requires_grad_(k in groups)

    def sdf_values(self):
        s = self.leaves["sdf"]
        for c in self.extra_sdf:
            s = s + T.upsample(c, s.shape)
        return s

    def assemble(self):
        L = self.leaves
        V = torch.einsum("bij,bjk->bik", T.rotation_retract(L["orientations"]), self.V0)
        prec = torch.exp(L["scales"])
        bone_dqs = T.dq_mul(T.retract(L["poses"]), self.pose0)
        root = T.dq_mul(T.retract(L["root"]), self.root0)
        glob = T.dq_mul(self.cam, root)
        return {
            "centers": L["centers"],
            "V": V,
            "prec": prec,
            "bone_dqs": bone_dqs,
            "global": glob,
            "delta": L["delta"],
            "sdf": self.sdf_values(),
            "color": L["color"],
            "beta": self.beta0 * torch.exp(L["beta"][0]),
        }

    @torch.no_grad()
    def fold_into(self, state: FitState):
        """Write leaf values back into the state and re-centre tangents."""
        L = self.leaves
        m = self.assemble()
        V = m["V"].numpy()
        U, _, Wt = np.linalg.svd(V)
        V = U @ Wt
        sc = np.exp(np.clip(L["scales"].numpy(), -20.0, 20.0))
        state.bones = BoneSet(L["centers"].numpy().copy(), V, sc)
        bd = dq_normalize(m["bone_dqs"].numpy())
        rd = dq_normalize(T.dq_mul(T.retract(L["root"]), self.root0).numpy())
        for t, p in enumerate(state.poses):
            state.poses[t] = PoseState(bd[t], _dq_rigid(rd[t]), p.cam)
        state.delta = DeltaWeightField(L["delta"].numpy().copy(), state.delta.lo, state.delta.hi)
        state.sdf = SDFGrid(m["sdf"].numpy().copy(), state.sdf.lo, state.sdf.hi)
        state.color = ColorGrid(L["color"].numpy().copy(), state.color.lo, state.color.hi)
        state.beta = float(m["beta"])
        # re-centre in place so optimiser references stay valid
        self._constants(state)
        L["centers"].copy_(_tt(state.bones.centers))
        L["scales"].copy_(_tt(np.log(state.bones.scales)))
        L["sdf"].copy_(_tt(state.sdf.values))
        L["color"].copy_(_tt(state.color.values))
        for k in ("orientations", "poses", "root", "beta"):
            L[k].zero_()


def _rigid_dq(rt: RigidTransform) -> np.ndarray:
    return dq_from_rt(rt.rotation, rt.translation)


def _dq_rigid(q) -> RigidTransform:
    M = dq_to_matrix(q)
    U, _, Wt = np.linalg.svd(M[:, :3])
    return RigidTransform(U @ Wt, M[:, 3])


# ---------------------------------------------------------------------------
# observations in canonical units
# ---------------------------------------------------------------------------


class _Problem:
    def __init__(self, obs, cfg: FitConfig, center, scale):
        if not obs:
            raise ValueError("need at least one frame")
        self.F = len(obs)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
        M = min(cfg.n_obs_samples, min(len(o.cloud) for o in obs))
        pts = []
        for o in obs:
            P = (o.cloud.points - center) * scale
            if len(P) > M:
                P = P[np.sort(rng.choice(len(P), M, replace=False))]
            pts.append(P)
        self.obs = np.stack(pts)
        self.obs_t = _tt(self.obs)
        self.trees = [cKDTree(P) for P in self.obs]
        self.rays = None
        if any(o.camera is not None and o.mask is not None for o in obs):
            self._build_rays(obs, cfg, center, scale, rng)

    def _build_rays(self, obs, cfg, center, scale, rng):
        O, D, near, far, mask, rgb, frame = [], [], [], [], [], [], []
        for t, o in enumerate(obs):
            if o.camera is None or o.mask is None:
                continue
            rays = o.camera.rays(0.0, 1.0)
            idx = np.sort(rng.choice(len(rays), min(cfg.n_rays, len(rays)), replace=False))
            flat_mask = np.asarray(o.mask, dtype=np.float64).reshape(-1)
            flat_rgb = None if o.image is None else np.asarray(o.image, dtype=np.float64).reshape(-1, 3)
            for i in idx:
                r = rays[i]
                o_n = (r.origin - center) * scale
                # analytic entry/exit of the ray through the canonical bounding ball
                b = float(o_n @ r.direction)
                c = float(o_n @ o_n) - (cfg.grid_bound * math.sqrt(3)) ** 2
                disc = b * b - c
                if disc <= 0:
                    continue
                t0, t1 = max(0.0, -b - math.sqrt(disc)), -b + math.sqrt(disc)
                if t1 <= t0:
                    continue
                O.append(o_n)
                D.append(r.direction)
                near.append(t0)
                far.append(t1)
                mask.append(flat_mask[i])
                rgb.append(flat_rgb[i] if flat_rgb is not None else np.full(3, np.nan))
                frame.append(t)
        if not O:
            return
        self.rays = {
            "o": _tt(O), "d": _tt(D), "near": _tt(near), "far": _tt(far),
            "mask": _tt(mask), "rgb": _tt(rgb), "frame": torch.as_tensor(frame),
        }


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def _warp_forward(m, X, W, blend, frames):
    """X (K, 3) canonical, W (K, B) -> (len(frames), K, 3)."""
    dqs = m["bone_dqs"][frames]  # (F, B, 8)
    if blend == "rigid":
        W = T.binarize(W)
    if blend == "lbs":
        mats = T.dq_to_matrix(dqs)  # (F, B, 3, 4)
        A = torch.einsum("kb,fbij->fkij", W, mats)
        Y = torch.einsum("fkij,kj->fki", A[..., :3], X) + A[..., 3]
    else:
        Y = T.dq_apply(_blend_batched(W.expand(len(frames), -1, -1), dqs), X.expand(len(frames), -1, -1))
    g = m["global"][frames][:, None, :].expand(-1, X.shape[0], -1)
    return T.dq_apply(g, Y)


def _blend_batched(W, dqs):
    """W (F, K, B), dqs (F, B, 8) -> (F, K, 8)."""
    pivot = torch.argmax(W, dim=-1)  # (F, K)
    real = dqs[..., :4]
    piv_real = torch.gather(real, 1, pivot[..., None].expand(-1, -1, 4))
    dots = torch.einsum("fkc,fbc->fkb", piv_real, real)
    sign = torch.where(dots < 0, -1.0, 1.0).to(W.dtype)
    blended = torch.einsum("fkb,fbd->fkd", W * sign, dqs)
    n = torch.linalg.norm(blended[..., :4], dim=-1)
    if bool((n < 1e-8).any()):
        from .dualquat import DegenerateBlendError

        raise DegenerateBlendError("blended real part has near-zero norm")
    return T.dq_normalize(blended)


def _warp_inverse(m, Xt, gamma, blend, frames, dlo, dhi):
    """Xt (F, M, 3) observation points -> canonical (F, M, 3)."""
    F, M = Xt.shape[:2]
    g = T.dq_conj(m["global"][frames])[:, None, :].expand(-1, M, -1)
    Y = T.dq_apply(g, Xt)
    inv = T.dq_conj(m["bone_dqs"][frames])  # (F, B, 8)
    B = inv.shape[1]
    Minv = T.dq_to_matrix(inv)  # (F, B, 3, 4)
    local = torch.einsum("fbij,fmj->fmbi", Minv[..., :3], Y) + Minv[:, None, :, :, 3]
    d = local - m["centers"]
    loc = torch.einsum("bij,fmbj->fmbi", m["V"], d)
    logits = -torch.sum(m["prec"] * loc**2, dim=-1)
    delta = m["delta"]
    logits = logits + torch.stack([T.trilinear(delta[b], local[:, :, b], dlo, dhi) for b in range(B)], dim=-1)
    W = torch.softmax(logits / gamma, dim=-1)
    if blend == "rigid":
        W = T.binarize(W)
    if blend == "lbs":
        mats = T.dq_to_matrix(inv)
        A = torch.einsum("fmb,fbij->fmij", W, mats)
        return torch.einsum("fmij,fmj->fmi", A[..., :3], Y) + A[..., 3]
    return T.dq_apply(_blend_batched(W, inv), Y)


def _canonical_weights(m, X, gamma, dlo, dhi):
    logits = -T.mahalanobis(X, m["centers"], m["V"], m["prec"])
    logits = logits + T.trilinear(m["delta"].permute(1, 2, 3, 0), X, dlo, dhi)
    return torch.softmax(logits / gamma, dim=-1)


def _chamfer_terms(Y, prob: _Problem, frames):
    """Symmetric Chamfer per frame with nearest neighbours fixed from the current positions."""
    Yd = Y.detach().numpy()
    idx_y, idx_o = [], []
    for i, f in enumerate(frames):
        idx_y.append(prob.trees[f].query(Yd[i])[1])
        idx_o.append(cKDTree(Yd[i]).query(prob.obs[f])[1])
    O = prob.obs_t[frames]
    iy = torch.as_tensor(np.stack(idx_y))
    io_ = torch.as_tensor(np.stack(idx_o))
    a = torch.sum((Y - torch.gather(O, 1, iy[..., None].expand(-1, -1, 3))) ** 2, dim=-1).mean(dim=1)
    b = torch.sum((O - torch.gather(Y, 1, io_[..., None].expand(-1, -1, 3))) ** 2, dim=-1).mean(dim=1)
    return a + b


def _log_first_order(D):
    """First-order log of unit dual quaternions: (rotation 3-vector, translation)."""
    w = D[..., :1]
    s = torch.where(w < 0, -1.0, 1.0).to(D.dtype).detach()
    return torch.cat([2.0 * s * D[..., 1:4], T.dq_translation(D)], dim=-1)


def _acceleration(q):
    """q (F, ..., 8) -> mean squared first-order acceleration over frames."""
    if q.shape[0] < 3:
        return q.new_zeros(())
    D = T.dq_mul(q[1:], T.dq_conj(q[:-1]))
    v = _log_first_order(D)
    a = v[1:] - v[:-1]
    return torch.sum(a**2) / a.shape[0]


def _render(m, prob: _Problem, cfg, gamma, blend, dlo, dhi, lo, hi):
    R = prob.rays
    n = cfg.render_samples
    u = (torch.arange(n, dtype=T.DTYPE) + 0.5) / n
    t = R["near"][:, None] + (R["far"] - R["near"])[:, None] * u[None]
    X = R["o"][:, None, :] + t[..., None] * R["d"][:, None, :]  # (R, n, 3)
    frames = R["frame"]
    # pull each ray's samples back to canonical space with its own frame's pose
    Xc = torch.empty_like(X)
    for f in torch.unique(frames).tolist():
        sel = frames == f
        Xc[sel] = _warp_inverse(m, X[sel].reshape(1, -1, 3), gamma, blend, [f], dlo, dhi).reshape(-1, n, 3)
    s = T.sdf_lookup(m["sdf"], Xc.reshape(-1, 3), lo, hi).reshape(X.shape[:2])
    beta = m["beta"]
    e = 0.5 * torch.exp(-torch.abs(s) / beta)
    sigma = torch.where(s >= 0, e, 1 - e) / beta
    delta = torch.diff(torch.cat([t, R["far"][:, None]], dim=1), dim=1)
    alpha = 1 - torch.exp(-sigma * delta)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1 - alpha[:, :-1]], dim=1), dim=1)
    tau = alpha * trans
    col = torch.clamp(T.trilinear(m["color"], Xc.reshape(-1, 3), lo, hi), 0.0, 1.0).reshape(X.shape[:2] + (3,))
    return tau.sum(dim=1), torch.einsum("rn,rnc->rc", tau, col)


def _objective(P: _Params, state: FitState, prob: _Problem, cfg: FitConfig, frames, weights, gamma):
    """Weighted terms (torch scalars) for the given frames; zero-weight terms are skipped."""
    m = P.assemble()
    terms = {}
    X = _tt(state.samples)
    if weights.get("data", 0) > 0 or weights.get("cycle", 0) > 0 or weights.get("sparse", 0) > 0:
        # project samples onto the current zero level set along the frozen normal direction
        s = T.sdf_lookup(m["sdf"], X, P.lo, P.hi)
        Xp = X - s[:, None] * _tt(state.sample_dirs)
        W = _canonical_weights(m, Xp, gamma, P.dlo, P.dhi)
    if weights.get("data", 0) > 0:
        Y = _warp_forward(m, Xp, W, state.blend, frames)
        terms["data"] = _chamfer_terms(Y, prob, frames).mean()
    if weights.get("surface", 0) > 0:
        Xc = _warp_inverse(m, prob.obs_t[frames], gamma, state.blend, frames, P.dlo, P.dhi)
        terms["surface"] = torch.mean(T.sdf_lookup(m["sdf"], Xc.reshape(-1, 3), P.lo, P.hi) ** 2)
    if weights.get("sparse", 0) > 0 and state.sample_masks is not None:
        Mbar = 1.0 - _tt(state.sample_masks)
        denom = Mbar.sum()
        terms["sparse"] = torch.sum((W * Mbar) ** 2) / denom if denom > 0 else W.new_zeros(())
    if weights.get("cycle", 0) > 0:
        n = min(cfg.n_cycle_samples, Xp.shape[0])
        Y = _warp_forward(m, Xp[:n], W[:n], state.blend, frames)
        back = _warp_inverse(m, Y, gamma, state.blend, frames, P.dlo, P.dhi)
        r2 = torch.sum((back - Xp[:n]) ** 2, dim=-1)
        eps = cfg.cycle_eps
        terms["cycle"] = torch.mean(torch.sqrt(r2 + eps * eps) - eps)
    if weights.get("reg", 0) > 0:
        logs = torch.log(m["prec"])
        aniso = torch.sum(torch.var(logs, dim=1, unbiased=False))
        terms["reg"] = aniso + _acceleration(m["bone_dqs"]) + _acceleration(m["global"])
    if weights.get("eikonal", 0) > 0:
        gn = T.grid_gradient_norm(m["sdf"], P.spacing)
        terms["eikonal"] = torch.mean((gn - 1.0) ** 2)
    if prob.rays is not None and (weights.get("mask", 0) > 0 or weights.get("rgb", 0) > 0):
        op, rgb = _render(m, prob, cfg, gamma, state.blend, P.dlo, P.dhi, P.lo, P.hi)
        if weights.get("mask", 0) > 0:
            terms["mask"] = torch.mean((op - prob.rays["mask"]) ** 2)
        if weights.get("rgb", 0) > 0:
            ok = torch.isfinite(prob.rays["rgb"]).all(dim=1)
            terms["rgb"] = torch.mean((rgb[ok] - prob.rays["rgb"][ok]) ** 2) if bool(ok.any()) else rgb.new_zeros(())
    total = sum(weights[k] * v for k, v in terms.items())
    if not terms:
        total = torch.zeros((), dtype=T.DTYPE)
    return total, terms


def _weights(cfg: FitConfig, stage: str = "joint") -> dict:
    w = {k: getattr(cfg, f"lambda_{k}") for k in TERMS}
    if not cfg.sparse:
        w["sparse"] = 0.0
    if stage == "warmup":
        w.update(sparse=0.0, cycle=0.0, reg=0.0)
    elif stage == "track":
        w.update(sparse=0.0, reg=0.0, eikonal=0.0, cycle=0.0)
    return w


# ---------------------------------------------------------------------------
# state construction and caches
# ---------------------------------------------------------------------------


def normalization(cloud: PointCloud, radius: float) -> tuple[np.ndarray, float]:
    P = cloud.points
    c = 0.5 * (P.min(0) + P.max(0))
    r = float(np.max(np.linalg.norm(P - c, axis=1)))
    return c, radius / max(r, 1e-12)


def init_state(obs, cfg: FitConfig) -> FitState:
    """Unit-sphere SDF, k-means bones, identity poses."""
    center, scale = normalization(obs[0].cloud, cfg.canonical_radius)
    b = cfg.grid_bound
    lo, hi = (-b,) * 3, (b,) * 3
    bones = init_bones_kmeans((obs[0].cloud.points - center) * scale, cfg.n_bones, cfg.seed)
    return FitState(
        bones=bones,
        poses=[PoseState.identity(cfg.n_bones) for _ in obs],
        delta=DeltaWeightField.zeros(cfg.n_bones, lo, hi, cfg.delta_resolution),
        sdf=SDFGrid.sphere(1.0, (0, 0, 0), lo, hi, cfg.grid_resolution),
        color=ColorGrid.constant((0.5, 0.5, 0.5), lo, hi, cfg.color_resolution),
        beta=cfg.beta_start,
        gamma=cfg.gamma_start,
        norm_center=center,
        norm_scale=scale,
        blend=cfg.blend,
    )


def resample_surface(state: FitState, cfg: FitConfig, counter: int) -> bool:
    """Draw fresh canonical surface samples; returns False when the surface vanished."""
    mesh = extract_mesh(state.sdf)
    if mesh.n_faces == 0 or mesh.area <= 0:
        warnings.warn("canonical surface is empty; keeping previous samples", stacklevel=2)
        return False
    seed = int(np.random.SeedSequence([cfg.seed, 202, counter]).generate_state(1)[0])
    pts, _ = sample_points_with_faces(mesh, cfg.n_surface_samples, seed)
    g = state.sdf.gradient(pts)
    g2 = np.sum(g * g, axis=1, keepdims=True)
    state.samples = pts
    state.sample_dirs = g / np.maximum(g2, 1e-12)
    _update_sample_masks(state, cfg)
    return True


def _update_sample_masks(state: FitState, cfg: FitConfig):
    if state.geo is None or state.samples is None:
        state.sample_masks = None
        return
    res = assign_points(state.geo.mesh, state.assign_bones, state.samples, cfg.eta, cfg.zeta, state.geo)
    state.assignments = res
    state.sample_masks = res.masks.astype(np.float64)


def refresh_assignments(state: FitState, cfg: FitConfig) -> FitState:
    """Re-extract the canonical mesh and recompute geodesic assignments (weights are never masked)."""
    g = state.sdf
    if cfg.assign_resolution and tuple(g.resolution) != (cfg.assign_resolution,) * 3:
        g = SDFGrid.from_function(g, g.lo, g.hi, cfg.assign_resolution)
    mesh = extract_mesh(g)
    if mesh.n_faces == 0:
        warnings.warn("extracted mesh is empty; keeping previous assignments", stacklevel=2)
        log.warning("extracted mesh is empty; keeping previous assignments")
        return state
    state.mesh = mesh
    state.assign_bones = copy.deepcopy(state.bones)
    state.geo = GeodesicFields(mesh, state.assign_bones, ExactGeodesic(mesh))
    _update_sample_masks(state, cfg)
    return state


def _ensure_samples(state, cfg):
    if state.samples is None:
        resample_surface(state, cfg, 0)
        if state.samples is None:
            raise ValueError("canonical SDF has no zero level set")


# ---------------------------------------------------------------------------
# public objective API
# ---------------------------------------------------------------------------


def total_loss(state: FitState, obs, cfg: FitConfig, frames=None, stage: str = "joint"):
    """Weighted objective and its per-term breakdown at the current state."""
    _ensure_samples(state, cfg)
    prob = obs if isinstance(obs, _Problem) else _Problem(obs, cfg, state.norm_center, state.norm_scale)
    frames = list(range(state.n_frames)) if frames is None else list(frames)
    P = _Params(state)
    with torch.no_grad():
        total, terms = _objective(P, state, prob, cfg, frames, _weights(cfg, stage), state.gamma)
    return float(total), {k: float(v) for k, v in terms.items()}


def gradients(state: FitState, obs, cfg: FitConfig, frames=None, stage: str = "joint") -> dict:
    """d(total_loss)/d(parameter) per group.

    Rotations (bone orientations, per-bone poses, root) are differentiated
    through zero tangent vectors composed onto the current values.
    """
    _ensure_samples(state, cfg)
    prob = obs if isinstance(obs, _Problem) else _Problem(obs, cfg, state.norm_center, state.norm_scale)
    frames = list(range(state.n_frames)) if frames is None else list(frames)
    P = _Params(state)
    P.requires_grad(GROUPS)
    total, _ = _objective(P, state, prob, cfg, frames, _weights(cfg, stage), state.gamma)
    leaves = [P.leaves[g] for g in GROUPS]
    grads = torch.autograd.grad(total, leaves, allow_unused=True) if total.requires_grad else [None] * len(GROUPS)
    out = {}
    for g, leaf, gr in zip(GROUPS, leaves, grads):
        arr = np.zeros(tuple(leaf.shape)) if gr is None else gr.numpy().copy()
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(g)
        out[g] = arr
    return out


def loss_at(state: FitState, obs, cfg: FitConfig, group: str, value: np.ndarray, frames=None,
            stage: str = "joint") -> float:
    """Objective with one parameter group replaced by ``value`` (tangent groups use tangent values)."""
    _ensure_samples(state, cfg)
    prob = obs if isinstance(obs, _Problem) else _Problem(obs, cfg, state.norm_center, state.norm_scale)
    frames = list(range(state.n_frames)) if frames is None else list(frames)
    P = _Params(state)
    P.leaves[group] = _tt(value)
    with torch.no_grad():
        total, _ = _objective(P, state, prob, cfg, frames, _weights(cfg, stage), state.gamma)
    return float(total)


def parameter_values(state: FitState, group: str) -> np.ndarray:
    return _Params(state).leaves[group].numpy().copy()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def _make_optimizer(P: _Params, cfg: FitConfig, groups, n_steps, with_levels: bool):
    param_groups = []
    for g in groups:
        lr = cfg.lr.get(g, DEFAULT_LR[g])
        if lr <= 0:
            continue
        params = [P.leaves[g]]
        if g == "sdf" and with_levels:
            params += P.extra_sdf
        param_groups.append({"params": params, "lr": lr, "name": g})
    opt = torch.optim.RMSprop(param_groups, alpha=0.95, eps=1e-10, momentum=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: 0.5 * (1.0 + math.cos(math.pi * min(k, n_steps) / max(n_steps, 1))) * 0.95 + 0.05
    )
    return opt, sched


def _record(state: FitState, stage: str, total: float, terms: dict):
    best = min(total, state.history[-1]["best"]) if state.history else total
    row = {"step": state.step, "stage": stage, "total": total, "gamma": state.gamma, "best": best}
    row.update({k: terms.get(k, 0.0) for k in TERMS})
    state.history.append(row)
    state.step += 1


def _run_stage(state, prob, cfg, stage, groups, frames, n_steps, gamma_fn, weights, guard=False,
               refresh=False, resample_counter=None):
    if n_steps <= 0:
        return
    P = _Params(state)
    levels = stage != "track" and "sdf" in groups
    if levels:
        P.extra_sdf = [torch.zeros((r, r, r), dtype=T.DTYPE, requires_grad=True) for r in cfg.grid_levels]
    P.requires_grad(groups)
    opt, sched = _make_optimizer(P, cfg, groups, n_steps, levels)
    initial = None
    over = 0
    for k in range(n_steps):
        state.gamma = gamma_fn(k / max(n_steps - 1, 1))
        if refresh and cfg.refresh_every > 0 and k > 0 and k % cfg.refresh_every == 0:
            P.fold_into(state)
            refresh_assignments(state, cfg)
        if resample_counter is not None and cfg.resample_every > 0 and k > 0 and k % cfg.resample_every == 0:
            P.fold_into(state)
            resample_counter[0] += 1
            resample_surface(state, cfg, resample_counter[0])
        opt.zero_grad(set_to_none=True)
        total, terms = _objective(P, state, prob, cfg, frames, weights, state.gamma)
        total.backward()
        for grp in opt.param_groups:
            for p in grp["params"]:
                if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                    raise NonFiniteGradientError(grp["name"])
        value = float(total.detach())
        _record(state, stage, value, {k: float(v.detach()) for k, v in terms.items()})
        if guard:
            if initial is None:
                initial = value
            over = over + 1 if value > cfg.divergence_factor * initial else 0
            if over >= cfg.divergence_patience:
                P.fold_into(state)
                raise FitDivergenceError(
                    f"loss {value:.6g} exceeded {cfg.divergence_factor}x initial {initial:.6g} "
                    f"for {over} consecutive steps", state)
        opt.step()
        sched.step()
        _fold_levels(P)
    P.fold_into(state)


@torch.no_grad()
def _fold_levels(P: _Params):
    if not P.extra_sdf:
        return
    s = P.leaves["sdf"]
    for c in P.extra_sdf:
        s.add_(T.upsample(c, s.shape))
        c.zero_()


def _predict_pose(poses, t) -> PoseState:
    """Constant-velocity guess for frame t from the two previous frames."""
    prev = poses[t - 1]
    if t < 2:
        return PoseState(prev.bone_dqs.copy(), prev.root, poses[t].cam)
    pp = poses[t - 2]
    step = dq_mul(prev.bone_dqs, dq_conj(pp.bone_dqs))
    bone = dq_normalize(dq_mul(step, prev.bone_dqs))
    root = prev.root.compose(pp.root.inverse()).compose(prev.root)
    return PoseState(bone, root, poses[t].cam)


def fit(obs, cfg: FitConfig, state: Optional[FitState] = None) -> FitState:
    """Warm up the canonical shape on frame 0, track poses frame by frame, then alternate rig and pose rounds."""
    torch.manual_seed(cfg.seed)
    if not obs:
        raise ValueError("need at least one frame")
    state = init_state(obs, cfg) if state is None else state
    prob = _Problem(obs, cfg, state.norm_center, state.norm_scale)
    counter = [0]
    resample_surface(state, cfg, counter[0])
    if state.samples is None:
        raise ValueError("initial SDF has no surface")

    const = lambda v: (lambda frac: v)  # noqa: E731
    shape_groups = ["sdf"] + (["color"] if cfg.lambda_rgb > 0 else [])
    _run_stage(state, prob, cfg, "warmup", shape_groups, [0], cfg.warmup_iterations, const(cfg.gamma_start),
               _weights(cfg, "warmup"), resample_counter=counter)

    use_assign = cfg.sparse and cfg.lambda_sparse > 0 and cfg.n_bones > 1
    if use_assign:
        refresh_assignments(state, cfg)

    for t in range(1, state.n_frames):
        state.poses[t] = _predict_pose(state.poses, t)
        _run_stage(state, prob, cfg, "track", ["poses", "root"], [t], cfg.track_iterations,
                   const(cfg.gamma_start), _weights(cfg, "track"))

    rig = ["centers", "orientations", "scales", "delta"]
    if cfg.blend == "rigid":
        # binarised weights pass no gradient to the rig or the delta field
        rig = []
    shape = ["sdf"] if cfg.refine_shape else []
    if cfg.lambda_rgb > 0:
        shape.append("color")
    if cfg.lambda_rgb > 0 or cfg.lambda_mask > 0:
        shape.append("beta")
    frames = list(range(state.n_frames))
    weights = _weights(cfg, "joint")
    for r in range(cfg.rounds):
        gamma = _gamma_schedule(cfg, r / max(cfg.rounds - 1, 1))
        if use_assign and r > 0:
            refresh_assignments(state, cfg)
        if rig or shape:
            _run_stage(state, prob, cfg, "rig", rig + shape, frames, cfg.rig_iterations, const(gamma), weights,
                       guard=True, refresh=use_assign, resample_counter=counter)
        _run_stage(state, prob, cfg, "pose", ["poses", "root"] + shape, frames, cfg.pose_iterations, const(gamma),
                   weights, guard=True, resample_counter=counter)
    if use_assign:
        refresh_assignments(state, cfg)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["step", "stage", "total", "best", "gamma"] + list(TERMS)
    w.writerow(cols)
    for row in history:
        w.writerow([row[c] if c in ("step", "stage") else repr(float(row.get(c, 0.0))) for c in cols])
    return buf.getvalue()


def _npy_bytes(a) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a, dtype="<f8"), allow_pickle=False)
    return buf.getvalue()


def _npy_load(b) -> np.ndarray:
    return np.load(io.BytesIO(b), allow_pickle=False)


def save_checkpoint(state: FitState, cfg: FitConfig, path) -> None:
    import tempfile

    rig = state.bones.to_dict()
    rig.update({
        "gamma": state.gamma, "eta": cfg.eta, "zeta": cfg.zeta, "blend": state.blend,
        "beta": state.beta, "norm_center": state.norm_center.tolist(), "norm_scale": state.norm_scale,
        "seed": cfg.seed,
    })
    members = {
        "config.json": cfg.to_json().encode(),
        "rig.json": (json.dumps(rig, indent=2, sort_keys=True) + "\n").encode(),
        "poses.npy": _npy_bytes(np.stack([p.bone_dqs for p in state.poses])),
        "globals.npy": _npy_bytes(np.stack([[_rigid_dq(p.root), _rigid_dq(p.cam)] for p in state.poses])),
        "delta.npy": _npy_bytes(state.delta.values),
        "delta_bounds.npy": _npy_bytes(np.stack([state.delta.lo, state.delta.hi])),
        "loss.csv": history_csv(state.history).encode(),
    }
    with tempfile.TemporaryDirectory() as tmp:
        state.sdf.save(Path(tmp) / "sdf.bin")
        state.color.save(Path(tmp) / "color.bin")
        members["sdf.bin"] = (Path(tmp) / "sdf.bin").read_bytes()
        members["color.bin"] = (Path(tmp) / "color.bin").read_bytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def load_checkpoint(path) -> tuple[FitState, FitConfig]:
    import tempfile

    with zipfile.ZipFile(path) as zf:
        data = {n: zf.read(n) for n in zf.namelist()}
    cfg = FitConfig.from_dict(json.loads(data["config.json"]))
    rig = json.loads(data["rig.json"])
    bones = BoneSet.from_dict(rig)
    poses_arr = _npy_load(data["poses.npy"])
    glob = _npy_load(data["globals.npy"])
    poses = [PoseState(poses_arr[t], _dq_rigid(glob[t, 0]), _dq_rigid(glob[t, 1])) for t in range(len(poses_arr))]
    db = _npy_load(data["delta_bounds.npy"])
    with tempfile.TemporaryDirectory() as tmp:
        (Path(tmp) / "sdf.bin").write_bytes(data["sdf.bin"])
        (Path(tmp) / "color.bin").write_bytes(data["color.bin"])
        sdf = SDFGrid.load(Path(tmp) / "sdf.bin")
        color = ColorGrid.load(Path(tmp) / "color.bin")
    history = []
    rows = list(csv.DictReader(io.StringIO(data["loss.csv"].decode())))
    for r in rows:
        h = {k: (r[k] if k == "stage" else int(r[k]) if k == "step" else float(r[k])) for k in r}
        history.append(h)
    state = FitState(
        bones=bones, poses=poses,
        delta=DeltaWeightField(_npy_load(data["delta.npy"]), db[0], db[1]),
        sdf=sdf, color=color, beta=float(rig["beta"]), gamma=float(rig["gamma"]),
        norm_center=np.asarray(rig["norm_center"]), norm_scale=float(rig["norm_scale"]),
        blend=rig.get("blend", "dq"), history=history, step=len(history),
    )
    return state, cfg
