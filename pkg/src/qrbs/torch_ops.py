"""Differentiable (torch, float64) counterparts of the dual-quaternion, skinning and lattice ops.

These mirror the numpy implementations one for one and are cross-checked
against them in the tests; the fitter uses them for autograd.
"""

from __future__ import annotations

import torch

from .dualquat import DegenerateBlendError

DTYPE = torch.float64


def quat_mul(a, b):
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_conj(q):
    return q * q.new_tensor([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, p):
    w, v = q[..., :1], q[..., 1:]
    t = 2.0 * torch.linalg.cross(v, p, dim=-1)
    return p + w * t + torch.linalg.cross(v, t, dim=-1)


def quat_to_matrix(q):
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def dq_mul(a, b):
    ra, da = a[..., :4], a[..., 4:]
    rb, db = b[..., :4], b[..., 4:]
    return torch.cat([quat_mul(ra, rb), quat_mul(ra, db) + quat_mul(da, rb)], dim=-1)


def dq_conj(q):
    return torch.cat([quat_conj(q[..., :4]), quat_conj(q[..., 4:])], dim=-1)


def dq_translation(q):
    return 2.0 * quat_mul(q[..., 4:], quat_conj(q[..., :4]))[..., 1:]


def dq_apply(q, p):
    return quat_rotate(q[..., :4], p) + dq_translation(q)


def dq_to_matrix(q):
    R = quat_to_matrix(q[..., :4])
    return torch.cat([R, dq_translation(q)[..., None]], dim=-1)


def dq_normalize(q):
    r, d = q[..., :4], q[..., 4:]
    n = torch.linalg.norm(r, dim=-1, keepdim=True)
    r, d = r / n, d / n
    d = d - torch.sum(r * d, dim=-1, keepdim=True) * r
    return torch.cat([r, d], dim=-1)


def retract(xi):
    """Unit dual quaternion from a 6-vector (rotation 3-vector, translation 3-vector).

    The rotation part maps omega to normalize(1, omega/2), which agrees with
    the exponential map to first order and is smooth everywhere.
    """
    w = xi[..., :3]
    r = torch.cat([torch.ones_like(w[..., :1]), 0.5 * w], dim=-1)
    r = r / torch.linalg.norm(r, dim=-1, keepdim=True)
    t = torch.cat([torch.zeros_like(w[..., :1]), xi[..., 3:]], dim=-1)
    return torch.cat([r, 0.5 * quat_mul(t, r)], dim=-1)


def rotation_retract(omega):
    r = torch.cat([torch.ones_like(omega[..., :1]), 0.5 * omega], dim=-1)
    return quat_to_matrix(r / torch.linalg.norm(r, dim=-1, keepdim=True))


def dq_blend(W, dqs):
    """Per-point DQB: W (N, B), dqs (B, 8) -> (N, 8) unit dual quaternions."""
    pivot = torch.argmax(W, dim=-1)  # first max on ties
    real = dqs[:, :4]
    dots = real[pivot] @ real.T  # (N, B)
    sign = torch.where(dots < 0, -1.0, 1.0).to(W.dtype).detach()
    blended = (W * sign) @ dqs
    n = torch.linalg.norm(blended[:, :4], dim=-1)
    if bool((n < 1e-8).any()):
        raise DegenerateBlendError("blended real part has near-zero norm")
    return dq_normalize(blended)


def lbs_apply(W, dqs, X):
    mats = dq_to_matrix(dqs)  # (B, 3, 4)
    A = torch.einsum("nb,bij->nij", W, mats)
    return torch.einsum("nij,nj->ni", A[..., :3], X) + A[..., 3]


def binarize(W):
    idx = torch.argmax(W, dim=-1)
    return torch.nn.functional.one_hot(idx, W.shape[-1]).to(W.dtype)


def blend_apply(W, dqs, X, blend):
    if blend == "rigid":
        W = binarize(W)
        blend = "dq"
    if blend == "dq":
        return dq_apply(dq_blend(W, dqs), X)
    if blend == "lbs":
        return lbs_apply(W, dqs, X)
    raise ValueError(f"unknown blend mode {blend!r}")


# ---------------------------------------------------------------------------
# lattices
# ---------------------------------------------------------------------------


def trilinear(values, points, lo, hi):
    """values (Rx, Ry, Rz, ...) sampled at (..., 3) points; outside points are clamped."""
    lead = points.shape[:-1]
    out = _trilinear_flat(values, points.reshape(-1, 3), lo, hi)
    return out.reshape(lead + out.shape[1:])


def _trilinear_flat(values, points, lo, hi):
    Rx, Ry, Rz = values.shape[:3]
    res = torch.tensor([Rx, Ry, Rz], dtype=DTYPE)
    u = (points - lo) / (hi - lo) * (res - 1)
    u = torch.minimum(torch.clamp(u, min=0.0), res - 1)
    i0 = torch.minimum(torch.floor(u.detach()), res - 2).long()
    f = u - i0.to(DTYPE)
    base = (i0[:, 0] * Ry + i0[:, 1]) * Rz + i0[:, 2]
    offs, ws = [], []
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                offs.append((dx * Ry + dy) * Rz + dz)
                ws.append(wx * wy * wz)
    idx = base[:, None] + torch.tensor(offs)[None]  # (N, 8)
    w = torch.stack(ws, dim=1)
    flat = values.reshape(Rx * Ry * Rz, -1)
    g = flat.index_select(0, idx.reshape(-1)).reshape(idx.shape + flat.shape[1:])  # (N, 8, C)
    out = torch.einsum("nk,nkc->nc", w, g)
    return out.reshape((points.shape[0],) + values.shape[3:])


def sdf_lookup(values, points, lo, hi):
    inside = torch.minimum(torch.maximum(points, lo), hi)
    outside = torch.linalg.norm(points - inside, dim=-1)
    return trilinear(values, points, lo, hi) + outside


def grid_gradient_norm(values, spacing):
    """Central-difference gradient norm at interior nodes."""
    gx = (values[2:, 1:-1, 1:-1] - values[:-2, 1:-1, 1:-1]) / (2 * spacing[0])
    gy = (values[1:-1, 2:, 1:-1] - values[1:-1, :-2, 1:-1]) / (2 * spacing[1])
    gz = (values[1:-1, 1:-1, 2:] - values[1:-1, 1:-1, :-2]) / (2 * spacing[2])
    return torch.sqrt(gx**2 + gy**2 + gz**2 + 1e-12)


def upsample(coarse, res):
    """Trilinear upsampling of a (r, r, r) lattice onto (R, R, R) nodes over the same box."""
    x = coarse[None, None]
    return torch.nn.functional.interpolate(x, size=tuple(res), mode="trilinear", align_corners=True)[0, 0]


# ---------------------------------------------------------------------------
# skinning
# ---------------------------------------------------------------------------


def mahalanobis(X, centers, orientations, precisions):
    d = X[:, None, :] - centers[None]
    local = torch.einsum("bij,nbj->nbi", orientations, d)
    return torch.sum(precisions[None] * local**2, dim=-1)


def skin_weights(X, centers, orientations, precisions, gamma, delta=None, lo=None, hi=None):
    logits = -mahalanobis(X, centers, orientations, precisions)
    if delta is not None:
        logits = logits + trilinear(delta.permute(1, 2, 3, 0), X, lo, hi)
    return torch.softmax(logits / gamma, dim=-1)


def inverse_skin_weights(Y, centers, orientations, precisions, gamma, bone_dqs, delta=None, lo=None, hi=None):
    inv = dq_conj(bone_dqs)
    B = centers.shape[0]
    local = torch.stack([dq_apply(inv[b].expand(Y.shape[0], 8), Y) for b in range(B)], dim=1)
    d = local - centers[None]
    loc = torch.einsum("bij,nbj->nbi", orientations, d)
    logits = -torch.sum(precisions[None] * loc**2, dim=-1)
    if delta is not None:
        logits = logits + torch.stack([trilinear(delta[b], local[:, b], lo, hi) for b in range(B)], dim=1)
    return torch.softmax(logits / gamma, dim=-1)


def rigid_apply(dq, X):
    return dq_apply(dq.expand(X.shape[0], 8), X)


def forward_warp(X, W, bone_dqs, global_dq, blend):
    return rigid_apply(global_dq, blend_apply(W, bone_dqs, X, blend))


def inverse_warp(Xt, rig, bone_dqs, global_dq, gamma, blend, delta=None, lo=None, hi=None):
    """rig = (centers, orientations, precisions)."""
    Y = rigid_apply(dq_conj(global_dq), Xt)
    W = inverse_skin_weights(Y, *rig, gamma, bone_dqs, delta, lo, hi)
    return blend_apply(W, dq_conj(bone_dqs), Y, blend)
