"""Rigid transforms, unit dual quaternions and transform blending.

Quaternions are stored as ``(w, x, y, z)``.  A unit dual quaternion is the
8-vector ``(real, dual)`` with ``dual = 0.5 * t * real``.  All batch helpers
operate on the last axis and broadcast over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


class InvalidTransformError(ValueError):
    pass


class DegenerateBlendError(ValueError):
    """Blended rotation parts cancelled out (antipodal quaternions)."""


# ---------------------------------------------------------------------------
# quaternion helpers (batched)
# ---------------------------------------------------------------------------


def quat_mul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(R):
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[i] = -q if q[0] < 0 else q
    return out.reshape(R.shape[:-2] + (4,))


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(angle / 2), np.sin(angle / 2) * axis], axis=-1)


def rotation_about_axis(axis, angle):
    return quat_to_matrix(quat_from_axis_angle(axis, angle))


def rotation_angle(R) -> float:
    """Angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > UNIT_TOL or abs(np.linalg.det(R) - 1.0) > UNIT_TOL:
            raise InvalidTransformError("rotation is not orthonormal with det 1")
        if not np.all(np.isfinite(self.translation)):
            raise InvalidTransformError("non-finite translation")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_about_axis(axis, angle), translation)

    @classmethod
    def about_point(cls, point, axis, angle) -> "RigidTransform":
        """Rotation by ``angle`` about the line through ``point`` along ``axis``."""
        R = rotation_about_axis(axis, angle)
        p = np.asarray(point, dtype=np.float64)
        return cls(R, p - R @ p)

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def to_list(self) -> list:
        return self.matrix().tolist()

    @classmethod
    def from_list(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:, :3], m[:, 3])


@dataclass
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=np.float64).reshape(4)
        self.dual = np.asarray(self.dual, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(self.real) - 1.0) > UNIT_TOL:
            raise InvalidTransformError("dual quaternion real part is not unit")
        if abs(np.dot(self.real, self.dual)) > UNIT_TOL:
            raise InvalidTransformError("dual quaternion parts are not orthogonal")

    @classmethod
    def identity(cls) -> "DualQuaternion":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(4))

    @classmethod
    def from_array(cls, a) -> "DualQuaternion":
        a = np.asarray(a, dtype=np.float64)
        return cls(a[:4], a[4:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])

    def __mul__(self, other: "DualQuaternion") -> "DualQuaternion":
        return DualQuaternion.from_array(dq_mul(self.as_array(), other.as_array()))

    def __neg__(self) -> "DualQuaternion":
        return DualQuaternion(-self.real, -self.dual)

    def inverse(self) -> "DualQuaternion":
        return DualQuaternion(quat_conj(self.real), quat_conj(self.dual))

    def apply(self, X):
        return dq_apply(self, X)

    def to_rigid(self) -> RigidTransform:
        return dq_to_rigid(self)


# ---------------------------------------------------------------------------
# raw 8-vector operations (batched)
# ---------------------------------------------------------------------------


def dq_mul(a, b):
    """Product of dual quaternions as 8-vectors; ``a * b`` applies ``b`` first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ar, ad = a[..., :4], a[..., 4:]
    br, bd = b[..., :4], b[..., 4:]
    return np.concatenate([quat_mul(ar, br), quat_mul(ar, bd) + quat_mul(ad, br)], axis=-1)


def dq_conj(q):
    """Quaternion conjugate of both parts; the inverse of a unit dual quaternion."""
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1, -1, -1, 1, -1, -1, -1])


def dq_translation(q):
    q = np.asarray(q, dtype=np.float64)
    t = 2.0 * quat_mul(q[..., 4:], quat_conj(q[..., :4]))
    return t[..., 1:]


def dq_to_matrix(q):
    """(…, 3, 4) affine matrices of unit dual quaternions."""
    q = np.asarray(q, dtype=np.float64)
    R = quat_to_matrix(q[..., :4])
    t = dq_translation(q)
    return np.concatenate([R, t[..., None]], axis=-1)


def dq_apply_array(q, X):
    """Apply (…, 8) dual quaternions to (…, 3) points."""
    q = np.asarray(q, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    r = q[..., :4]
    w = r[..., :1]
    v = r[..., 1:]
    # rotate with the vector form of q p q*
    uv = np.cross(v, X)
    rot = X + 2.0 * (w * uv + np.cross(v, uv))
    return rot + dq_translation(q)


def dq_from_rt(R, t):
    r = quat_from_matrix(R)
    t = np.asarray(t, dtype=np.float64)
    tq = np.concatenate([np.zeros(t.shape[:-1] + (1,)), t], axis=-1)
    return np.concatenate([r, 0.5 * quat_mul(tq, r)], axis=-1)


def dq_normalize(q):
    """Scale to unit real part and remove the dual component along the real part."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q[..., :4], axis=-1, keepdims=True)
    r = q[..., :4] / n
    d = q[..., 4:] / n
    d = d - np.sum(r * d, axis=-1, keepdims=True) * r
    return np.concatenate([r, d], axis=-1)


def dq_blend_array(weights, dqs, eps: float = 1e-8):
    """Dual-quaternion blend of (B, 8) or (N, B, 8) transforms with (N, B) weights."""
    W = np.asarray(weights, dtype=np.float64)
    Q = np.asarray(dqs, dtype=np.float64)
    single = W.ndim == 1
    W = np.atleast_2d(W)
    if Q.ndim == 2:
        Q = np.broadcast_to(Q, (W.shape[0],) + Q.shape)
    pivot = np.argmax(W, axis=1)  # first maximum: lowest index wins ties
    piv_real = np.take_along_axis(Q[..., :4], pivot[:, None, None], axis=1)
    sign = np.where(np.sum(Q[..., :4] * piv_real, axis=-1) < 0, -1.0, 1.0)
    acc = np.einsum("nb,nbk->nk", W * sign, Q)
    norm = np.linalg.norm(acc[:, :4], axis=-1)
    if np.any(norm < eps):
        raise DegenerateBlendError("blended rotation vanished (antipodal cancellation)")
    out = dq_normalize(acc)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# operations on the value types
# ---------------------------------------------------------------------------


def dq_from_rigid(t: RigidTransform) -> DualQuaternion:
    R = t.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > UNIT_TOL or abs(np.linalg.det(R) - 1.0) > UNIT_TOL:
        raise InvalidTransformError("rotation is not orthonormal with det 1")
    q = dq_from_rt(R, t.translation)
    return DualQuaternion.from_array(dq_normalize(q))


def dq_to_rigid(dq: DualQuaternion) -> RigidTransform:
    q = dq.as_array()
    if abs(np.linalg.norm(q[:4]) - 1.0) > UNIT_TOL:
        raise InvalidTransformError("dual quaternion is not unit")
    return RigidTransform(quat_to_matrix(q[:4]), dq_translation(q))


def dq_apply(dq: DualQuaternion, X):
    q = dq.as_array() if isinstance(dq, DualQuaternion) else np.asarray(dq, dtype=np.float64)
    return dq_apply_array(q, X)


def dq_inverse(dq: DualQuaternion) -> DualQuaternion:
    return dq.inverse()


def _check_weights(weights, count):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"expected {count} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("weights must be non-negative and sum to 1")
    return w


def dq_blend(weights, dqs) -> DualQuaternion:
    """Blend unit dual quaternions (hemisphere-aligned to the max-weight one)."""
    Q = np.stack([q.as_array() if isinstance(q, DualQuaternion) else np.asarray(q, float) for q in dqs])
    w = _check_weights(weights, len(Q))
    return DualQuaternion.from_array(dq_blend_array(w, Q))


def lbs_blend(weights, transforms) -> np.ndarray:
    """Entry-wise weighted sum of 3x4 matrices (not rigid in general)."""
    w = _check_weights(weights, len(transforms))
    M = np.stack([t.matrix() if isinstance(t, RigidTransform) else np.asarray(t, float) for t in transforms])
    return np.einsum("b,bij->ij", w, M)


def lbs_apply_array(weights, mats, X):
    """Linear-blend (N, B) weights of (B, 3, 4) matrices and apply to (N, 3) points."""
    M = np.einsum("nb,bij->nij", np.atleast_2d(weights), np.asarray(mats, dtype=np.float64))
    X = np.atleast_2d(X)
    return np.einsum("nij,nj->ni", M[..., :3], X) + M[..., 3]
