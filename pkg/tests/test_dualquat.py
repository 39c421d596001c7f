import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_dqs, rigid_dqs, simplex, unit_quats
from qrbs.dualquat import (
    DegenerateBlendError,
    DualQuaternion,
    InvalidTransformError,
    RigidTransform,
    dq_apply,
    dq_apply_array,
    dq_blend,
    dq_blend_array,
    dq_from_rigid,
    dq_from_rt,
    dq_inverse,
    dq_to_matrix,
    dq_to_rigid,
    lbs_blend,
    quat_from_matrix,
    quat_to_matrix,
    rotation_about_axis,
    rotation_angle,
)


def test_identity_conversion():
    q = dq_from_rigid(RigidTransform.identity())
    np.testing.assert_allclose(q.real, [1, 0, 0, 0])
    np.testing.assert_allclose(q.dual, [0, 0, 0, 0])
    rt = dq_to_rigid(DualQuaternion.identity())
    np.testing.assert_allclose(rt.rotation, np.eye(3))
    np.testing.assert_allclose(rt.translation, 0)


def test_pure_translation():
    q = dq_from_rigid(RigidTransform(np.eye(3), (0, 0, 2)))
    np.testing.assert_allclose(q.real, [1, 0, 0, 0])
    np.testing.assert_allclose(q.dual, [0, 0, 0, 1])
    np.testing.assert_allclose(dq_apply(q, np.zeros(3)), [0, 0, 2])


def test_rotate_then_translate():
    q = dq_from_rigid(RigidTransform.from_axis_angle((0, 0, 1), np.pi / 2, (1, 0, 0)))
    np.testing.assert_allclose(dq_apply(q, [1, 0, 0]), [1, 1, 0], atol=1e-12)


def test_half_turn_and_identity_action():
    q = dq_from_rigid(RigidTransform.from_axis_angle((0, 0, 1), np.pi))
    np.testing.assert_allclose(dq_apply(q, [1, 0, 0]), [-1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(dq_apply(DualQuaternion.identity(), [1, 2, 3]), [1, 2, 3])


def test_non_orthonormal_rejected():
    bad = RigidTransform.__new__(RigidTransform)
    bad.rotation = np.diag([1.0, 2.0, 1.0])
    bad.translation = np.zeros(3)
    with pytest.raises(InvalidTransformError):
        dq_from_rigid(bad)
    with pytest.raises(InvalidTransformError):
        DualQuaternion(np.array([2.0, 0, 0, 0]), np.zeros(4))


def test_sign_flip_same_transform():
    rng = np.random.default_rng(1)
    q = random_dqs(rng, 1)[0]
    a = dq_to_rigid(DualQuaternion.from_array(q))
    b = dq_to_rigid(DualQuaternion.from_array(-q))
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


@given(rigid_dqs())
def test_round_trip_up_to_sign(q):
    back = dq_from_rigid(dq_to_rigid(DualQuaternion.from_array(q))).as_array()
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9


@given(rigid_dqs(), st.integers(0, 2**32 - 1))
def test_matches_matrix_action_and_isometry(q, seed):
    X = np.random.default_rng(seed).normal(size=(10, 3))
    rt = dq_to_rigid(DualQuaternion.from_array(q))
    Y = dq_apply_array(q, X)
    np.testing.assert_allclose(Y, rt.apply(X), atol=1e-9)
    d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d1 = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)


@given(rigid_dqs(), rigid_dqs())
def test_composition_consistency(q1, q2):
    t1 = dq_to_rigid(DualQuaternion.from_array(q1))
    t2 = dq_to_rigid(DualQuaternion.from_array(q2))
    X = np.array([[0.3, -1.0, 2.0], [1.0, 1.0, 1.0]])
    np.testing.assert_allclose(dq_apply(dq_from_rigid(t1.compose(t2)), X), t1.apply(t2.apply(X)), atol=1e-9)


@given(rigid_dqs())
def test_inverse(q):
    dq = DualQuaternion.from_array(q)
    X = np.array([[0.5, 2.0, -1.0]])
    np.testing.assert_allclose(dq_apply(dq_inverse(dq), dq_apply(dq, X)), X, atol=1e-9)


@given(st.lists(rigid_dqs(), min_size=2, max_size=5).flatmap(
    lambda qs: st.tuples(st.just(np.stack(qs)), simplex(len(qs)))))
def test_blend_is_rigid(args):
    Q, w = args
    try:
        R = dq_to_matrix(dq_blend_array(w, Q))[:, :3]
    except DegenerateBlendError:
        return
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1) < 1e-6


def test_one_hot_and_idempotent_blend():
    rng = np.random.default_rng(2)
    Q = random_dqs(rng, 4)
    for b in range(4):
        out = dq_blend(np.eye(4)[b], [DualQuaternion.from_array(q) for q in Q]).as_array()
        assert min(np.abs(out - Q[b]).max(), np.abs(out + Q[b]).max()) < 1e-9
    same = np.repeat(Q[:1], 3, axis=0)
    out = dq_blend_array(np.array([0.2, 0.3, 0.5]), same)
    np.testing.assert_allclose(out, Q[0], atol=1e-12)


def test_midpoint_is_half_angle():
    a = dq_from_rigid(RigidTransform.identity())
    b = dq_from_rigid(RigidTransform.from_axis_angle((0, 0, 1), np.pi / 2))
    out = dq_to_rigid(dq_blend([0.5, 0.5], [a, b]))
    np.testing.assert_allclose(out.rotation, rotation_about_axis((0, 0, 1), np.pi / 4), atol=1e-12)


def test_hemisphere_alignment_uses_pivot():
    q = dq_from_rt(rotation_about_axis((0, 0, 1), 0.4), np.zeros(3))
    flipped = np.stack([q, -dq_from_rt(np.eye(3), np.zeros(3))])
    out = dq_blend_array(np.array([0.6, 0.4]), flipped)
    assert rotation_angle(dq_to_matrix(out)[:, :3]) == pytest.approx(0.4 * 0.6 / (0.6 + 0.4), abs=0.02)


def test_aligned_blend_never_cancels():
    # after alignment every real part has non-negative dot with the pivot, so the
    # blended norm is at least the pivot weight
    rng = np.random.default_rng(3)
    for _ in range(200):
        Q = random_dqs(rng, 3)
        Q[1] = -Q[0]
        w = rng.dirichlet(np.ones(3))
        acc = dq_blend_array(w, Q)
        assert abs(np.linalg.norm(acc[:4]) - 1) < 1e-12


def test_vanishing_real_part_raises():
    Q = np.zeros((2, 8))
    with pytest.raises(DegenerateBlendError):
        dq_blend_array(np.array([0.5, 0.5]), Q)


def test_lbs_examples():
    I = RigidTransform.identity()
    R = RigidTransform.from_axis_angle((0, 0, 1), np.pi)
    M = lbs_blend([0.5, 0.5], [I, R])
    np.testing.assert_allclose(M[:, :3], np.diag([0.0, 0.0, 1.0]), atol=1e-12)
    np.testing.assert_allclose(lbs_blend([1.0, 0.0], [R, I]), R.matrix())
    a, b = RigidTransform(np.eye(3), (2, 0, 0)), RigidTransform(np.eye(3), (0, 4, 0))
    np.testing.assert_allclose(lbs_blend([0.5, 0.5], [a, b])[:, 3], [1, 2, 0])
    with pytest.raises(ValueError):
        lbs_blend([0.7, 0.7], [a, b])


@given(unit_quats())
def test_quaternion_matrix_round_trip(q):
    p = quat_from_matrix(quat_to_matrix(q))
    assert min(np.abs(p - q).max(), np.abs(p + q).max()) < 1e-9
