import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_dqs
from qrbs import dualquat as D
from qrbs import lattice as L
from qrbs import skinning as S
from qrbs import torch_ops as T
from qrbs.dualquat import DegenerateBlendError


def tt(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@given(st.integers(0, 2**32 - 1))
def test_dual_quaternion_ops_match_numpy(seed):
    rng = np.random.default_rng(seed)
    a, b = random_dqs(rng, 5), random_dqs(rng, 5)
    X = rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.dq_mul(tt(a), tt(b)).numpy(), D.dq_mul(a, b), atol=1e-12)
    np.testing.assert_allclose(T.dq_apply(tt(a), tt(X)).numpy(), D.dq_apply_array(a, X), atol=1e-12)
    np.testing.assert_allclose(T.dq_to_matrix(tt(a)).numpy(), D.dq_to_matrix(a), atol=1e-12)
    np.testing.assert_allclose(T.dq_conj(tt(a)).numpy(), D.dq_conj(a), atol=1e-15)
    np.testing.assert_allclose(T.dq_normalize(tt(3 * a)).numpy(), D.dq_normalize(3 * a), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_blends_match_numpy(seed):
    rng = np.random.default_rng(seed)
    dqs = random_dqs(rng, 4)
    W = rng.dirichlet(np.ones(4), size=30)
    X = rng.normal(size=(30, 3))
    for blend in ("dq", "lbs", "rigid"):
        np.testing.assert_allclose(T.blend_apply(tt(W), tt(dqs), tt(X), blend).numpy(),
                                   S._blend_apply(W, dqs, X, blend), atol=1e-10)


def test_blend_degenerate_raises():
    q = np.array([[0, 0, 0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0, 0, 0]], dtype=float)
    with pytest.raises(DegenerateBlendError):
        T.dq_blend(tt([[1.0, 0.0]]), tt(q))


def test_retract_is_unit_and_first_order_exponential():
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(10, 6)) * 1e-4
    q = T.retract(tt(xi)).numpy()
    np.testing.assert_allclose(np.linalg.norm(q[:, :4], axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(q[:, :4] * q[:, 4:], axis=1), 0.0, atol=1e-15)
    for x, qi in zip(xi, q):
        R = D.rotation_about_axis(x[:3], np.linalg.norm(x[:3]))
        M = D.dq_to_matrix(qi)
        np.testing.assert_allclose(M[:, :3], R, atol=1e-7)
        np.testing.assert_allclose(M[:, 3], x[3:], atol=1e-7)
    assert np.allclose(T.rotation_retract(tt(np.zeros(3))).numpy(), np.eye(3))


@given(st.integers(0, 2**32 - 1))
def test_trilinear_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(4, 5, 3, 2))
    lo, hi = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 2.5])
    P = rng.uniform(lo - 0.5, hi + 0.5, (40, 3))
    np.testing.assert_allclose(T.trilinear(tt(vals), tt(P), tt(lo), tt(hi)).numpy(),
                               L.trilinear(vals, P, lo, hi), atol=1e-12)


def test_upsample_preserves_linear_fields():
    nodes = L.lattice_nodes(np.zeros(3), np.ones(3), (3, 3, 3))
    coarse = nodes @ [1.0, 2.0, -1.0]
    fine = T.upsample(tt(coarse), (7, 7, 7)).numpy()
    np.testing.assert_allclose(fine, L.lattice_nodes(np.zeros(3), np.ones(3), (7, 7, 7)) @ [1.0, 2.0, -1.0],
                               atol=1e-12)


def test_grid_gradient_norm_of_distance_field():
    nodes = L.lattice_nodes(-np.ones(3), np.ones(3), (21, 21, 21))
    plane = nodes @ np.array([0.6, 0.8, 0.0])
    g = T.grid_gradient_norm(tt(plane), tt(np.full(3, 0.1))).numpy()
    np.testing.assert_allclose(g, 1.0, atol=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_skin_weights_match_numpy(seed):
    rng = np.random.default_rng(seed)
    B = 3
    R = np.stack([D.rotation_about_axis(rng.normal(size=3), rng.uniform(0, 3)) for _ in range(B)])
    bones = S.BoneSet(rng.normal(size=(B, 3)), R, rng.uniform(0.3, 2, (B, 3)))
    delta = S.DeltaWeightField(rng.normal(size=(B, 4, 4, 4)), -2 * np.ones(3), 2 * np.ones(3))
    X = rng.normal(size=(20, 3))
    gamma = float(rng.uniform(0.05, 2))
    rig = (tt(bones.centers), tt(bones.orientations), tt(bones.scales))
    got = T.skin_weights(tt(X), *rig, gamma, tt(delta.values), tt(delta.lo), tt(delta.hi)).numpy()
    np.testing.assert_allclose(got, S.skin_weights(bones, X, delta, gamma), atol=1e-12)
    dqs = random_dqs(rng, B)
    got = T.inverse_skin_weights(tt(X), *rig, gamma, tt(dqs), tt(delta.values), tt(delta.lo), tt(delta.hi)).numpy()
    np.testing.assert_allclose(got, S.inverse_weights(bones, X, delta, gamma, dqs), atol=1e-12)
    pose = S.PoseState(dqs)
    ident = tt(np.array([1.0, 0, 0, 0, 0, 0, 0, 0]))
    back = T.inverse_warp(tt(X), rig, tt(dqs), ident, gamma, "dq", tt(delta.values), tt(delta.lo), tt(delta.hi))
    np.testing.assert_allclose(back.numpy(), S.qrbs_inverse(X, bones, delta, gamma, pose), atol=1e-10)
