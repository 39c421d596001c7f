import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qrbs.benchmark import generate_sequence, hinge_spec
from qrbs.dualquat import RigidTransform, dq_apply_array, dq_from_rt, rotation_about_axis
from qrbs.field import SDFGrid, extract_mesh
from qrbs.mesh import box_mesh, merge_meshes, sample_points_uniform
from qrbs.skinning import (
    BRANCH_FALLBACK,
    BRANCH_GEODESIC,
    BRANCH_JOINT,
    BRANCH_MAHALANOBIS,
    BoneSet,
    DeltaWeightField,
    GeodesicFields,
    PoseState,
    assign_point,
    assign_point_branch,
    assign_points,
    cycle_residual,
    inverse_weights,
    load_rig,
    mahalanobis,
    qrbs_forward,
    qrbs_inverse,
    rigid_binarize,
    save_rig,
    skin_weights,
    softmax,
    sparse_skin_loss,
)

from conftest import simplex


def random_bones(rng, B):
    R = np.stack([rotation_about_axis(rng.normal(size=3), rng.uniform(0, np.pi)) for _ in range(B)])
    return BoneSet(rng.normal(size=(B, 3)), R, rng.uniform(0.2, 3.0, size=(B, 3)))


def hinge_pose(theta, pivot=(0.0, 0.0, 0.0)):
    """Bone 0 fixed, bone 1 rotated by theta about the y axis through pivot."""
    R = rotation_about_axis([0, 1, 0], theta)
    p = np.asarray(pivot, dtype=np.float64)
    return PoseState(np.stack([dq_from_rt(np.eye(3), np.zeros(3)), dq_from_rt(R, p - R @ p)]))


HINGE_BONES = BoneSet.isotropic([[-1.0, 0, 0], [1.0, 0, 0]], 1.0)


# -- Mahalanobis -------------------------------------------------------------


def test_mahalanobis_examples():
    b = BoneSet.isotropic([[1.0, 2.0, 3.0]], 1.0)
    assert mahalanobis(b, [1.0, 2.0, 3.0])[0] == 0.0
    assert mahalanobis(b, [4.0, 6.0, 3.0])[0] == pytest.approx(25.0)
    aniso = BoneSet(np.zeros((1, 3)), np.eye(3)[None], [[4.0, 1.0, 1.0]])
    assert mahalanobis(aniso, [1.0, 0, 0])[0] == pytest.approx(4.0)


@given(st.integers(0, 2**32 - 1))
def test_mahalanobis_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    bones = random_bones(rng, 3)
    X = rng.normal(size=(10, 3))
    R = rotation_about_axis(rng.normal(size=3), rng.uniform(0, np.pi))
    t = rng.normal(size=3)
    moved = bones.transported(np.repeat(dq_from_rt(R, t)[None], 3, 0))
    np.testing.assert_allclose(mahalanobis(moved, X @ R.T + t), mahalanobis(bones, X), rtol=1e-9, atol=1e-9)
    assert np.all(mahalanobis(bones, X) >= 0)


def test_bone_validation():
    with pytest.raises(ValueError):
        BoneSet(np.zeros((1, 3)), np.diag([1.0, 1.0, -1.0])[None], np.ones((1, 3)))
    with pytest.raises(ValueError):
        BoneSet(np.zeros((1, 3)), np.eye(3)[None], [[1.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        BoneSet(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)))


# -- weights -----------------------------------------------------------------


def test_skin_weights_examples():
    W = skin_weights(HINGE_BONES, [0.0, 0.5, 0.0])
    np.testing.assert_allclose(W, [0.5, 0.5], atol=1e-12)
    sharp = skin_weights(HINGE_BONES, [-0.3, 0.0, 0.0], gamma=0.01)
    assert sharp.max() > 0.999
    np.testing.assert_allclose(softmax(np.array([0.0, -1.0, -2.0])), [0.6652, 0.2447, 0.0900], atol=1e-3)


def test_skin_weights_uses_delta_logits():
    bones = BoneSet.isotropic(np.zeros((3, 3)), 1.0)
    delta = DeltaWeightField(np.stack([np.full((2, 2, 2), v) for v in (0.0, -1.0, -2.0)]), -np.ones(3), np.ones(3))
    np.testing.assert_allclose(skin_weights(bones, [0.2, -0.4, 0.1], delta, 1.0), [0.6652, 0.2447, 0.0900], atol=1e-3)
    with pytest.raises(ValueError):
        skin_weights(bones, [0, 0, 0], delta, 0.0)


@given(st.integers(0, 2**32 - 1))
def test_simplex_and_temperature_properties(seed):
    rng = np.random.default_rng(seed)
    bones = random_bones(rng, 4)
    X = rng.normal(size=(25, 3))
    prev_max = None
    argmax = None
    for gamma in (10.0, 1.0, 0.3, 0.1, 0.01):
        W = skin_weights(bones, X, None, gamma)
        assert np.all(W >= 0) and np.all(W <= 1)
        np.testing.assert_allclose(W.sum(1), 1.0, atol=1e-6)
        if argmax is None:
            argmax = W.argmax(1)
        else:
            np.testing.assert_array_equal(W.argmax(1), argmax)
        if prev_max is not None:
            assert np.all(W.max(1) >= prev_max - 1e-12)
        prev_max = W.max(1)


def test_rigid_binarize():
    np.testing.assert_array_equal(rigid_binarize([0.7, 0.3]), [1, 0])
    np.testing.assert_array_equal(rigid_binarize([0.5, 0.5]), [1, 0])
    np.testing.assert_array_equal(rigid_binarize([0.0, 1.0, 0.0]), [0, 1, 0])


@given(simplex(4))
def test_rigid_binarize_idempotent(w):
    once = rigid_binarize(w)
    assert once.sum() == 1
    np.testing.assert_array_equal(rigid_binarize(once), once)


# -- point assignment --------------------------------------------------------


def test_assign_point_examples():
    np.testing.assert_array_equal(assign_point(1, 10, 3, 1, 0, 1, 0.2, 0.1, 2), [1, 0])
    np.testing.assert_array_equal(assign_point(5, 5.2, 2.0, 2.1, 0, 1, 0.2, 0.1, 2), [1, 1])
    np.testing.assert_array_equal(assign_point(5, 5.2, 1.0, 3.0, 0, 1, 0.2, 0.1, 2), [1, 0])
    # third branch can pick the Mahalanobis runner-up
    np.testing.assert_array_equal(assign_point(5, 5.2, 3.0, 1.0, 2, 0, 0.2, 0.1, 3), [1, 0, 0])


def test_assign_point_division_guards():
    M, branch = assign_point_branch(0, 0, 1, 1, 0, 1, 0.2, 0.2, 2)
    assert branch == BRANCH_JOINT and M.tolist() == [1, 1]
    M, branch = assign_point_branch(1, 1, 0, 2, 0, 1, 0.2, 0.2, 2)
    assert branch == BRANCH_GEODESIC and M.tolist() == [1, 0]
    M, branch = assign_point_branch(1, 1, 2, 0, 0, 1, 0.2, 0.2, 2)
    assert M.tolist() == [0, 1]
    with pytest.raises(ValueError):
        assign_point(1, 2, 1, 1, 1, 1, 0.2, 0.2, 2)


def test_assign_point_totality_and_branch_coverage():
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(1000):
        B = int(rng.integers(2, 6))
        i, j = rng.choice(B, 2, replace=False)
        dM = np.sort(rng.uniform(0, 5, 2))
        dM[rng.random(2) < 0.05] = 0.0
        dM = np.sort(dM)
        dG = rng.uniform(0, 3, 2)
        dG[rng.random(2) < 0.05] = 0.0
        M, branch = assign_point_branch(dM[0], dM[1], dG[0], dG[1], i, j, rng.uniform(0.05, 0.95),
                                        rng.uniform(0.01, 1.0), B)
        assert M.sum() in (1, 2) and set(np.unique(M)) <= {0, 1}
        assert M[[k for k in range(B) if k not in (i, j)]].sum() == 0
        seen.add(int(branch))
    assert seen == {BRANCH_MAHALANOBIS, BRANCH_JOINT, BRANCH_GEODESIC}


def test_disjoint_boxes_fall_back():
    two = merge_meshes([box_mesh((0, 0, 0), (1, 1, 1), 2), box_mesh((3, 0, 0), (1, 1, 1), 2)])
    bones = BoneSet.isotropic([[0, 0, 0], [3, 0, 0]], 1.0)
    res = assign_points(two, bones, [[0.1, 0.2, 0.0]])
    assert res.masks.tolist() == [[1, 0]]
    assert res.branches[0] == BRANCH_FALLBACK and res.fallback_count == 1


def _dumbbell_sdf(P):
    s1 = np.linalg.norm(P - [-1.5, 0, 0], axis=1) - 1
    s2 = np.linalg.norm(P - [1.5, 0, 0], axis=1) - 1
    q = np.zeros_like(P)
    q[:, 0] = np.clip(P[:, 0], -1.5, 1.5)
    return np.minimum(np.minimum(s1, s2), np.linalg.norm(P - q, axis=1) - 0.3)


@pytest.fixture(scope="module")
def dumbbell():
    mesh = extract_mesh(SDFGrid.from_function(_dumbbell_sdf, (-2.7, -1.2, -1.2), (2.7, 1.2, 1.2), (37, 17, 17)))
    # centres sit just above each sphere's south pole so the anchor vertices are unambiguous
    centers = [[-1.5, 0, -0.7], [1.5, 0, -0.7]]
    bones = BoneSet.isotropic(centers, 1.0)
    return mesh, bones, GeodesicFields(mesh, bones)


def test_dumbbell_geodesic_overrides_mahalanobis(dumbbell):
    mesh, _, fields = dumbbell
    # a broad second bone makes a sphere-1 point closer to bone 1 in Mahalanobis terms
    bones = BoneSet.isotropic([[-1.5, 0, -0.7], [1.5, 0, -0.7]], [1.0, 0.19])
    X = [[-0.6, 0.0, -0.44]]
    dM = mahalanobis(bones, X)[0]
    assert dM[1] < dM[0] and dM[1] / dM[0] >= 0.8
    res = assign_points(mesh, bones, X, eta=0.2, zeta=0.2, fields=fields)
    assert res.masks.tolist() == [[1, 0]]
    assert res.branches[0] == BRANCH_GEODESIC


def test_dumbbell_bridge_is_joint(dumbbell):
    mesh, bones, fields = dumbbell
    res = assign_points(mesh, bones, [[0.0, 0.0, 0.3]], eta=0.2, zeta=0.2, fields=fields)
    assert res.masks.tolist() == [[1, 1]]
    assert res.branches[0] == BRANCH_JOINT


def test_assignment_csv(dumbbell, tmp_path):
    mesh, bones, fields = dumbbell
    res = assign_points(mesh, bones, [[0.0, 0.0, 0.3], [-2.5, 0, 0]], fields=fields)
    res.to_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "point,bone_i,bone_j,dM_i,dM_j,dG_i,dG_j,branch,M"
    assert len(lines) == 3 and lines[1].endswith(",2,11") and lines[2].endswith(",1,10")


# -- sparse loss -------------------------------------------------------------


def test_sparse_loss_examples():
    assert sparse_skin_loss([[1, 0, 0]], [[1, 0, 0]]) == 0.0
    assert sparse_skin_loss([[0.5, 0.5]], [[1, 0]]) == pytest.approx(0.25)
    assert sparse_skin_loss([[0.4, 0.4, 0.2]], [[1, 1, 0]]) == pytest.approx(0.04)
    assert sparse_skin_loss([[0.5, 0.5]], [[1, 1]]) == 0.0
    with pytest.raises(ValueError):
        sparse_skin_loss([[0.5, 0.5]], [[1, 0, 0]])


@given(st.integers(0, 2**32 - 1))
def test_sparse_loss_matches_loop_and_bounds(seed):
    rng = np.random.default_rng(seed)
    N, B = 12, 4
    W = rng.dirichlet(np.ones(B), size=N)
    M = np.zeros((N, B), dtype=int)
    for n in range(N):
        M[n, rng.choice(B, int(rng.integers(1, 3)), replace=False)] = 1
    num = den = 0.0
    for n in range(N):
        for b in range(B):
            if M[n, b] == 0:
                num += W[n, b] ** 2
                den += 1
    got = sparse_skin_loss(W, M)
    assert got == pytest.approx(num / den, rel=1e-12)
    assert 0.0 <= got <= 1.0


# -- deformation -------------------------------------------------------------


def test_forward_identity_and_one_hot():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3))
    np.testing.assert_allclose(qrbs_forward(X, HINGE_BONES, None, 0.1, PoseState.identity(2)), X, atol=1e-12)
    np.testing.assert_allclose(qrbs_inverse(X, HINGE_BONES, None, 0.1, PoseState.identity(2)), X, atol=1e-12)
    # a single bone is one-hot everywhere
    bone = BoneSet.isotropic([[0, 0, 0]], 1.0)
    R = rotation_about_axis([1, 2, 3], 0.7)
    pose = PoseState(dq_from_rt(R, [0.1, 0.2, 0.3])[None])
    np.testing.assert_allclose(qrbs_forward(X, bone, None, 1.0, pose), X @ R.T + [0.1, 0.2, 0.3], atol=1e-12)


def test_forward_hinge_matches_closed_form_rotation():
    theta = np.deg2rad(40)
    pose = hinge_pose(theta)
    X = np.array([[1.2, 0.1, 0.05], [0.9, -0.1, 0.0]])  # deep in part 2
    got = qrbs_forward(X, HINGE_BONES, None, 0.02, pose)
    np.testing.assert_allclose(got, X @ rotation_about_axis([0, 1, 0], theta).T, atol=1e-9)


def test_forward_applies_global_transform():
    root = RigidTransform(rotation_about_axis([0, 0, 1], 0.3), np.array([1.0, 0, 0]))
    cam = RigidTransform(np.eye(3), np.array([0, 0, 2.0]))
    pose = hinge_pose(0.5)
    pose = PoseState(pose.bone_dqs, root, cam)
    X = np.array([[1.3, 0.0, 0.0]])
    obj = dq_apply_array(pose.bone_dqs[1], X)
    np.testing.assert_allclose(qrbs_forward(X, HINGE_BONES, None, 0.01, pose), cam.apply(root.apply(obj)), atol=1e-9)


def test_rigid_regime_invertible():
    rng = np.random.default_rng(2)
    pose = hinge_pose(np.deg2rad(60))
    X = np.concatenate([rng.normal([-1.2, 0, 0], 0.1, (50, 3)), rng.normal([1.2, 0, 0], 0.1, (50, 3))])
    res = cycle_residual(X, HINGE_BONES, None, 0.005, pose)
    assert res.max() < 1e-9 * 3.0


def test_cycle_residual_shrinks_with_temperature():
    seq = generate_sequence(hinge_spec(2, 45.0), 0)
    P = sample_points_uniform(seq.rest, 20000, 0).points
    X = P[np.abs(P[:, 0]) < 0.4]
    bones = BoneSet.isotropic([[-0.35, 0, 0], [0.35, 0, 0]], 4.0)
    means = [cycle_residual(X, bones, None, g, seq.poses[1]).mean() for g in (1.0, 0.1, 0.01)]
    assert np.all(np.isfinite(means)) and means[0] > 0
    assert means[0] > means[1] > means[2]


def test_cycle_residual_identity_pose_is_zero():
    X = np.random.default_rng(0).normal(size=(30, 3))
    assert np.all(cycle_residual(X, HINGE_BONES, None, 0.3, PoseState.identity(2)) < 1e-12)


def test_inverse_weights_use_transported_bones():
    rng = np.random.default_rng(4)
    bones = random_bones(rng, 3)
    pose = PoseState(np.stack([dq_from_rt(rotation_about_axis(rng.normal(size=3), 0.4), rng.normal(size=3))
                               for _ in range(3)]))
    Y = rng.normal(size=(10, 3))
    moved = bones.transported(pose.bone_dqs)
    np.testing.assert_allclose(inverse_weights(bones, Y, None, 0.7, pose.bone_dqs),
                               skin_weights(moved, Y, None, 0.7), atol=1e-12)


def test_forward_continuous_across_joint():
    pose = hinge_pose(np.deg2rad(60))
    path = np.linspace([-1.5, 0, 0.1], [1.5, 0, 0.1], 3001)
    eps = np.linalg.norm(path[1] - path[0])
    jumps = {}
    for blend in ("dq", "rigid"):
        Y = qrbs_forward(path, HINGE_BONES, None, 0.1, pose, blend=blend)
        jumps[blend] = np.linalg.norm(np.diff(Y, axis=0), axis=1).max()
    rigid_region = np.linalg.norm(np.diff(qrbs_forward(path[:500], HINGE_BONES, None, 0.1, pose), axis=0), axis=1)
    lipschitz = rigid_region.max() / eps
    assert jumps["dq"] <= 10 * lipschitz * eps * 10
    assert jumps["rigid"] > 10 * jumps["dq"]


# -- rig file ----------------------------------------------------------------


def test_rig_round_trip(tmp_path):
    bones = random_bones(np.random.default_rng(5), 3)
    save_rig(tmp_path / "rig.json", bones, 0.1, 0.2, 0.3)
    back, params = load_rig(tmp_path / "rig.json")
    np.testing.assert_allclose(back.centers, bones.centers)
    np.testing.assert_allclose(back.orientations, bones.orientations, atol=1e-12)
    np.testing.assert_allclose(back.scales, bones.scales)
    assert params == {"gamma": 0.1, "eta": 0.2, "zeta": 0.3}
