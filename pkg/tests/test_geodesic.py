import numpy as np
import pytest

from qrbs.geodesic import ExactGeodesic, dijkstra_upper_bound, edge_components, geodesic_distance
from qrbs.mesh import DisconnectedComponentError, TriangleMesh, box_mesh, grid_rectangle, icosphere, merge_meshes


def test_flat_square_diagonal():
    sq = TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert abs(geodesic_distance(sq, 0, [2])[0] - np.sqrt(2)) < 1e-9
    assert geodesic_distance(sq, 0, [0])[0] == 0.0


def test_flat_grid_is_euclidean():
    g = grid_rectangle(2.0, 1.0, 6, 3)
    d = geodesic_distance(g, 0, np.arange(g.n_vertices))
    np.testing.assert_allclose(d, np.linalg.norm(g.vertices - g.vertices[0], axis=1), atol=1e-9)


def test_bent_strip_unfolds():
    # two 1x1 rectangles folded 90 degrees along x = 1
    V = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [1, 0, 1], [1, 1, 1]], dtype=float)
    F = [[0, 1, 2], [0, 2, 3], [1, 4, 5], [1, 5, 2]]
    m = TriangleMesh(V, F)
    # (0,0,0) to (1,1,1) unfolds to (0,0) -> (2,1)
    assert geodesic_distance(m, 0, [5])[0] == pytest.approx(np.sqrt(5), abs=1e-9)


def test_icosphere_antipodal():
    ico = icosphere(4)
    src = 0
    anti = int(np.argmin(ico.vertices @ ico.vertices[src]))
    d = geodesic_distance(ico, src, [anti])[0]
    assert abs(d - np.pi) / np.pi < 0.03


def test_exact_below_graph_bound_and_above_euclid():
    ico = icosphere(2)
    rng = np.random.default_rng(0)
    solver = ExactGeodesic(ico)
    for _ in range(20):
        a = int(rng.integers(ico.n_vertices))
        exact = solver.distances(a)
        graph = dijkstra_upper_bound(ico, a)
        euclid = np.linalg.norm(ico.vertices - ico.vertices[a], axis=1)
        assert np.all(exact <= graph + 1e-9)
        assert np.all(exact >= euclid - 1e-9)


def test_symmetry_and_triangle_inequality():
    m = box_mesh((0, 0, 0), (1.0, 0.6, 0.3), 3)
    solver = ExactGeodesic(m)
    D = np.stack([solver.distances(i) for i in range(m.n_vertices)])
    np.testing.assert_allclose(D, D.T, atol=1e-9)
    assert np.all(np.diag(D) == 0)
    rng = np.random.default_rng(1)
    for a, b, c in rng.integers(m.n_vertices, size=(100, 3)):
        assert D[a, c] <= D[a, b] + D[b, c] + 1e-6


def test_disconnected_parts():
    two = merge_meshes([box_mesh((0, 0, 0), (1, 1, 1), 1), box_mesh((3, 0, 0), (1, 1, 1), 1)])
    comp = edge_components(two)
    assert len(np.unique(comp)) == 2
    with pytest.raises(DisconnectedComponentError):
        geodesic_distance(two, 0, [two.n_vertices - 1])
