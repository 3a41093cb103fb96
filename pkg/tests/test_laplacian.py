import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Delaunay

from colorshape.exceptions import ConstructionError, ParameterError
from colorshape.laplacian import (
    build_laplacian, laplacian_from_triangles, local_triangles, mollify, save_triplets,
)
from colorshape.pointcloud import PointCloud4D, build_knn

from conftest import fibonacci_sphere, random_rotation, random_surface


def cot_oracle(P, tris, weights):
    """Textbook per-triangle loop: cot of the angle at each corner from dot/cross."""
    n = len(P)
    L = np.zeros((n, n))
    M = np.zeros(n)
    for t, w in zip(tris, weights):
        for j in range(3):
            a, b, c = t[j], t[(j + 1) % 3], t[(j + 2) % 3]
            u, v = P[b] - P[a], P[c] - P[a]
            cot = np.dot(u, v) / np.linalg.norm(np.cross(u, v))
            L[b, c] -= 0.5 * w * cot
            L[c, b] -= 0.5 * w * cot
            L[b, b] += 0.5 * w * cot
            L[c, c] += 0.5 * w * cot
        M[t] += w * 0.5 * np.linalg.norm(np.cross(P[t[1]] - P[t[0]], P[t[2]] - P[t[0]])) / 3
    return L, M


def grid(nx=8, ny=7):
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    P = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    return P, Delaunay(P[:, :2]).simplices


def test_assembly_matches_cotangent_oracle():
    rng = np.random.default_rng(0)
    P, tris = grid()
    P[:, :2] += 0.2 * rng.uniform(-1, 1, (len(P), 2))
    P[:, 2] = 0.3 * np.sin(P[:, 0]) * np.cos(P[:, 1])
    w = rng.uniform(0.2, 1.0, len(tris))
    pair = laplacian_from_triangles(P, tris, w)
    L, M = cot_oracle(P, tris, w)
    np.testing.assert_allclose(pair.stiffness.toarray(), L, atol=1e-12)
    np.testing.assert_allclose(pair.mass, M, rtol=1e-12)


def test_grid_constant_in_kernel():
    P, _ = grid(12, 12)
    pair = build_laplacian(PointCloud4D(P, np.zeros(len(P))), n_neighbors=8)
    assert np.abs(pair.stiffness @ np.ones(len(P))).max() <= 1e-8


def test_sphere_area(sphere_cloud):
    pair = build_laplacian(sphere_cloud)
    assert abs(pair.mass.sum() / (4 * np.pi) - 1) < 0.05


def check_invariants(pair):
    L = pair.stiffness
    assert abs(L - L.T).max() <= 1e-10 * abs(L).max()
    rows = np.asarray(abs(L).max(axis=1).todense()).ravel()
    assert np.all(np.abs(L @ np.ones(pair.n)) <= 1e-8 * rows)
    assert np.all(pair.mass > 0) and np.all(np.isfinite(pair.mass))
    assert np.linalg.eigvalsh(L.toarray()).min() >= -1e-10 * abs(L).max()


@pytest.mark.parametrize("seed", range(4))
def test_type_invariants(seed):
    check_invariants(build_laplacian(random_surface(seed)))


def test_rigid_motion_invariance():
    c = random_surface(3)
    rng = np.random.default_rng(11)
    R, t = random_rotation(rng), rng.normal(size=3) * 10
    moved = PointCloud4D(c.positions @ R.T + t, c.color)
    a, b = build_laplacian(c), build_laplacian(moved)
    np.testing.assert_allclose(b.stiffness.toarray(), a.stiffness.toarray(), atol=1e-8)
    np.testing.assert_allclose(b.mass, a.mass, atol=1e-8)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 100.0))
def test_scale_covariance(a):
    c = random_surface(5, n=200)
    base = build_laplacian(c)
    scaled = build_laplacian(PointCloud4D(a * c.positions, c.color))
    np.testing.assert_allclose(scaled.mass, a ** 2 * base.mass, rtol=1e-8)
    np.testing.assert_allclose(scaled.stiffness.toarray(), base.stiffness.toarray(),
                               rtol=1e-8, atol=1e-8 * abs(base.stiffness).max())


def test_mollify_noop_on_good_triangles():
    P, tris = grid()
    raw = laplacian_from_triangles(P, tris)
    m = mollify(raw, 1e-4)
    assert m.length_shift == 0.0
    np.testing.assert_allclose(m.stiffness.toarray(), raw.stiffness.toarray(), atol=1e-12)
    np.testing.assert_allclose(m.mass, raw.mass, atol=1e-12)


def test_sliver_triangle_finite_after_mollify():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [2, 1e-13, 0], [1, 1, 0]])
    tris = np.array([[0, 1, 2], [0, 1, 3], [1, 2, 3]])
    exact = P.copy()
    exact[2, 1] = 0.0
    with pytest.raises(ConstructionError):
        laplacian_from_triangles(exact, tris)
    pair = laplacian_from_triangles(P, tris, epsilon_fraction=1e-4)
    assert np.isfinite(pair.stiffness.toarray()).all()
    assert pair.length_shift > 0
    pair = laplacian_from_triangles(exact, tris, epsilon_fraction=1e-4)
    assert np.isfinite(pair.stiffness.toarray()).all()


@pytest.mark.parametrize("eps", [0.2, 0.0, -1e-3])
def test_mollify_range(eps):
    P, tris = grid()
    with pytest.raises(ParameterError):
        mollify(laplacian_from_triangles(P, tris), eps)


def test_too_few_neighbours(sphere_cloud):
    with pytest.raises(ParameterError):
        build_laplacian(sphere_cloud, build_knn(sphere_cloud, 5))


def test_collinear_neighbourhood_names_point():
    P = np.column_stack([np.arange(12.0), np.zeros(12), np.zeros(12)])
    with pytest.raises(ConstructionError, match="point 0"):
        build_laplacian(PointCloud4D(P, np.zeros(12)), n_neighbors=8)


def test_fans_match_qhull(sphere_cloud):
    g = build_knn(sphere_cloud, 30)
    a = local_triangles(sphere_cloud.positions, g)
    b = local_triangles(sphere_cloud.positions, g, method="qhull")

    def canon(T):
        return sorted(map(tuple, np.sort(T, axis=1)))

    assert canon(a) == canon(b)


def test_fans_match_qhull_with_boundary():
    rng = np.random.default_rng(2)
    P = np.column_stack([rng.uniform(0, 1, (300, 2)), np.zeros(300)])
    P[:, 2] = 0.1 * P[:, 0] ** 2
    g = build_knn(P, 12)
    a = local_triangles(P, g)
    b = local_triangles(P, g, method="qhull")
    assert sorted(map(tuple, np.sort(a, axis=1))) == sorted(map(tuple, np.sort(b, axis=1)))


def test_deterministic_rebuild(sphere_cloud):
    a, b = build_laplacian(sphere_cloud), build_laplacian(sphere_cloud)
    assert (a.stiffness != b.stiffness).nnz == 0
    assert np.array_equal(a.mass, b.mass)


def test_save_triplets(tmp_path):
    P, tris = grid(4, 4)
    pair = laplacian_from_triangles(P, tris)
    save_triplets(pair, tmp_path / "dump")
    S = np.loadtxt(tmp_path / "dump" / "stiffness.txt")
    dense = np.zeros((pair.n, pair.n))
    dense[S[:, 0].astype(int), S[:, 1].astype(int)] = S[:, 2]
    np.testing.assert_array_equal(dense, pair.stiffness.toarray())
    M = np.loadtxt(tmp_path / "dump" / "mass.txt")
    np.testing.assert_array_equal(M[:, 2], pair.mass)
    assert np.array_equal(M[:, 0], M[:, 1])

