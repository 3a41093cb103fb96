import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from colorshape.exceptions import ParameterError, ParseError, ValidationError
from colorshape.pointcloud import (
    PointCloud4D, build_knn, load_cloud, merge_duplicates, read_manifest, save_cloud,
)


def knn_oracle(X, K):
    D = cdist(X, X)
    out = []
    for i in range(len(X)):
        cand = [j for j in range(len(X)) if j != i]
        cand.sort(key=lambda j: (D[i, j], j))
        out.append(cand[:K])
    return np.array(out)


def test_csv_three_rows(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("0,0,0,1\n1,0,0,2\n0,1,0,3\n")
    c = load_cloud(p)
    assert c.n == 3
    np.testing.assert_array_equal(c.color, [1, 2, 3])


def test_csv_header_optional(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,z,c\n0,0,0,1\n1,0,0,2\n")
    assert load_cloud(p).n == 2


def test_csv_nan_reports_index(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("0,0,nan,1\n1,0,0,2\n")
    with pytest.raises(ValidationError, match="0"):
        load_cloud(p)


def test_csv_malformed_row_names_line(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("0,0,0,1\n1,0,0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_cloud(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_cloud(tmp_path / "nope.csv")


def test_ply_missing_color_property(tmp_path):
    p = tmp_path / "c.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    with pytest.raises(ParseError, match="quality"):
        load_cloud(p)


def test_ply_ascii_custom_property(tmp_path):
    p = tmp_path / "c.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nproperty double intensity\nend_header\n0 0 0 4.5\n1 2 3 -1\n")
    c = load_cloud(p, color_property="intensity")
    np.testing.assert_array_equal(c.color, [4.5, -1])
    np.testing.assert_array_equal(c.positions[1], [1, 2, 3])


@pytest.mark.parametrize("fmt", ["csv", "ply"])
def test_round_trip_random_cloud(tmp_path, fmt):
    rng = np.random.default_rng(0)
    c = PointCloud4D(rng.standard_normal((100, 3)) * 1e3, rng.uniform(0, 10, 100), id="r")
    path = tmp_path / f"c.{fmt}"
    save_cloud(c, path)
    back = load_cloud(path)
    assert np.abs(back.positions - c.positions).max() <= 1e-12
    assert np.abs(back.color - c.color).max() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e6, 1e6, allow_nan=False)] * 4), min_size=1, max_size=30,
                unique_by=lambda t: t[:3]))
def test_round_trip_property(tmp_path_factory, rows):
    a = np.array(rows, dtype=float)
    c = PointCloud4D(a[:, :3], a[:, 3])
    d = tmp_path_factory.mktemp("rt")
    for fmt in ("csv", "ply"):
        save_cloud(c, d / f"c.{fmt}")
        back = load_cloud(d / f"c.{fmt}")
        np.testing.assert_array_equal(back.positions, c.positions)
        np.testing.assert_array_equal(back.color, c.color)


def test_single_point_csv_has_one_data_row(tmp_path):
    p = tmp_path / "one.csv"
    save_cloud(PointCloud4D([[1.0, 2.0, 3.0]], [4.0]), p)
    lines = p.read_text().strip().splitlines()
    assert len(lines) == 2 and lines[0] == "x,y,z,c"


def test_save_into_directory_path_fails(tmp_path):
    with pytest.raises(OSError, match=str(tmp_path.name)):
        save_cloud(PointCloud4D([[0.0, 0, 0]], [1.0]), tmp_path, format="csv")


def test_duplicates_merged_with_warning(tmp_path, caplog):
    p = tmp_path / "d.csv"
    p.write_text("0,0,0,1\n1,0,0,2\n0,0,0,3\n")
    with caplog.at_level(logging.WARNING):
        c = load_cloud(p)
    assert c.n == 2
    np.testing.assert_array_equal(c.color, [2.0, 2.0])
    assert "1" in caplog.text


def test_merge_duplicates_first_occurrence_order():
    P = np.array([[1.0, 0, 0], [0, 0, 0], [1, 0, 0]])
    Q, c = merge_duplicates(P, np.array([1.0, 5.0, 3.0]))[:2]
    np.testing.assert_array_equal(Q, [[1, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(c, [2.0, 5.0])


def test_cloud_validation():
    with pytest.raises(ValidationError):
        PointCloud4D(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ValidationError):
        PointCloud4D(np.zeros((3, 3)), np.zeros(2))
    with pytest.raises(ValidationError, match="2"):
        PointCloud4D(np.arange(9.0).reshape(3, 3), [0.0, 1.0, np.inf])
    c = PointCloud4D(np.arange(9.0).reshape(3, 3), np.zeros(3))
    with pytest.raises(ValueError):
        c.positions[0, 0] = 5.0


def test_manifest_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    m = tmp_path / "sub" / "list.txt"
    m.write_text("# clouds\na.csv\n\n/abs/b.ply  # absolute\n")
    paths = read_manifest(m)
    assert paths[0] == tmp_path / "sub" / "a.csv"
    assert str(paths[1]) == "/abs/b.ply"


def test_knn_collinear():
    g = build_knn(np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]]), 1)
    np.testing.assert_array_equal(g.neighbor_indices[:, 0], [1, 0, 1])
    np.testing.assert_array_equal(g.neighbor_distances[:, 0], [1, 1, 2])


def test_knn_full_rows_are_permutations():
    X = np.random.default_rng(1).standard_normal((20, 3))
    g = build_knn(X, 19)
    for i, row in enumerate(g.neighbor_indices):
        assert sorted(row) == [j for j in range(20) if j != i]


def test_knn_grid_interior_axis_neighbours():
    xs, ys = np.meshgrid(np.arange(10.0), np.arange(10.0), indexing="ij")
    X = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(100)])
    g = build_knn(X, 4)
    for i in range(100):
        x, y = divmod(i, 10)
        if 0 < x < 9 and 0 < y < 9:
            expect = {i - 10, i + 10, i - 1, i + 1}
            assert set(g.neighbor_indices[i]) == expect
            np.testing.assert_array_equal(g.neighbor_distances[i], 1.0)


@pytest.mark.parametrize("K", [0, 5])
def test_knn_bad_k(K):
    with pytest.raises(ParameterError):
        build_knn(np.random.default_rng(0).standard_normal((5, 3)), K)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(5, 120), st.integers(1, 8))
def test_knn_matches_brute_force(seed, n, K):
    rng = np.random.default_rng(seed)
    # integer grid coordinates force many exact distance ties
    X = rng.integers(0, 4, size=(n, 3)).astype(float)
    X = np.unique(X, axis=0)
    if len(X) <= K:
        return
    g = build_knn(X, K)
    np.testing.assert_array_equal(g.neighbor_indices, knn_oracle(X, K))
    assert np.all(np.diff(g.neighbor_distances, axis=1) >= 0)


def test_knn_random_clouds_up_to_500():
    rng = np.random.default_rng(7)
    for n in (50, 200, 500):
        X = rng.standard_normal((n, 3))
        np.testing.assert_array_equal(build_knn(X, 10).neighbor_indices, knn_oracle(X, 10))


def test_adjacency_symmetric():
    X = np.random.default_rng(3).standard_normal((40, 3))
    A = build_knn(X, 3).adjacency()
    assert (A != A.T).nnz == 0
    assert A.diagonal().sum() == 0
