"""Discrete Laplace-Beltrami operator of an unstructured point cloud.

Every point's K-neighbourhood is projected onto its principal tangent plane
and triangulated (2-D Delaunay). The triangles incident to the centre point
form its local fan. All fans are pooled, each triangle weighted 1/3 because a
well-sampled triangle shows up in the fans of its three corners, and the
cotangent stiffness and barycentric lumped mass are assembled from the 3-D
edge lengths of those triangles.

This is the local-Delaunay part of the tufted point-cloud Laplacian; the
tufted double cover and intrinsic Delaunay flips are not performed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, QhullError

from ._kernels import delaunay_fans
from .exceptions import ConstructionError, ParameterError
from .pointcloud import KnnGraph, PointCloud4D, build_knn

DEFAULT_EPSILON_FRACTION = 1e-4
MIN_NEIGHBORS = 6


@dataclass(frozen=True)
class LaplacianPair:
    """Stiffness ``L`` (sparse, symmetric PSD) and lumped mass diagonal ``M``.

    ``triangles``/``edge_lengths``/``triangle_weights`` keep the raw
    (unmollified) intrinsic triangulation so the pair can be re-mollified.
    ``edge_lengths[t, j]`` is the length of the edge opposite corner ``j``.
    """

    stiffness: sparse.csr_matrix
    mass: np.ndarray
    triangles: np.ndarray
    edge_lengths: np.ndarray
    triangle_weights: np.ndarray
    epsilon_fraction: float = 0.0
    length_shift: float = 0.0

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def mass_matrix(self):
        return sparse.diags(self.mass, format="csr")


def _edge_lengths(positions, triangles):
    p0, p1, p2 = (positions[triangles[:, j]] for j in range(3))
    return np.column_stack([
        np.linalg.norm(p1 - p2, axis=1),
        np.linalg.norm(p2 - p0, axis=1),
        np.linalg.norm(p0 - p1, axis=1),
    ])


def _triangle_areas(lengths):
    # Kahan's cancellation-safe Heron formula on sorted lengths a >= b >= c
    s = np.sort(lengths, axis=1)[:, ::-1]
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    q = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c))
    return 0.25 * np.sqrt(np.maximum(q, 0.0))


def _assemble(n, triangles, lengths, weights):
    area = _triangle_areas(lengths)
    l2 = lengths ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        cot = np.column_stack([
            (l2[:, 1] + l2[:, 2] - l2[:, 0]),
            (l2[:, 2] + l2[:, 0] - l2[:, 1]),
            (l2[:, 0] + l2[:, 1] - l2[:, 2]),
        ]) / (4.0 * area[:, None])
    if not np.isfinite(cot).all():
        bad = int(np.flatnonzero(~np.isfinite(cot).all(axis=1))[0])
        raise ConstructionError(
            f"degenerate triangle {tuple(triangles[bad])} has no finite cotangent weight; "
            "use a positive epsilon_fraction"
        )
    # edge opposite corner j joins corners (j+1) % 3 and (j+2) % 3
    w = 0.5 * cot * weights[:, None]
    a = triangles[:, [1, 2, 0]].ravel()
    b = triangles[:, [2, 0, 1]].ravel()
    w = w.ravel()
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate([-w, -w, w, w])
    # canonical (row, col) order so that duplicate summation is order-stable
    order = np.lexsort((cols, rows))
    L = sparse.coo_matrix((vals[order], (rows[order], cols[order])), shape=(n, n)).tocsr()
    L.sum_duplicates()
    L = ((L + L.T) * 0.5).tocsr()
    mass = np.bincount(
        triangles.ravel(), weights=np.repeat(weights * area / 3.0, 3), minlength=n
    )
    return L, mass


def _mollify_lengths(lengths, epsilon_fraction):
    if epsilon_fraction <= 0 or lengths.size == 0:
        return lengths, 0.0
    delta = epsilon_fraction * lengths.mean()
    slack = np.column_stack([
        lengths[:, 1] + lengths[:, 2] - lengths[:, 0],
        lengths[:, 2] + lengths[:, 0] - lengths[:, 1],
        lengths[:, 0] + lengths[:, 1] - lengths[:, 2],
    ]).min(axis=1)
    shift = max(0.0, float(np.max(delta - slack)))
    return lengths + shift, shift


def _check_epsilon(epsilon_fraction):
    if not (0.0 < epsilon_fraction <= 0.1):
        raise ParameterError(f"epsilon_fraction must lie in (0, 0.1], got {epsilon_fraction}")


def laplacian_from_triangles(positions, triangles, weights=None, epsilon_fraction=None):
    """Assemble a :class:`LaplacianPair` from an explicit triangle list.

    ``epsilon_fraction=None`` assembles the raw triangulation without
    mollification (and fails on zero-area triangles).
    """
    positions = np.asarray(positions, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    weights = np.ones(len(triangles)) if weights is None else np.asarray(weights, dtype=float)
    lengths = _edge_lengths(positions, triangles)
    pair = LaplacianPair(
        stiffness=None, mass=None, triangles=triangles,
        edge_lengths=lengths, triangle_weights=weights,
    )
    if epsilon_fraction is None:
        L, mass = _assemble(len(positions), triangles, lengths, weights)
        return LaplacianPair(L, mass, triangles, lengths, weights)
    return mollify(pair, epsilon_fraction, n=len(positions))


def mollify(pair: LaplacianPair, epsilon_fraction: float, n=None) -> LaplacianPair:
    """Rebuild ``pair`` with intrinsically mollified edge lengths.

    Let ``delta = epsilon_fraction * mean edge length``. Every edge length is
    increased by the smallest common amount that makes each triangle satisfy
    the triangle inequality with slack at least ``delta``. Well-shaped
    triangulations need no increase and come back unchanged.
    """
    _check_epsilon(epsilon_fraction)
    n = pair.n if n is None else n
    lengths, shift = _mollify_lengths(pair.edge_lengths, epsilon_fraction)
    L, mass = _assemble(n, pair.triangles, lengths, pair.triangle_weights)
    return LaplacianPair(
        stiffness=L, mass=mass, triangles=pair.triangles,
        edge_lengths=pair.edge_lengths, triangle_weights=pair.triangle_weights,
        epsilon_fraction=epsilon_fraction, length_shift=shift,
    )


def local_triangles(positions, graph: KnnGraph, rel_tol=1e-12, method="inversion"):
    """Triangles of every point's tangent-plane Delaunay fan, in global indices.

    ``method="qhull"`` triangulates each neighbourhood with qhull instead of
    the inversion/convex-hull kernel (slower; used as a cross-check).
    """
    n = positions.shape[0]
    nbhd = np.column_stack([np.arange(n), graph.neighbor_indices])
    P = positions[nbhd]
    P = P - P.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", P, P)
    evals, evecs = np.linalg.eigh(cov)
    flat = evals[:, 1] <= rel_tol * np.maximum(evals[:, 2], np.finfo(float).tiny)
    if flat.any():
        raise ConstructionError(
            f"degenerate neighbourhood at point {int(np.flatnonzero(flat)[0])}: "
            "all neighbours are collinear"
        )
    basis = evecs[:, :, 1:]  # two dominant principal axes
    uv = np.einsum("nki,nij->nkj", P, basis)
    # per-neighbourhood scaling keeps qhull's tolerances scale-free
    uv /= np.sqrt(evals[:, 2])[:, None, None]

    if method == "qhull":
        return _qhull_fans(uv, nbhd)
    tri, owner = delaunay_fans(uv)
    if np.unique(owner).shape[0] != n:
        missing = np.setdiff1d(np.arange(n), owner)
        raise ConstructionError(f"point {int(missing[0])} has an empty local triangulation")
    return np.take_along_axis(nbhd[owner], tri, axis=1)


def _qhull_fans(uv, nbhd):
    out = []
    for i in range(uv.shape[0]):
        try:
            simp = Delaunay(uv[i]).simplices
        except QhullError:
            simp = Delaunay(uv[i], qhull_options="QJ").simplices
        fan = simp[(simp == 0).any(axis=1)]
        if len(fan) == 0:
            raise ConstructionError(f"point {i} is not a vertex of its local triangulation")
        out.append(nbhd[i][fan])
    return np.concatenate(out)


def build_laplacian(cloud: PointCloud4D, graph: KnnGraph | None = None,
                    epsilon_fraction: float = DEFAULT_EPSILON_FRACTION,
                    n_neighbors: int = 30) -> LaplacianPair:
    """Stiffness and lumped mass of ``cloud``.

    ``graph`` defaults to the exact ``n_neighbors``-NN graph of the positions.
    """
    positions = cloud.positions if isinstance(cloud, PointCloud4D) else np.asarray(cloud, float)
    if graph is None:
        graph = build_knn(positions, min(n_neighbors, positions.shape[0] - 1))
    if graph.K < MIN_NEIGHBORS:
        raise ParameterError(f"the Laplacian needs K >= {MIN_NEIGHBORS} neighbours, got {graph.K}")
    if graph.n != positions.shape[0]:
        raise ParameterError("graph and cloud sizes differ")
    triangles = local_triangles(positions, graph)
    weights = np.full(len(triangles), 1.0 / 3.0)
    return laplacian_from_triangles(positions, triangles, weights, epsilon_fraction)


def save_triplets(pair: LaplacianPair, directory):
    """Dump ``stiffness.txt`` and ``mass.txt`` as 0-based ``row col value`` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    L = pair.stiffness.tocoo()
    np.savetxt(directory / "stiffness.txt",
               np.column_stack([L.row, L.col, L.data]), fmt=["%d", "%d", "%.17g"])
    idx = np.arange(pair.n)
    np.savetxt(directory / "mass.txt",
               np.column_stack([idx, idx, pair.mass]), fmt=["%d", "%d", "%.17g"])
