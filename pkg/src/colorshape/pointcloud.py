"""4D point clouds (xyz + scalar color): containers, CSV/PLY I/O, exact kNN."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ParameterError, ParseError, ValidationError

logger = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud4D:
    """Positions (n, 3) and one scalar color per point.

    Construction validates shape and finiteness. Coincident points are not
    checked here (that is O(n log n)); :func:`merge_duplicates` and the loaders
    take care of them.
    """

    positions: np.ndarray
    color: np.ndarray
    id: str = ""

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        col = np.asarray(self.color, dtype=float).reshape(-1)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValidationError(f"positions must have shape (n, 3), got {pos.shape}")
        if col.shape[0] != pos.shape[0]:
            raise ValidationError(
                f"color has {col.shape[0]} entries but there are {pos.shape[0]} points"
            )
        bad = ~np.isfinite(pos).all(axis=1) | ~np.isfinite(col)
        if bad.any():
            idx = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"non-finite value at point index {idx}")
        object.__setattr__(self, "positions", _frozen(pos))
        object.__setattr__(self, "color", _frozen(col))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class KnnGraph:
    """Exact K nearest neighbours of every point (self excluded)."""

    neighbor_indices: np.ndarray
    neighbor_distances: np.ndarray
    K: int = field(default=0)

    def __post_init__(self):
        idx = np.asarray(self.neighbor_indices, dtype=np.int64)
        dist = np.asarray(self.neighbor_distances, dtype=float)
        if idx.shape != dist.shape or idx.ndim != 2:
            raise ValidationError("neighbor index/distance arrays must share a 2-D shape")
        object.__setattr__(self, "neighbor_indices", _frozen(idx, np.int64))
        object.__setattr__(self, "neighbor_distances", _frozen(dist))
        object.__setattr__(self, "K", idx.shape[1])

    @property
    def n(self) -> int:
        return self.neighbor_indices.shape[0]

    def adjacency(self):
        """Symmetrized 0/1 adjacency as a CSR matrix."""
        from scipy import sparse

        n, K = self.neighbor_indices.shape
        rows = np.repeat(np.arange(n), K)
        A = sparse.csr_matrix(
            (np.ones(n * K), (rows, self.neighbor_indices.ravel())), shape=(n, n)
        )
        A = A.maximum(A.T)
        A.data[:] = 1.0
        return A.tocsr()


def merge_duplicates(positions, color):
    """Merge points with identical coordinates, averaging their color.

    Returns ``(positions, color, n_merged)`` where ``n_merged`` counts removed
    points. First-occurrence order is preserved.
    """
    positions = np.asarray(positions, dtype=float)
    color = np.asarray(color, dtype=float)
    if positions.shape[0] == 0:
        return positions, color, 0
    _, first, inverse, counts = np.unique(
        positions, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    if counts.max() == 1:
        return positions, color, 0
    sums = np.bincount(inverse, weights=color, minlength=len(first))
    order = np.argsort(first, kind="stable")
    new_pos = positions[first[order]]
    new_col = (sums / counts)[order]
    return new_pos, new_col, int(positions.shape[0] - len(first))


def _make_cloud(positions, color, cloud_id, source):
    positions = np.asarray(positions, dtype=float)
    color = np.asarray(color, dtype=float)
    bad = ~np.isfinite(positions).all(axis=1) | ~np.isfinite(color)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"{source}: non-finite value at row index {idx}")
    positions, color, n_merged = merge_duplicates(positions, color)
    if n_merged:
        logger.warning("%s: merged %d duplicate point(s)", source, n_merged)
    return PointCloud4D(positions, color, id=cloud_id)


def _read_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ["x", "y", "z", "c"]:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}: line {lineno}: expected 4 fields x,y,z,c, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: cannot parse {row!r} as numbers") from None
    data = np.array(rows, dtype=float).reshape(-1, 4)
    return data[:, :3], data[:, 3]


def _read_ply(path, color_property):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ParseError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop, dtype or None for list)])
        while True:
            raw = fh.readline()
            if not raw:
                raise ParseError(f"{path}: missing end_header")
            line = raw.decode("ascii", errors="replace").strip()
            if line == "end_header":
                break
            parts = line.split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise ParseError(f"{path}: property before any element")
                if parts[1] == "list":
                    elements[-1][2].append((parts[-1], None))
                else:
                    if parts[1] not in _PLY_TYPES:
                        raise ParseError(f"{path}: unknown property type {parts[1]!r}")
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise ParseError(f"{path}: no vertex element")
        vi = names.index("vertex")
        _, count, props = elements[vi]
        prop_names = [p[0] for p in props]
        for required in ("x", "y", "z", color_property):
            if required not in prop_names:
                raise ParseError(f"{path}: vertex element lacks property {required!r}")
        if any(p[1] is None for p in props):
            raise ParseError(f"{path}: list properties on the vertex element are not supported")

        if fmt == "ascii":
            skip = 0
            for name, cnt, eprops in elements[:vi]:
                skip += cnt
            lines = fh.read().decode("ascii").splitlines()
            lines = [ln for ln in lines if ln.strip()]
            body = lines[skip:skip + count]
            if len(body) < count:
                raise ParseError(f"{path}: expected {count} vertices, found {len(body)}")
            table = np.empty((count, len(props)))
            for i, ln in enumerate(body):
                vals = ln.split()
                if len(vals) < len(props):
                    raise ParseError(f"{path}: vertex line {i} has {len(vals)} values, expected {len(props)}")
                try:
                    table[i] = [float(v) for v in vals[:len(props)]]
                except ValueError:
                    raise ParseError(f"{path}: vertex line {i}: non-numeric value") from None
            cols = {p: table[:, j] for j, p in enumerate(prop_names)}
        else:
            for name, cnt, eprops in elements[:vi]:
                if any(p[1] is None for p in eprops):
                    raise ParseError(f"{path}: list element {name!r} precedes vertex data")
                dt = np.dtype([(p, "<" + t) for p, t in eprops])
                fh.seek(cnt * dt.itemsize, os.SEEK_CUR)
            dt = np.dtype([(p, "<" + t) for p, t in props])
            buf = fh.read(count * dt.itemsize)
            if len(buf) < count * dt.itemsize:
                raise ParseError(f"{path}: truncated binary vertex data")
            arr = np.frombuffer(buf, dtype=dt, count=count)
            cols = {p: arr[p].astype(float) for p in prop_names}
    positions = np.column_stack([cols["x"], cols["y"], cols["z"]])
    return positions, cols[color_property]


def load_cloud(path, format=None, color_property="quality", cloud_id=None) -> PointCloud4D:
    """Read a cloud from CSV (``x,y,z,c`` rows) or PLY.

    ``format`` defaults to the file suffix. Duplicate positions are merged by
    averaging their color and a warning is logged.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        positions, color = _read_csv(path)
    elif fmt == "ply":
        positions, color = _read_ply(path, color_property)
    else:
        raise ParameterError(f"unknown cloud format {fmt!r} (expected csv or ply)")
    return _make_cloud(positions, color, cloud_id if cloud_id is not None else path.stem, str(path))


def save_cloud(cloud: PointCloud4D, path, format=None, color_property="quality", extra=None):
    """Write a cloud as CSV (17 significant digits) or binary little-endian PLY.

    ``extra`` maps additional per-point scalar property names to arrays; they
    are written to PLY files only.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    try:
        if fmt == "csv":
            data = np.column_stack([cloud.positions, cloud.color])
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("x,y,z,c\n")
                np.savetxt(fh, data, delimiter=",", fmt="%.17g")
        elif fmt == "ply":
            props = [("x", cloud.positions[:, 0]), ("y", cloud.positions[:, 1]),
                     ("z", cloud.positions[:, 2]), (color_property, cloud.color)]
            for name, values in (extra or {}).items():
                props.append((name, np.asarray(values, dtype=float)))
            dt = np.dtype([(name, "<f8") for name, _ in props])
            arr = np.empty(cloud.n, dtype=dt)
            for name, values in props:
                arr[name] = values
            header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.n}"]
            header += [f"property double {name}" for name, _ in props]
            header.append("end_header")
            with open(path, "wb") as fh:
                fh.write(("\n".join(header) + "\n").encode("ascii"))
                fh.write(arr.tobytes())
        else:
            raise ParameterError(f"unknown cloud format {fmt!r} (expected csv or ply)")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_manifest(path):
    """Cloud paths listed one per line; ``#`` starts a comment.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def build_knn(cloud, K: int) -> KnnGraph:
    """Exact K nearest neighbours under Euclidean distance.

    Rows are sorted by distance with ties broken by the lower point index.
    ``cloud`` may be a :class:`PointCloud4D` or an ``(n, d)`` array.
    """
    X = cloud.positions if isinstance(cloud, PointCloud4D) else np.asarray(cloud, dtype=float)
    n = X.shape[0]
    K = int(K)
    if K < 1 or K >= n:
        raise ParameterError(f"K must satisfy 1 <= K < n (K={K}, n={n})")
    extra = min(n, K + 1 + 8)
    tree = cKDTree(X)
    dist, idx = tree.query(X, k=extra)
    dist = np.atleast_2d(dist).reshape(n, extra)
    idx = np.atleast_2d(idx).reshape(n, extra)

    rows = np.repeat(np.arange(n), extra)
    order = np.lexsort((idx.ravel(), dist.ravel(), rows)).reshape(n, extra)
    order -= np.arange(n)[:, None] * extra
    idx = np.take_along_axis(idx, order, axis=1)
    dist = np.take_along_axis(dist, order, axis=1)
    # drop self (distance 0, unique since duplicates are merged at load)
    not_self = idx != np.arange(n)[:, None]
    not_self[not_self.sum(axis=1) > extra - 1, -1] = False
    idx = idx[not_self].reshape(n, extra - 1)
    dist = dist[not_self].reshape(n, extra - 1)
    out_i = idx[:, :K].copy()
    out_d = dist[:, :K].copy()
    if extra < n:
        # a tie at the cutoff could hide a lower index beyond the queried set
        for r in np.flatnonzero(out_d[:, -1] >= dist[:, -1]):
            d_all = np.linalg.norm(X - X[r], axis=1)
            d_all[r] = np.inf
            sel = np.lexsort((np.arange(n), d_all))[:K]
            out_i[r], out_d[r] = sel, d_all[sel]
    return KnnGraph(out_i, out_d)


def brute_force_knn(X, K):
    """O(n^2) reference neighbour search with the same tie-breaking rule."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(D, np.inf)
    idx = np.empty((n, K), dtype=np.int64)
    for r in range(n):
        idx[r] = np.lexsort((np.arange(n), D[r]))[:K]
    return idx, np.take_along_axis(D, idx, axis=1)

