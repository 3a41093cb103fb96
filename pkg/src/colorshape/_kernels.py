"""Numba kernels for the per-item loops that dominate run time."""

import numba
import numpy as np


@numba.njit(cache=True)
def _cross(ox, oy, ax, ay, bx, by):
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


@numba.njit(cache=True)
def delaunay_fans(uv):
    """Delaunay fan of point 0 in each planar neighbourhood ``uv[i]``.

    Inversion about the centre maps empty circles through it to half-planes,
    so the fan triangles are the convex-hull edges of the inverted
    neighbours that have the centre on their inner side. Returns
    ``(count, tri)`` with local corner indices; row ``t`` of ``tri`` is
    ``(0, a, b)`` counter-clockwise.
    """
    n, m1, _ = uv.shape
    m = m1 - 1
    out = np.empty((n * m, 3), dtype=np.int64)
    owner = np.empty(n * m, dtype=np.int64)
    cnt = 0
    qx = np.empty(m)
    qy = np.empty(m)
    hull = np.empty(2 * m + 1, dtype=np.int64)
    for i in range(n):
        cx = uv[i, 0, 0]
        cy = uv[i, 0, 1]
        for j in range(m):
            px = uv[i, j + 1, 0] - cx
            py = uv[i, j + 1, 1] - cy
            r2 = px * px + py * py
            qx[j] = px / r2
            qy[j] = py / r2
        # Andrew's monotone chain, collinear points kept on the hull
        order = np.argsort(qy, kind="mergesort")
        order = order[np.argsort(qx[order], kind="mergesort")]
        h = 0
        for t in range(m):
            j = order[t]
            while h >= 2 and _cross(qx[hull[h - 2]], qy[hull[h - 2]], qx[hull[h - 1]],
                                    qy[hull[h - 1]], qx[j], qy[j]) < 0:
                h -= 1
            hull[h] = j
            h += 1
        lower = h + 1
        for t in range(m - 2, -1, -1):
            j = order[t]
            while h >= lower and _cross(qx[hull[h - 2]], qy[hull[h - 2]], qx[hull[h - 1]],
                                        qy[hull[h - 1]], qx[j], qy[j]) < 0:
                h -= 1
            hull[h] = j
            h += 1
        h -= 1  # last point repeats the first
        for t in range(h):
            a = hull[t]
            b = hull[(t + 1) % h]
            if a == b:
                continue
            # centre (origin) strictly on the inner (left) side of edge a->b
            if _cross(qx[a], qy[a], qx[b], qy[b], 0.0, 0.0) > 0:
                out[cnt, 0] = 0
                out[cnt, 1] = a + 1
                out[cnt, 2] = b + 1
                owner[cnt] = i
                cnt += 1
    return out[:cnt], owner[:cnt]


@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def tfce_sweep(stat, indptr, indices, dh, n_levels, E, H, floor_tol):
    """Sum of ``extent^E * h^H * dh`` over levels ``h = dh, 2 dh, ...``.

    Points enter in decreasing ``stat`` order and are merged with active
    neighbours through a union-find, so every level costs one pass over the
    active set.
    """
    n = stat.shape[0]
    out = np.zeros(n)
    order = np.argsort(-stat)
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    active = np.zeros(n, dtype=np.bool_)
    n_active = 0
    for m in range(n_levels, 0, -1):
        h = m * dh
        while n_active < n and stat[order[n_active]] >= h - floor_tol:
            p = order[n_active]
            active[p] = True
            n_active += 1
            for e in range(indptr[p], indptr[p + 1]):
                q = indices[e]
                if active[q]:
                    a = _find(parent, p)
                    b = _find(parent, q)
                    if a != b:
                        if size[a] < size[b]:
                            a, b = b, a
                        parent[b] = a
                        size[a] += size[b]
        w = h ** H * dh
        for j in range(n_active):
            p = order[j]
            out[p] += size[_find(parent, p)] ** E * w
    return out
