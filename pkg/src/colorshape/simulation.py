"""Synthetic in-control / out-of-control clouds and Monte Carlo ARL studies.

Built-in nominal designs are quasi-uniform samplings of simple closed
surfaces with color varying linearly in z over [0, 10]. Noisy clouds are
random subsamples with Gaussian position and color noise; defects add
stronger positional noise on a compact patch and/or a color shift on a
smaller cluster inside it.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh

from .exceptions import ParameterError, SolverError
from .monitoring import (
    CalibrationConfig, CombinedCusumMonitor, Standardizer, bootstrap_run_lengths,
    calibrate_single, combined_step,
)
from .pointcloud import KnnGraph, PointCloud4D, build_knn, load_cloud
from .spectral import DENSE_MAX_N, SpectralFeatureExtractor

logger = logging.getLogger(__name__)

SHAPES = ("sphere", "torus", "two_lobe", "from_file")
DEFECT_KINDS = ("roughness", "color_spots", "combined")
GOLDEN = (1 + 5 ** 0.5) / 2


@dataclass(frozen=True)
class NominalDesign:
    base_cloud: PointCloud4D
    name: str = ""

    @property
    def n(self) -> int:
        return self.base_cloud.n


@dataclass(frozen=True)
class NoiseSpec:
    tau_s: float = 0.001
    tau_c: float = 0.01
    size_range: tuple = (1492, 1499)

    def __post_init__(self):
        if self.tau_s < 0 or self.tau_c < 0:
            raise ParameterError("noise standard deviations must be nonnegative")
        lo, hi = self.size_range
        if not (1 <= lo <= hi):
            raise ParameterError(f"invalid size range {self.size_range}")
        object.__setattr__(self, "size_range", (int(lo), int(hi)))

    def check(self, design: NominalDesign):
        if self.size_range[1] > design.n:
            raise ParameterError(
                f"size range {self.size_range} exceeds the nominal cloud size {design.n}"
            )


@dataclass(frozen=True)
class DefectSpec:
    """``region_fraction`` of the nominal points form the affected patch;
    ``spot_fraction`` of them (a cluster at the patch centre) get the color
    shift. ``center`` is a nominal point index; by default the point
    furthest along ``(1, 1, 1)`` is used, so the patch is fixed per design.
    """

    kind: str = "combined"
    region_fraction: float = 0.05
    spot_fraction: float = 0.01
    snr: float = 1.0
    color_shift: float = 0.0
    center: Optional[int] = None

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ParameterError(f"unknown defect kind {self.kind!r}; expected one of {DEFECT_KINDS}")
        for name in ("region_fraction", "spot_fraction"):
            v = getattr(self, name)
            if not (0 < v <= 1):
                raise ParameterError(f"{name} must lie in (0, 1], got {v}")
        if self.spot_fraction > self.region_fraction:
            raise ParameterError("spot_fraction cannot exceed region_fraction")
        if self.snr < 1:
            raise ParameterError(f"snr must be at least 1, got {self.snr}")

    @property
    def has_roughness(self) -> bool:
        return self.kind in ("roughness", "combined")

    @property
    def has_color(self) -> bool:
        return self.kind in ("color_spots", "combined")


# --------------------------------------------------------------------------
# nominal designs


def _fibonacci_sphere(n, offset):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    th = 2.0 * np.pi * (i / GOLDEN + offset)
    return np.column_stack([r * np.cos(th), r * np.sin(th), z])


def _torus(n, offset, R=1.0, r=0.4):
    # golden-ratio lattice in (u, F(v)), F the normalized area CDF of the tube angle
    i = np.arange(n) + 0.5
    u = 2.0 * np.pi * ((i / GOLDEN + offset) % 1.0)
    q = 2.0 * np.pi * i / n
    v = q.copy()
    for _ in range(50):
        g = v + (r / R) * np.sin(v) - q
        v -= g / (1.0 + (r / R) * np.cos(v))
    w = R + r * np.cos(v)
    return np.column_stack([w * np.cos(u), w * np.sin(u), r * np.sin(v)])


def _two_lobe(n, offset):
    d = _fibonacci_sphere(n, offset)
    # two unequal bulges plus anisotropic scaling: no rotational symmetry left
    rad = 1.0 + 0.35 * np.exp(-4.0 * np.sum((d - [0.0, 0.0, 1.0]) ** 2, axis=1)) \
        + 0.2 * np.exp(-5.0 * np.sum((d - [0.6, 0.0, -0.8]) ** 2, axis=1))
    return d * rad[:, None] * np.array([1.0, 0.8, 1.25])


def _z_color(P):
    z = P[:, 2]
    lo, hi = z.min(), z.max()
    return 10.0 * (z - lo) / (hi - lo)


def make_nominal(shape="sphere", n=1500, rng_seed=0, path=None) -> NominalDesign:
    """Quasi-uniform built-in surface (or a cloud file) with z-graded color.

    ``rng_seed`` only sets the azimuthal phase of the sampling lattice.
    """
    if shape not in SHAPES:
        raise ParameterError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if shape == "from_file":
        if path is None:
            raise ParameterError("shape 'from_file' needs a path")
        cloud = load_cloud(path)
        return NominalDesign(PointCloud4D(cloud.positions, cloud.color, id="nominal"), str(path))
    if n < 200:
        raise ParameterError(f"built-in designs need n >= 200, got {n}")
    offset = np.random.default_rng(rng_seed).random()
    P = {"sphere": _fibonacci_sphere, "torus": _torus, "two_lobe": _two_lobe}[shape](n, offset)
    if shape == "sphere":
        P /= np.linalg.norm(P, axis=1, keepdims=True)
    return NominalDesign(PointCloud4D(P, _z_color(P), id="nominal"), shape)


# --------------------------------------------------------------------------
# IC / OC sampling


def _draw(design: NominalDesign, noise: NoiseSpec, rng):
    noise.check(design)
    lo, hi = noise.size_range
    m = int(rng.integers(lo, hi + 1))
    idx = np.sort(rng.choice(design.n, size=m, replace=False))
    zp = rng.standard_normal((m, 3))
    zc = rng.standard_normal(m)
    return idx, zp, zc


def sample_ic(design: NominalDesign, noise: NoiseSpec, rng_seed=0, return_indices=False):
    """Random subsample with isotropic position noise and additive color noise."""
    rng = np.random.default_rng(rng_seed)
    idx, zp, zc = _draw(design, noise, rng)
    base = design.base_cloud
    cloud = PointCloud4D(base.positions[idx] + noise.tau_s * zp,
                         base.color[idx] + noise.tau_c * zc, id=_seed_id(rng_seed))
    return (cloud, idx) if return_indices else cloud


def _seed_id(seed):
    if isinstance(seed, (tuple, list)):
        return "s" + "-".join(str(int(s)) for s in seed)
    return f"s{seed}"


_GRAPH_CACHE: dict = {}


def _nominal_graph(design: NominalDesign, K=10):
    key = (id(design.base_cloud), K)
    hit = _GRAPH_CACHE.get(key)
    if hit is None or hit[0] is not design.base_cloud:
        g = build_knn(design.base_cloud, K)
        A = g.adjacency().tocoo()
        d = np.linalg.norm(design.base_cloud.positions[A.row] - design.base_cloud.positions[A.col], axis=1)
        W = sparse.csr_matrix((d, (A.row, A.col)), shape=A.shape)
        hit = (design.base_cloud, W)
        _GRAPH_CACHE.clear()
        _GRAPH_CACHE[key] = hit
    return hit[1]


def defect_center(design: NominalDesign, defect: DefectSpec) -> int:
    if defect.center is not None:
        if not (0 <= defect.center < design.n):
            raise ParameterError(f"defect center {defect.center} is not a nominal point index")
        return int(defect.center)
    return int(np.argmax(design.base_cloud.positions @ np.ones(3)))


def defect_masks(design: NominalDesign, defect: DefectSpec):
    """``(region, spots)`` boolean masks over the nominal points.

    Both are grown geodesically (Dijkstra on the 10-NN graph) from the
    defect centre; sizes are ``ceil(fraction * n)``.
    """
    n = design.n
    W = _nominal_graph(design)
    dist = csgraph.dijkstra(W, directed=False, indices=defect_center(design, defect))
    order = np.lexsort((np.arange(n), dist))
    region = np.zeros(n, dtype=bool)
    spots = np.zeros(n, dtype=bool)
    region[order[:math.ceil(defect.region_fraction * n - 1e-9)]] = True
    spots[order[:math.ceil(defect.spot_fraction * n - 1e-9)]] = True
    return region, spots


def sample_oc(design: NominalDesign, noise: NoiseSpec, defect: DefectSpec, rng_seed=0,
              return_indices=False):
    """Like :func:`sample_ic` with the same draws, plus the defect.

    Positional noise inside the affected patch is scaled by ``snr``; the
    spot cluster receives ``color_shift``. Returns ``(cloud, true_mask)``
    where the mask (over nominal indices) marks the color spots for defects
    with a color component and the roughness patch otherwise.
    """
    rng = np.random.default_rng(rng_seed)
    idx, zp, zc = _draw(design, noise, rng)
    region, spots = defect_masks(design, defect)
    base = design.base_cloud
    scale = np.ones(idx.shape[0])
    if defect.has_roughness:
        scale[region[idx]] = defect.snr
    color = base.color[idx] + noise.tau_c * zc
    if defect.has_color:
        color = color + defect.color_shift * spots[idx]
    cloud = PointCloud4D(base.positions[idx] + noise.tau_s * scale[:, None] * zp, color,
                         id=_seed_id(rng_seed))
    mask = spots if defect.has_color else region
    return (cloud, mask, idx) if return_indices else (cloud, mask)


# --------------------------------------------------------------------------
# graph-Laplacian baseline


def gl_baseline_features(cloud: PointCloud4D, graph: Optional[KnnGraph] = None, k: int = 51,
                         color_range: Optional[float] = None, n_neighbors: int = 30):
    """Smallest nonzero eigenvalues of a Gaussian-weighted kNN graph Laplacian.

    The graph lives on 4-D points ``(x, y, z, c')`` with
    ``c' = c / color_range * bbox_diagonal``; ``color_range`` defaults to the
    cloud's own color range. Returns ``k - 1`` values (null mode dropped).
    """
    P = cloud.positions
    n = P.shape[0]
    if not (2 <= k < n):
        raise ParameterError(f"need 2 <= k < n, got k={k}, n={n}")
    if graph is None:
        graph = build_knn(P, min(n_neighbors, n - 1))
    crange = float(np.ptp(cloud.color)) if color_range is None else float(color_range)
    diag = float(np.linalg.norm(np.ptp(P, axis=0)))
    c = cloud.color / crange * diag if crange > 0 else np.zeros(n)
    X = np.column_stack([P, c])
    A = graph.adjacency().tocoo()
    d2 = np.sum((X[A.row] - X[A.col]) ** 2, axis=1)
    sigma = float(np.sqrt(d2).mean())
    w = np.exp(-d2 / sigma ** 2) if sigma > 0 else np.ones_like(d2)
    W = sparse.csr_matrix((w, (A.row, A.col)), shape=(n, n))
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W
    if n <= DENSE_MAX_N or 5 * k >= n:
        vals = np.linalg.eigvalsh(L.toarray())[:k]
    else:
        shift = -1e-6 * float(np.abs(L.diagonal()).mean())
        try:
            vals = np.sort(eigsh(L.tocsc(), k=k, sigma=shift, which="LM",
                                 return_eigenvectors=False, tol=1e-10))
        except Exception as exc:  # ARPACK failures surface as several types
            raise SolverError(f"graph-Laplacian eigensolver failed: {exc}") from exc
    vals = np.where(np.abs(vals) < 1e-12 * max(abs(vals[-1]), 1.0), 0.0, vals)
    return np.maximum(vals[1:], 0.0)


class GraphLaplacianMonitor:
    """Single CUSUM on the whitened GL-eigenvalue norm, tuned straight to ``arl0``."""

    def __init__(self, cfg: CalibrationConfig):
        self.cfg = cfg

    def fit(self, X):
        cfg = self.cfg
        X = np.asarray(X, dtype=float)
        b1 = X[:cfg.m1]
        b2 = X[cfg.m1:cfg.m1 + cfg.m2]
        b3 = X[cfg.m1 + cfg.m2:cfg.m1 + cfg.m2 + cfg.m3]
        self.standardizer_ = Standardizer().fit(b1)
        s2 = self.standardizer_.statistic(b2)
        self.mu_, self.sigma_ = float(s2.mean()), float(s2.std(ddof=1))
        z3 = (self.standardizer_.statistic(b3) - self.mu_) / self.sigma_
        self.h_, _ = calibrate_single(z3, cfg.k_s, cfg.arl0, cfg.n_bootstrap,
                                      cfg.max_run_length, cfg.rng_seed)
        return self

    def standardized(self, X):
        return (self.standardizer_.statistic(X) - self.mu_) / self.sigma_


# --------------------------------------------------------------------------
# ARL studies


@dataclass
class ArlSummary:
    """Per-replication ARL estimates and first-signal source counts."""

    method: str
    run_lengths: np.ndarray = field(default_factory=lambda: np.empty(0))
    signal_sources: dict = field(default_factory=dict)
    defect_kind: str = "none"
    snr: float = 1.0
    color_shift: float = 0.0
    runs_per_replication: int = 1

    @property
    def n_reps(self) -> int:
        return int(len(self.run_lengths))

    @property
    def aarl(self) -> float:
        return float(np.mean(self.run_lengths)) if self.n_reps else float("nan")

    @property
    def sd(self) -> float:
        return float(np.std(self.run_lengths, ddof=1)) if self.n_reps > 1 else float("nan")


def _draw_cloud(design, noise, defect, seed):
    if defect is None:
        return sample_ic(design, noise, seed)
    return sample_oc(design, noise, defect, seed)[0]


def feature_matrix(design, noise, defect, count, seed, method="smac", k_eig=51, n_neighbors=30):
    """Features of ``count`` fresh clouds; cloud ``i`` uses seed ``(*seed, i)``."""
    seed = tuple(np.atleast_1d(seed).tolist())
    clouds = (_draw_cloud(design, noise, defect, seed + (i,)) for i in range(count))
    if method == "smac":
        ext = SpectralFeatureExtractor(n_eigs=k_eig, n_neighbors=n_neighbors).fit()
        rows = [ext.transform(c)[0] for c in clouds]
        width = 2 * k_eig - 1
    elif method == "gl":
        crange = float(np.ptp(design.base_cloud.color))
        rows = [gl_baseline_features(c, k=k_eig, color_range=crange, n_neighbors=n_neighbors)
                for c in clouds]
        width = k_eig - 1
    else:
        raise ParameterError(f"unknown method {method!r}; expected 'smac' or 'gl'")
    return np.vstack(rows) if rows else np.empty((0, width))


def _first_source(per_chart):
    # per_chart: (2, B) run lengths of the shape and color charts
    s, c = per_chart
    src = np.where(s < c, "shape", np.where(c < s, "color", "both"))
    return {k: int(v) for k, v in zip(*np.unique(src, return_counts=True))}


def run_arl_study(design: NominalDesign, noise: NoiseSpec, defect: Optional[DefectSpec],
                  cfg: CalibrationConfig, method="smac", n_replications=10, rng_seed=0,
                  k_eig=51, n_neighbors=30, stream_pool=None, runs_per_replication=1000,
                  reference_features=None, cross_references=False) -> ArlSummary:
    """Monte Carlo ARL study.

    Each replication draws a fresh reference sample, calibrates, and then
    measures run lengths on streams of IC clouds (``defect=None``) or OC
    clouds (defect present from step 1).

    With ``stream_pool=None`` every replication monitors one literal stream
    of freshly generated clouds, so its ARL estimate is a single run length.
    Passing a pool (an int size, or a precomputed feature matrix) draws
    ``runs_per_replication`` streams by resampling the pool's features, which
    averages out the geometric run-length noise within a replication.
    ``reference_features`` may hold precomputed per-replication reference
    matrices (e.g. to share calibration data between studies).

    A single shared pool is itself a finite sample, and its sampling error is
    common to every replication. With ``cross_references=True`` (in-control
    studies only) replication ``r`` also streams from the reference clouds of
    all other replications, which are independent of its own calibration.
    """
    if method not in ("smac", "gl"):
        raise ParameterError(f"unknown method {method!r}; expected 'smac' or 'gl'")
    summary = ArlSummary(method, defect_kind=defect.kind if defect else "none",
                         snr=defect.snr if defect else 1.0,
                         color_shift=defect.color_shift if defect else 0.0,
                         runs_per_replication=(1 if stream_pool is None and not cross_references
                                               else runs_per_replication))
    if n_replications <= 0:
        return summary
    if cross_references and defect is not None:
        raise ParameterError("cross_references only applies to in-control studies")
    need = cfg.m1 + cfg.m2 + cfg.m3
    pool = stream_pool
    if isinstance(pool, (int, np.integer)):
        pool = feature_matrix(design, noise, defect, int(pool), (rng_seed, 1_000_000),
                              method, k_eig, n_neighbors)

    def reference(rep):
        if reference_features is not None:
            return reference_features[rep]
        return feature_matrix(design, noise, None, need, (rng_seed, rep, 0),
                              method, k_eig, n_neighbors)

    refs = [reference(rep) for rep in range(n_replications)] if cross_references else None
    arls, sources = [], {}
    for rep in range(n_replications):
        Xref = refs[rep] if refs is not None else reference(rep)
        rep_pool = pool
        if cross_references:
            parts = [] if pool is None else [pool]
            parts += [refs[j] for j in range(n_replications) if j != rep]
            rep_pool = np.vstack(parts) if parts else None
        rep_cfg = CalibrationConfig(cfg.m1, cfg.m2, cfg.m3, cfg.arl0, cfg.k_s, cfg.k_c,
                                    cfg.n_bootstrap, cfg.max_run_length,
                                    int(np.random.default_rng([rng_seed, rep]).integers(2 ** 31)))
        if method == "smac":
            mon = fit_smac_monitor(Xref, rep_cfg, k_eig)
        else:
            mon = GraphLaplacianMonitor(rep_cfg).fit(Xref)
        if rep_pool is not None:
            rl, src = pooled_run_lengths(mon, rep_pool, runs_per_replication, cfg.max_run_length,
                                         seed=(rng_seed, rep, 2))
            arls.append(float(rl.mean()))
        else:
            length, src = _literal_run(mon, design, noise, defect, cfg.max_run_length,
                                       (rng_seed, rep, 1), method, k_eig, n_neighbors)
            arls.append(float(length))
        for key, v in src.items():
            sources[key] = sources.get(key, 0) + v
        logger.info("replication %d: ARL %.2f", rep, arls[-1])
    summary.run_lengths = np.array(arls)
    summary.signal_sources = sources
    return summary


def fit_smac_monitor(Xref, cfg: CalibrationConfig, k_eig: int) -> CombinedCusumMonitor:
    return CombinedCusumMonitor(
        n_eigs=k_eig, m1=cfg.m1, m2=cfg.m2, m3=cfg.m3, arl0=cfg.arl0, k_s=cfg.k_s, k_c=cfg.k_c,
        n_bootstrap=cfg.n_bootstrap, max_run_length=cfg.max_run_length, random_state=cfg.rng_seed,
    ).fit(Xref)


def pooled_run_lengths(monitor, pool, n_runs, max_run_length, seed):
    """Run lengths of ``n_runs`` streams resampled from a feature pool."""
    seed = list(np.atleast_1d(seed))
    if isinstance(monitor, CombinedCusumMonitor):
        s, c = monitor.statistics(pool)
        sc, cc = monitor.shape_chart_, monitor.color_chart_
        z = [(s - sc.mu) / sc.sigma, (c - cc.mu) / cc.sigma]
        comb, per = bootstrap_run_lengths(z, [sc.k_ref, cc.k_ref], [sc.h, cc.h],
                                          n_runs, max_run_length, seed)
        return comb, _first_source(per)
    z = monitor.standardized(pool)
    comb, _ = bootstrap_run_lengths([z], [monitor.cfg.k_s], [monitor.h_], n_runs,
                                    max_run_length, seed)
    return comb, {"shape": int(np.count_nonzero(comb < max_run_length))}


def _literal_run(monitor, design, noise, defect, max_run_length, seed, method, k_eig, n_neighbors):
    seed = tuple(seed)
    if method == "smac":
        ext = SpectralFeatureExtractor(n_eigs=k_eig, n_neighbors=n_neighbors).fit()
        state = monitor.initial_state()
        for t in range(1, max_run_length + 1):
            x = ext.transform(_draw_cloud(design, noise, defect, seed + (t,)))
            s, c = monitor.statistics(x)
            state, sig = combined_step(state, float(s[0]), float(c[0]))
            if sig:
                return t, {sig: 1}
        return max_run_length, {}
    crange = float(np.ptp(design.base_cloud.color))
    C = 0.0
    for t in range(1, max_run_length + 1):
        x = gl_baseline_features(_draw_cloud(design, noise, defect, seed + (t,)), k=k_eig,
                                 color_range=crange, n_neighbors=n_neighbors)
        C = max(0.0, C + float(monitor.standardized(x[None, :])[0]) - monitor.cfg.k_s)
        if C > monitor.h_:
            return t, {"shape": 1}
    return max_run_length, {}


def write_arl_summary_csv(path, summaries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "defect_kind", "snr", "color_shift", "aarl", "sd", "n_reps"])
        for s in summaries:
            w.writerow([s.method, s.defect_kind, repr(float(s.snr)), repr(float(s.color_shift)),
                        repr(s.aarl), repr(s.sd), s.n_reps])


def write_run_lengths_csv(path, summary: ArlSummary):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["replication", "arl"])
        for i, v in enumerate(summary.run_lengths):
            w.writerow([i, repr(float(v))])
