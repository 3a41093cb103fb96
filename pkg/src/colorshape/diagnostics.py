"""Post-signal diagnosis: functional maps, texture transport and TFCE testing.

After an alarm, each sample's color coefficients are carried back to the
reference eigenbasis through a functional map and reconstructed on the
reference cloud. A max-statistic permutation test on TFCE-enhanced pointwise
F-statistics then decides whether color differs between in-control and
out-of-control samples, and where.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy import sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._kernels import tfce_sweep
from .exceptions import ParameterError
from .laplacian import DEFAULT_EPSILON_FRACTION, LaplacianPair
from .pointcloud import KnnGraph, PointCloud4D, build_knn
from .spectral import (
    ColorRegression, DescriptorMatrix, Spectrum, compute_hks, compute_wks,
    extract_features, stack_descriptors,
)

TFCE_E = 0.5
TFCE_H = 2.0
TFCE_STEPS = 100


@dataclass(frozen=True)
class FunctionalMap:
    """``matrix`` carries reference coefficients to sample coefficients."""

    matrix: np.ndarray
    source_id: str = ""
    target_id: str = ""
    eta: float = 0.0


@dataclass(frozen=True)
class TransportedTexture:
    values: np.ndarray
    source_id: str = ""


@dataclass(frozen=True)
class DiagnosticReport:
    verdict: str
    p_values: np.ndarray
    significant_mask: np.ndarray
    alpha: float
    n_permutations: int
    f_stat: Optional[np.ndarray] = None
    tfce: Optional[np.ndarray] = None


def project_descriptors(spec: Spectrum, pair: LaplacianPair, desc: DescriptorMatrix):
    """``U^T M D``: descriptor columns expressed in the eigenbasis (k x p)."""
    return spec.eigenfunctions.T @ (pair.mass[:, None] * desc.values)


def functional_map_objective(C, A0, A1, lam0, lam1, eta):
    D = (np.asarray(lam1)[:, None] - np.asarray(lam0)[None, :]) ** 2
    return float(np.sum((C @ A0 - A1) ** 2) + eta * np.sum(C ** 2 * D))


def solve_functional_map(A0, A1, lam0, lam1, eta):
    """Row-by-row minimizer of ``||C A0 - A1||^2 + eta * sum c_ij^2 (lam1_i - lam0_j)^2``."""
    A0 = np.asarray(A0, dtype=float)
    A1 = np.asarray(A1, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    lam1 = np.asarray(lam1, dtype=float)
    k = A0.shape[0]
    if A1.shape != A0.shape or lam0.shape != (k,) or lam1.shape != (k,):
        raise ParameterError(
            f"inconsistent functional-map inputs: A0 {A0.shape}, A1 {A1.shape}, "
            f"spectra {lam0.shape}/{lam1.shape}"
        )
    if eta < 0:
        raise ParameterError(f"eta must be nonnegative, got {eta}")
    G = A0 @ A0.T
    rhs = A1 @ A0.T
    C = np.empty((k, k))
    for i in range(k):
        Ki = G + np.diag(eta * (lam1[i] - lam0) ** 2)
        try:
            cf = scipy.linalg.cho_factor(Ki, lower=True, check_finite=True)
            C[i] = scipy.linalg.cho_solve(cf, rhs[i])
        except np.linalg.LinAlgError:
            raise ParameterError(
                f"functional-map system for row {i} is singular; use eta > 0"
            ) from None
        if eta == 0 and np.linalg.cond(Ki) > 1e14:
            raise ParameterError(
                f"functional-map system for row {i} is numerically singular; use eta > 0"
            )
    return C


def estimate_functional_map(ref_spec: Spectrum, ref_pair: LaplacianPair, ref_desc: DescriptorMatrix,
                            smp_spec: Spectrum, smp_pair: LaplacianPair, smp_desc: DescriptorMatrix,
                            eta: float = 1e-3, source_id="", target_id="") -> FunctionalMap:
    if ref_spec.k != smp_spec.k:
        raise ParameterError(f"spectra have different sizes ({ref_spec.k} vs {smp_spec.k})")
    if ref_desc.p != smp_desc.p:
        raise ParameterError(f"descriptor counts differ ({ref_desc.p} vs {smp_desc.p})")
    A0 = project_descriptors(ref_spec, ref_pair, ref_desc)
    A1 = project_descriptors(smp_spec, smp_pair, smp_desc)
    C = solve_functional_map(A0, A1, ref_spec.eigenvalues, smp_spec.eigenvalues, eta)
    return FunctionalMap(C, source_id, target_id, eta)


def transport_texture(fmap: FunctionalMap, reg: ColorRegression, ref_spec: Spectrum) -> TransportedTexture:
    """Pull the sample's color coefficients back and reconstruct on the reference."""
    beta = np.asarray(reg.coefficients, dtype=float)
    k = fmap.matrix.shape[0]
    if beta.shape != (k,) or ref_spec.k != k:
        raise ParameterError(
            f"dimension mismatch: map {fmap.matrix.shape}, coefficients {beta.shape}, "
            f"reference basis k={ref_spec.k}"
        )
    gamma = fmap.matrix.T @ beta
    return TransportedTexture(ref_spec.eigenfunctions @ gamma, fmap.target_id)


# --------------------------------------------------------------------------
# TFCE and the permutation test


def _adjacency_csr(adjacency, n):
    if isinstance(adjacency, KnnGraph):
        A = adjacency.adjacency()
    elif isinstance(adjacency, PointCloud4D):
        A = build_knn(adjacency, min(10, adjacency.n - 1)).adjacency()
    else:
        A = sparse.csr_matrix(adjacency)
        A = ((A + A.T) != 0).astype(np.int8).tocsr()
    if A.shape != (n, n):
        raise ParameterError(f"adjacency is {A.shape}, statistic has {n} points")
    return A.indptr.astype(np.int64), A.indices.astype(np.int64)


def _tfce(stat, indptr, indices, dh, E, H):
    top = float(stat.max()) if stat.size else 0.0
    if top <= 0:
        return np.zeros_like(stat)
    if dh is None:
        dh = top / TFCE_STEPS
    if not dh > 0:
        raise ParameterError(f"dh must be positive, got {dh}")
    n_levels = int(np.floor(top / dh * (1 + 1e-12)))
    return tfce_sweep(stat, indptr, indices, float(dh), n_levels, float(E), float(H),
                      1e-12 * top)


def tfce_enhance(stat, adjacency, dh=None, E=TFCE_E, H=TFCE_H):
    """Threshold-free cluster enhancement over an undirected point graph.

    ``TFCE(q) = sum_h extent(q, h)^E * h^H * dh`` for ``h = dh, 2 dh, ...`` up
    to ``max(stat)``, where ``extent`` counts the connected component of
    ``{stat >= h}`` containing ``q``. ``dh`` defaults to ``max(stat) / 100``.
    ``adjacency`` may be a :class:`KnnGraph`, a sparse matrix (symmetrized
    here) or the reference cloud (10-NN graph built on the fly).
    """
    stat = np.ascontiguousarray(stat, dtype=float).reshape(-1)
    if np.any(stat < 0) or not np.isfinite(stat).all():
        raise ParameterError("TFCE needs finite nonnegative statistics")
    indptr, indices = _adjacency_csr(adjacency, stat.shape[0])
    return _tfce(stat, indptr, indices, dh, E, H)


def _texture_matrix(textures):
    rows = [np.asarray(t.values if isinstance(t, TransportedTexture) else t, dtype=float).reshape(-1)
            for t in textures]
    return np.vstack(rows) if rows else np.empty((0, 0))


def f_statistics(X, labels):
    """One-way two-group ANOVA F per column; ``labels`` is ``(P, N)`` boolean.

    Returns ``(P, n_points)``. Columns where both groups coincide get F = 0.
    """
    X = np.asarray(X, dtype=float)
    labels = np.atleast_2d(labels)
    N = X.shape[0]
    n1 = labels.sum(axis=1).astype(float)[:, None]
    n2 = N - n1
    total = X.sum(axis=0)
    grand = total / N
    s1 = labels.astype(float) @ X
    m1 = s1 / n1
    m2 = (total - s1) / n2
    ssb = n1 * (m1 - grand) ** 2 + n2 * (m2 - grand) ** 2
    sst = ((X - grand) ** 2).sum(axis=0)
    ssw = np.maximum(sst - ssb, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = ssb / (ssw / (N - 2))
    F[~(ssb > 1e-14 * np.maximum(sst, np.finfo(float).tiny))] = 0.0
    # constant-within-groups columns with distinct means: effectively infinite
    F[~np.isfinite(F)] = np.finfo(float).max / 1e10
    return F


def pointwise_test(ic_textures, oc_textures, reference, alpha=0.01, n_permutations=999,
                   rng_seed=0, dh=None, E=TFCE_E, H=TFCE_H) -> DiagnosticReport:
    """Max-TFCE permutation test of IC vs OC textures at every reference point.

    ``reference`` supplies the adjacency: a cloud (10-NN graph), a
    :class:`KnnGraph` or a sparse matrix. Group labels are permuted jointly
    for all points; ``p(q) = (1 + #{max_perm >= TFCE(q)}) / (P + 1)``.
    """
    Xi, Xo = _texture_matrix(ic_textures), _texture_matrix(oc_textures)
    n_ic, n_oc = Xi.shape[0], Xo.shape[0]
    if n_ic == 0 or n_oc == 0:
        raise ParameterError("both groups need at least one texture")
    if n_ic + n_oc - 2 < 1:
        raise ParameterError(
            f"F-test undefined: groups of sizes {n_ic} and {n_oc} leave zero within-group "
            "degrees of freedom"
        )
    if Xi.shape[1] != Xo.shape[1]:
        raise ParameterError("IC and OC textures have different lengths")
    if not (0 < alpha < 1):
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if n_permutations < 1:
        raise ParameterError("n_permutations must be positive")
    X = np.vstack([Xi, Xo])
    N, n0 = X.shape
    indptr, indices = _adjacency_csr(reference, n0)

    observed_labels = np.zeros(N, dtype=bool)
    observed_labels[n_ic:] = True
    F_obs = f_statistics(X, observed_labels)[0]
    T_obs = _tfce(F_obs, indptr, indices, dh, E, H)

    rng = np.random.default_rng(rng_seed)
    maxima = np.empty(n_permutations)
    batch = 64
    for start in range(0, n_permutations, batch):
        stop = min(start + batch, n_permutations)
        labels = np.stack([rng.permutation(observed_labels) for _ in range(start, stop)])
        F = f_statistics(X, labels)
        for j in range(stop - start):
            maxima[start + j] = _tfce(np.ascontiguousarray(F[j]), indptr, indices, dh, E, H).max()

    sorted_max = np.sort(maxima)
    exceed = n_permutations - np.searchsorted(sorted_max, T_obs, side="left")
    p = (1.0 + exceed) / (n_permutations + 1.0)
    mask = p < alpha
    verdict = "shape_and_color" if mask.any() else "shape_only"
    return DiagnosticReport(verdict, p, mask, alpha, int(n_permutations), F_obs, T_obs)


def threshold_localize(ic_textures, oc_texture, quantile=0.99):
    """Single-sample fallback: extreme deviations of OC from the IC mean.

    ``d = mean(IC) - OC``; the side (positive or negative) holding the
    largest ``|d|`` is kept, and within it the points whose ``|d|`` exceeds
    the ``quantile`` empirical quantile. Heuristic.
    """
    if not (0.5 < quantile < 1):
        raise ParameterError(f"quantile must lie in (0.5, 1), got {quantile}")
    Xi = _texture_matrix(ic_textures)
    if Xi.shape[0] == 0:
        raise ParameterError("need at least one IC texture")
    oc = np.asarray(oc_texture.values if isinstance(oc_texture, TransportedTexture) else oc_texture,
                    dtype=float).reshape(-1)
    d = Xi.mean(axis=0) - oc
    pos_max = float(d.max(initial=0.0))
    neg_max = float(-d.min(initial=0.0))
    if pos_max == neg_max:
        return np.zeros(d.shape[0], dtype=bool)
    side = d > 0 if pos_max > neg_max else d < 0
    mag = np.abs(d)
    cut = np.quantile(mag[side], quantile)
    return side & (mag > cut)


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return float(np.count_nonzero(a & b) / union) if union else 1.0


# --------------------------------------------------------------------------
# estimator wrapper


class TextureTransporter(TransformerMixin, BaseEstimator):
    """Reconstruct sample colors on a fixed reference cloud.

    ``fit(reference)`` computes the reference eigenbasis and descriptors; the
    HKS times and WKS energies found there are reused for every sample so
    the two descriptor sets are comparable. ``transform(clouds)`` returns an
    ``(m, n0)`` array of transported textures.
    """

    def __init__(self, n_eigs=51, n_neighbors=30, eta=1e-3, n_hks=100, n_wks=100,
                 epsilon_fraction=DEFAULT_EPSILON_FRACTION):
        self.n_eigs = n_eigs
        self.n_neighbors = n_neighbors
        self.eta = eta
        self.n_hks = n_hks
        self.n_wks = n_wks
        self.epsilon_fraction = epsilon_fraction

    def _descriptors(self, spec):
        hks = compute_hks(spec, self.hks_times_)
        wks = compute_wks(spec, self.wks_energies_, self.wks_sigma_)
        return stack_descriptors(hks, wks)

    def fit(self, reference: PointCloud4D, y=None):
        feats = extract_features(reference, self.n_eigs, self.n_neighbors, self.epsilon_fraction)
        self.reference_ = feats
        spec = feats.spectrum
        self.hks_times_ = compute_hks(spec, self.n_hks).scales
        e = compute_wks(spec, self.n_wks).scales
        log_lam = np.log(spec.eigenvalues[1:])
        self.wks_sigma_ = 7.0 * (log_lam[-1] - log_lam[0]) / max(self.n_wks, 1)
        self.wks_energies_ = e
        self.reference_descriptors_ = self._descriptors(spec)
        self.n_points_ = reference.n
        return self

    def functional_map(self, cloud_or_features):
        check_is_fitted(self, "reference_")
        f = cloud_or_features
        if isinstance(f, PointCloud4D):
            f = extract_features(f, self.n_eigs, self.n_neighbors, self.epsilon_fraction)
        ref = self.reference_
        fmap = estimate_functional_map(
            ref.spectrum, ref.pair, self.reference_descriptors_,
            f.spectrum, f.pair, self._descriptors(f.spectrum), self.eta,
            source_id=ref.sample_id, target_id=f.sample_id,
        )
        return fmap, f

    def transport(self, cloud) -> TransportedTexture:
        fmap, f = self.functional_map(cloud)
        return transport_texture(fmap, f.regression, self.reference_.spectrum)

    def transform(self, X):
        if isinstance(X, PointCloud4D):
            X = [X]
        out = [self.transport(c).values for c in X]
        return np.vstack(out) if out else np.empty((0, self.n_points_))
