"""Lower Laplace-Beltrami spectrum, color regression on eigenfunctions, HKS/WKS."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import ArpackNoConvergence, eigsh
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ParameterError, SolverError
from .laplacian import DEFAULT_EPSILON_FRACTION, LaplacianPair, build_laplacian
from .pointcloud import PointCloud4D, build_knn

DENSE_MAX_N = 500
RESIDUAL_TOL = 1e-6
REPEATED_GAP = 1e-6


class BasisAmbiguityWarning(UserWarning):
    """Two consecutive eigenvalues are (numerically) equal."""


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", _readonly(self.eigenvalues))
        object.__setattr__(self, "eigenfunctions", _readonly(self.eigenfunctions))

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def n(self) -> int:
        return self.eigenfunctions.shape[0]


@dataclass(frozen=True)
class ColorRegression:
    coefficients: np.ndarray
    abs_coefficients: np.ndarray
    residual_norm: float


@dataclass(frozen=True)
class DescriptorMatrix:
    values: np.ndarray
    kind: str
    scales: np.ndarray

    @property
    def p(self) -> int:
        return self.values.shape[1]


def fix_signs(U):
    """Flip columns so each one's largest-magnitude entry is positive.

    Ties go to the lowest row index.
    """
    U = np.array(U, dtype=float, copy=True)
    if U.size == 0:
        return U
    rows = np.argmax(np.abs(U), axis=0)
    flip = U[rows, np.arange(U.shape[1])] < 0
    U[:, flip] *= -1.0
    return U


def residuals(pair: LaplacianPair, spectrum: Spectrum):
    """Per-eigenpair ``||L u - lam M u|| / ||M u||``."""
    U = spectrum.eigenfunctions
    MU = pair.mass[:, None] * U
    R = pair.stiffness @ U - MU * spectrum.eigenvalues[None, :]
    return np.linalg.norm(R, axis=0) / np.linalg.norm(MU, axis=0)


def _warn_repeated(evals):
    lam = np.abs(evals)
    scale = np.maximum(lam[1:], np.finfo(float).tiny)
    close = np.flatnonzero(np.diff(evals) < REPEATED_GAP * scale)
    if close.size:
        warnings.warn(
            f"near-repeated eigenvalues at index pairs {[(int(j), int(j) + 1) for j in close[:5]]}"
            "; eigenfunctions are only defined up to a rotation of their eigenspace",
            BasisAmbiguityWarning,
            stacklevel=3,
        )


def solve_eigs(pair: LaplacianPair, k: int, method: str = "auto", tol: float = 1e-9) -> Spectrum:
    """The ``k`` smallest generalized eigenpairs of ``L u = lam M u``.

    Works on the symmetric form ``M^-1/2 L M^-1/2``: a dense solver for
    small problems (``n <= 500`` or ``k >= n / 5``) and shift-invert Lanczos
    otherwise (``method`` forces either ``"dense"`` or ``"sparse"``). Eigenfunctions come back
    M-orthonormal with the sign convention of :func:`fix_signs`.
    """
    n = pair.n
    k = int(k)
    if not 1 <= k < n:
        raise ParameterError(f"need 1 <= k < n (k={k}, n={n})")
    if method == "auto":
        method = "dense" if (n <= DENSE_MAX_N or 5 * k >= n) else "sparse"
    inv_sqrt_m = 1.0 / np.sqrt(pair.mass)
    D = sparse.diags(inv_sqrt_m)
    S = (D @ pair.stiffness @ D).tocsc()
    S = ((S + S.T) * 0.5).tocsc()

    if method == "dense":
        evals, V = scipy.linalg.eigh(S.toarray(), subset_by_index=[0, k - 1])
    elif method == "sparse":
        diag_scale = float(np.abs(S.diagonal()).mean())
        sigma = -1e-6 * diag_scale
        try:
            evals, V = eigsh(S, k=k, sigma=sigma, which="LM", tol=tol,
                             maxiter=max(50 * k, 1000))
        except ArpackNoConvergence as exc:
            raise SolverError(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {k} eigenpairs found"
            ) from exc
    else:
        raise ParameterError(f"unknown eigensolver method {method!r}")

    order = np.argsort(evals, kind="stable")
    evals = evals[order]
    V = V[:, order]
    # roundoff can push the null eigenvalue slightly below zero
    evals = np.where(np.abs(evals) <= 1e-10 * max(abs(evals[-1]), 1.0), 0.0, evals)
    evals = np.maximum(evals, 0.0)
    U = fix_signs(inv_sqrt_m[:, None] * V)
    spec = Spectrum(evals, U)

    res = residuals(pair, spec)
    limit = RESIDUAL_TOL * np.maximum(1.0, np.abs(evals))
    if np.any(res > limit):
        worst = int(np.argmax(res / limit))
        raise SolverError(
            f"eigenpair {worst} residual {res[worst]:.3e} exceeds {limit[worst]:.1e}"
        )
    _warn_repeated(evals)
    return spec


def drop_zero_eigenvalue(spec: Spectrum) -> np.ndarray:
    """Eigenvalues without the leading null one (length ``k - 1``)."""
    return np.array(spec.eigenvalues[1:])


def regress_color(spec: Spectrum, pair: LaplacianPair, color) -> ColorRegression:
    """Mass-weighted least-squares coefficients of ``color`` on the eigenbasis.

    With M-orthonormal eigenfunctions the normal equations reduce to
    ``beta = U^T M y``.
    """
    y = np.asarray(color, dtype=float).reshape(-1)
    if y.shape[0] != spec.n or pair.n != spec.n:
        raise ParameterError(f"color has {y.shape[0]} values, spectrum has {spec.n} points")
    My = pair.mass * y
    beta = spec.eigenfunctions.T @ My
    r = y - spec.eigenfunctions @ beta
    resid = float(np.sqrt(max(np.dot(r, pair.mass * r), 0.0)))
    return ColorRegression(_readonly(beta), _readonly(np.abs(beta)), resid)


def _nonzero_modes(spec):
    if spec.k < 2 or spec.eigenvalues[1] <= 0:
        raise ParameterError("descriptors need at least one strictly positive eigenvalue")
    return spec.eigenvalues[1:], spec.eigenfunctions[:, 1:]


def compute_hks(spec: Spectrum, times=100, t_min=None, t_max=None) -> DescriptorMatrix:
    """Heat kernel signature ``sum_j exp(-lam_j t) u_j(x)^2`` (null mode excluded).

    ``times`` is a count of log-spaced times in ``[t_min, t_max]`` or an
    explicit array of times. Default range ``4 ln10 / lam_max .. 4 ln10 / lam_2``.
    """
    lam, U = _nonzero_modes(spec)
    if np.ndim(times) == 0:
        t_min = 4.0 * np.log(10.0) / lam[-1] if t_min is None else float(t_min)
        t_max = 4.0 * np.log(10.0) / lam[0] if t_max is None else float(t_max)
        if not (0 < t_min < t_max):
            raise ParameterError(f"need 0 < t_min < t_max, got {t_min}, {t_max}")
        t = np.geomspace(t_min, t_max, int(times))
    else:
        t = np.asarray(times, dtype=float).reshape(-1)
        if np.any(t <= 0):
            raise ParameterError("diffusion times must be positive")
    values = (U ** 2) @ np.exp(-np.outer(lam, t))
    return DescriptorMatrix(values, "hks", t)


def compute_wks(spec: Spectrum, energies=100, sigma=None) -> DescriptorMatrix:
    """Wave kernel signature with per-energy normalization.

    Log-energies are uniform on ``[log lam_2, log lam_max]`` pulled in by
    ``2 sigma`` on each side; ``sigma`` defaults to 7 energy spacings. When the
    pull-in would empty the interval, the full interval is used.
    """
    lam, U = _nonzero_modes(spec)
    if lam.shape[0] < 2:
        raise ParameterError("WKS needs at least two nonzero eigenvalues")
    log_lam = np.log(lam)
    e_min, e_max = log_lam[0], log_lam[-1]
    if np.ndim(energies) == 0:
        count = int(energies)
        if sigma is None:
            sigma = 7.0 * (e_max - e_min) / max(count, 1)
        lo, hi = e_min + 2 * sigma, e_max - 2 * sigma
        if lo >= hi:
            lo, hi = e_min, e_max
        e = np.linspace(lo, hi, count)
    else:
        e = np.asarray(energies, dtype=float).reshape(-1)
        if sigma is None:
            sigma = 7.0 * (e_max - e_min) / max(len(e), 1)
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    G = np.exp(-((e[:, None] - log_lam[None, :]) ** 2) / (2.0 * sigma ** 2))
    norm = G.sum(axis=1)
    values = ((U ** 2) @ G.T) / norm[None, :]
    return DescriptorMatrix(values, "wks", e)


def stack_descriptors(hks: DescriptorMatrix, wks: DescriptorMatrix) -> DescriptorMatrix:
    if hks.values.shape[0] != wks.values.shape[0]:
        raise ParameterError(
            f"descriptor row counts differ ({hks.values.shape[0]} vs {wks.values.shape[0]})"
        )
    return DescriptorMatrix(
        np.hstack([hks.values, wks.values]), "stacked",
        np.concatenate([hks.scales, wks.scales]),
    )


def compute_descriptors(spec: Spectrum, n_hks=100, n_wks=100) -> DescriptorMatrix:
    return stack_descriptors(compute_hks(spec, n_hks), compute_wks(spec, n_wks))


def count_nodal_domains(u, adjacency) -> int:
    """Connected sign domains of ``u`` over an undirected adjacency matrix."""
    A = sparse.csr_matrix(adjacency)
    pos = np.asarray(u) >= 0
    coo = A.tocoo()
    same = pos[coo.row] == pos[coo.col]
    sub = sparse.csr_matrix((np.ones(same.sum()), (coo.row[same], coo.col[same])), shape=A.shape)
    n_comp, _ = csgraph.connected_components(sub, directed=False)
    return int(n_comp)


def suggest_n_eigs(eigenvalues):
    """Elbow of the mean log-spectrum (knee of the normalized curve).

    ``eigenvalues`` is ``(m, k)`` or ``(k,)`` including the null mode. Returns
    ``(k_suggested, curve)``: ``curve[j]`` is the normalized distance below the
    chord for nonzero mode ``j + 1``. This is a plain max-distance-to-chord
    knee rule, not a reproduction of any particular published procedure.
    """
    E = np.atleast_2d(np.asarray(eigenvalues, dtype=float))[:, 1:]
    if E.shape[1] < 3:
        raise ParameterError("need at least 3 nonzero eigenvalues to locate an elbow")
    y = np.log(np.maximum(E, np.finfo(float).tiny)).mean(axis=0)
    x = np.arange(y.shape[0], dtype=float)
    xn = x / x[-1]
    yn = (y - y[0]) / (y[-1] - y[0]) if y[-1] != y[0] else np.zeros_like(y)
    curve = yn - xn
    return int(np.argmax(curve)) + 2, curve


@dataclass(frozen=True)
class CloudFeatures:
    """Everything computed for one cloud on the way to its monitoring features."""

    sample_id: str
    pair: LaplacianPair
    spectrum: Spectrum
    regression: ColorRegression

    @property
    def eigenvalues(self):
        return drop_zero_eigenvalue(self.spectrum)

    @property
    def beta_abs(self):
        return np.array(self.regression.abs_coefficients)

    def vector(self):
        return np.concatenate([self.eigenvalues, self.beta_abs])


def extract_features(cloud: PointCloud4D, n_eigs=101, n_neighbors=30,
                     epsilon_fraction=DEFAULT_EPSILON_FRACTION, method="auto") -> CloudFeatures:
    if n_eigs < 2:
        raise ParameterError(f"n_eigs must be at least 2, got {n_eigs}")
    graph = build_knn(cloud, min(n_neighbors, cloud.n - 1))
    pair = build_laplacian(cloud, graph, epsilon_fraction)
    spec = solve_eigs(pair, n_eigs, method=method)
    reg = regress_color(spec, pair, cloud.color)
    return CloudFeatures(cloud.id, pair, spec, reg)


class SpectralFeatureExtractor(TransformerMixin, BaseEstimator):
    """Map clouds to ``[lam_2..lam_k, |beta_1|..|beta_k|]`` rows.

    Stateless: ``fit`` only validates parameters. Output has ``2k - 1``
    columns; :attr:`n_shape_features_` of them are eigenvalues.
    """

    def __init__(self, n_eigs=101, n_neighbors=30, epsilon_fraction=DEFAULT_EPSILON_FRACTION):
        self.n_eigs = n_eigs
        self.n_neighbors = n_neighbors
        self.epsilon_fraction = epsilon_fraction

    def fit(self, X=None, y=None):
        if self.n_eigs < 2:
            raise ParameterError(f"n_eigs must be at least 2, got {self.n_eigs}")
        self.n_shape_features_ = self.n_eigs - 1
        self.n_features_out_ = 2 * self.n_eigs - 1
        return self

    def extract(self, clouds):
        return [extract_features(c, self.n_eigs, self.n_neighbors, self.epsilon_fraction)
                for c in clouds]

    def transform(self, X):
        if isinstance(X, PointCloud4D):
            X = [X]
        feats = self.extract(X)
        if not feats:
            return np.empty((0, 2 * self.n_eigs - 1))
        return np.vstack([f.vector() for f in feats])


def write_features_csv(path, features):
    """Long-format export: ``sample_id, feature_kind, index, value``.

    ``index`` is the eigenpair index, so ``lambda`` rows start at 1 (the null
    mode is dropped) and ``beta_abs`` rows start at 0.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "feature_kind", "index", "value"])
        for f in features:
            for j, v in enumerate(f.eigenvalues, start=1):
                w.writerow([f.sample_id, "lambda", j, repr(float(v))])
            for j, v in enumerate(f.beta_abs):
                w.writerow([f.sample_id, "beta_abs", j, repr(float(v))])


def read_features_csv(path, n_eigs=None):
    """Inverse of :func:`write_features_csv`; returns ``(ids, lambdas, beta_abs)``."""
    rows = {}
    order = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            sid = rec["sample_id"]
            if sid not in rows:
                rows[sid] = {"lambda": {}, "beta_abs": {}}
                order.append(sid)
            rows[sid][rec["feature_kind"]][int(rec["index"])] = float(rec["value"])
    lam = np.array([[rows[s]["lambda"][j] for j in sorted(rows[s]["lambda"])] for s in order])
    beta = np.array([[rows[s]["beta_abs"][j] for j in sorted(rows[s]["beta_abs"])] for s in order])
    if n_eigs is not None and order and (lam.shape[1] != n_eigs - 1 or beta.shape[1] != n_eigs):
        raise ParameterError(f"feature file does not match n_eigs={n_eigs}")
    return order, lam, beta
