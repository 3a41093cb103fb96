"""Combined shape + color CUSUM monitoring with bootstrap-calibrated limits.

Shape features are the nonzero eigenvalues, color features the absolute
eigenfunction-regression coefficients. Each family is whitened with
moments from the first reference block; the squared norm of the whitened
vector is monitored with a one-sided upper CUSUM. The scheme alarms when
either chart crosses its limit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import CalibrationError, ParameterError, ParseError

logger = logging.getLogger(__name__)

BRACKET = (0.01, 100.0)
ARL_REL_TOL = 0.02


class Standardizer(TransformerMixin, BaseEstimator):
    """Center and whiten with the symmetric inverse square root of the covariance.

    Covariance eigenvalues are floored at ``floor * trace / d`` so nearly
    collinear feature sets stay invertible. After ``fit``,
    ``discrepancy_`` holds ``||cov(Z) - I||_F`` of the whitened training data.
    """

    def __init__(self, floor=1e-10):
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_min_samples=1)
        m, d = X.shape
        if m <= d:
            raise ParameterError(
                f"need more samples than features to whiten (m={m}, d={d}); "
                "increase the first reference block"
            )
        self.mean_ = X.mean(axis=0)
        cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
        w, V = np.linalg.eigh(cov)
        eps = self.floor * np.trace(cov) / d
        w = np.maximum(w, eps if eps > 0 else np.finfo(float).tiny)
        W = (V / np.sqrt(w)) @ V.T
        self.whitening_ = (W + W.T) * 0.5
        self.covariance_ = cov
        self.n_features_in_ = d
        self.discrepancy_ = self.discrepancy(X)
        return self

    def discrepancy(self, X) -> float:
        """``||cov(whitened X) - I||_F``; on held-out data it shrinks as ``m`` grows."""
        Z = np.atleast_2d(self.transform(X))
        cov = np.atleast_2d(np.cov(Z, rowvar=False, ddof=1))
        return float(np.linalg.norm(cov - np.eye(self.n_features_in_), "fro"))

    def transform(self, X):
        check_is_fitted(self, "whitening_")
        X = np.asarray(X, dtype=float)
        one = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ParameterError(
                f"expected {self.n_features_in_} features, got {X.shape[1]}"
            )
        Z = (X - self.mean_) @ self.whitening_
        return Z[0] if one else Z

    def statistic(self, X):
        """Squared norm of the whitened vector(s)."""
        Z = self.transform(X)
        return np.sum(Z ** 2, axis=-1)


def fit_standardizer(features) -> Standardizer:
    return Standardizer().fit(features)


def statistic(standardizer: Standardizer, x) -> float:
    return float(standardizer.statistic(np.asarray(x, dtype=float).reshape(-1)))


@dataclass(frozen=True)
class CusumChart:
    """One-sided upper CUSUM on ``(x - mu) / sigma`` with reference ``k_ref``."""

    mu: float
    sigma: float
    k_ref: float
    h: float = np.inf
    state: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not self.k_ref > 0:
            raise ParameterError(f"reference value must be positive, got {self.k_ref}")

    @property
    def signaling(self) -> bool:
        return self.state > self.h


def cusum_update(chart: CusumChart, x: float) -> CusumChart:
    return replace(chart, state=max(0.0, chart.state + (x - chart.mu) / chart.sigma - chart.k_ref))


@dataclass(frozen=True)
class CombinedChartState:
    shape_chart: CusumChart
    color_chart: CusumChart
    time_index: int = 0
    last_signal: Optional[str] = None


def _signal_source(shape_on, color_on):
    if shape_on and color_on:
        return "both"
    if shape_on:
        return "shape"
    if color_on:
        return "color"
    return None


def combined_step(state: CombinedChartState, s: float, c: float):
    """Advance both charts one observation; returns ``(new_state, signal)``.

    Charts are not reset after a signal.
    """
    sc = cusum_update(state.shape_chart, s)
    cc = cusum_update(state.color_chart, c)
    signal = _signal_source(sc.signaling, cc.signaling)
    return CombinedChartState(sc, cc, state.time_index + 1, signal), signal


@dataclass(frozen=True)
class CalibrationConfig:
    m1: int = 600
    m2: int = 300
    m3: int = 1000
    arl0: float = 100.0
    k_s: float = 0.05
    k_c: float = 0.05
    n_bootstrap: int = 1000
    max_run_length: int = 4000
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("m1", "m2", "m3", "n_bootstrap", "max_run_length"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be a positive integer")
        if not self.arl0 > 1:
            raise ParameterError(f"arl0 must exceed 1, got {self.arl0}")
        if self.max_run_length <= self.arl0:
            raise ParameterError("max_run_length must exceed arl0")
        if not (self.k_s > 0 and self.k_c > 0):
            raise ParameterError("reference values k_s and k_c must be positive")


# --------------------------------------------------------------------------
# bootstrap run lengths


def bootstrap_run_lengths(z_list, k_list, h_list, n_bootstrap, max_run_length, seed):
    """Run lengths of CUSUMs driven by jointly resampled standardized values.

    ``z_list`` holds one standardized sample per chart, all of the same
    length; every bootstrap sequence draws the same time indices for all
    charts. A sequence alarms at the first step any chart exceeds its limit;
    sequences with no alarm by ``max_run_length`` are censored at that value.
    Returns ``(combined, per_chart)`` run-length arrays. The same ``seed``
    reproduces the same resamples, so calls with different limits share
    common random numbers.
    """
    z_list = [np.asarray(z, dtype=float) for z in z_list]
    m = z_list[0].shape[0]
    rng = np.random.default_rng(seed)
    B = int(n_bootstrap)
    C = np.zeros((len(z_list), B))
    rl = np.full((len(z_list), B), max_run_length, dtype=np.int64)
    open_ = np.ones((len(z_list), B), dtype=bool)
    k = np.asarray(k_list, dtype=float)[:, None]
    h = np.asarray(h_list, dtype=float)[:, None]
    for t in range(1, max_run_length + 1):
        idx = rng.integers(0, m, size=B)
        x = np.stack([z[idx] for z in z_list])
        C = np.maximum(0.0, C + x - k)
        hit = open_ & (C > h)
        if hit.any():
            rl[hit] = t
            open_ &= ~hit
            if not open_.any():
                break
    return rl.min(axis=0), rl


def _bisect(arl_of, lo, hi, target, rel_tol=ARL_REL_TOL, aim=0.005, max_iter=60):
    # aims well inside the accepted band so a re-estimate with fresh
    # resamples also lands inside it
    a_lo, a_hi = arl_of(lo), arl_of(hi)
    if a_lo > target * (1 + rel_tol):
        raise CalibrationError(
            f"ARL {a_lo:.1f} at the lower bracket {lo:.3g} already exceeds the target {target:.1f}; "
            "the calibration sample produces too few alarms (use a larger m3)"
        )
    if a_hi < target * (1 - rel_tol):
        raise CalibrationError(
            f"ARL {a_hi:.1f} at the upper bracket {hi:.3g} stays below the target {target:.1f}"
        )
    best = (abs(a_lo - target), lo, a_lo)
    for x, a in ((hi, a_hi),):
        best = min(best, (abs(a - target), x, a))
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        a = arl_of(mid)
        best = min(best, (abs(a - target), mid, a))
        if abs(a - target) <= aim * target or hi - lo <= 1e-10 * hi:
            break
        if a < target:
            lo = mid
        else:
            hi = mid
    if best[0] > rel_tol * target:
        logger.warning("bisection stopped at ARL %.2f (target %.2f)", best[2], target)
    return best[1], best[2]


@dataclass(frozen=True)
class ControlLimits:
    h_s: float
    h_c: float
    stage1_h_s: float
    stage1_h_c: float
    arl_shape: float
    arl_color: float
    arl_combined: float

    def __iter__(self):
        yield self.h_s
        yield self.h_c


def _standardize(x, moments):
    mu, sd = moments
    return (np.asarray(x, dtype=float) - mu) / sd


def calibrate_single(z, k_ref, arl0, n_bootstrap, max_run_length, seed, bracket=BRACKET):
    """Limit ``h`` giving bootstrap ARL ``arl0`` for one chart on standardized ``z``."""
    z = np.asarray(z, dtype=float)
    if np.ptp(z) == 0:
        raise CalibrationError("calibration statistics are constant; no alarms can be simulated")

    def arl(h):
        comb, _ = bootstrap_run_lengths([z], [k_ref], [h], n_bootstrap, max_run_length, seed)
        return comb.mean()

    return _bisect(arl, bracket[0], bracket[1], arl0)


def calibrate_limits(s_cal, c_cal, cfg: CalibrationConfig,
                     shape_moments=(0.0, 1.0), color_moments=(0.0, 1.0)) -> ControlLimits:
    """Bootstrap-assisted bisection for the two limits of the combined scheme.

    Stage 1 tunes each chart alone to an ARL of ``2 * arl0``. Stage 2 scales
    both limits by a common factor until the combined scheme, resampling
    ``(s, c)`` pairs jointly, reaches ``arl0``. ``*_moments`` are the
    in-control ``(mu, sigma)`` used to standardize the raw statistics.
    Iterating the result yields ``(h_s, h_c)``.
    """
    s_cal = np.asarray(s_cal, dtype=float).reshape(-1)
    c_cal = np.asarray(c_cal, dtype=float).reshape(-1)
    if s_cal.shape != c_cal.shape:
        raise ParameterError("shape and color calibration samples differ in length")
    if np.ptp(s_cal) == 0 or np.ptp(c_cal) == 0:
        raise CalibrationError("calibration statistics are constant; no alarms can be simulated")
    zs = _standardize(s_cal, shape_moments)
    zc = _standardize(c_cal, color_moments)
    B, T, seed = cfg.n_bootstrap, cfg.max_run_length, cfg.rng_seed

    h_s, a_s = calibrate_single(zs, cfg.k_s, 2 * cfg.arl0, B, T, seed)
    h_c, a_c = calibrate_single(zc, cfg.k_c, 2 * cfg.arl0, B, T, seed)

    def arl(rho):
        comb, _ = bootstrap_run_lengths([zs, zc], [cfg.k_s, cfg.k_c],
                                        [rho * h_s, rho * h_c], B, T, seed)
        return comb.mean()

    lo = BRACKET[0] / min(h_s, h_c)
    hi = BRACKET[1] / max(h_s, h_c)
    rho, a = _bisect(arl, lo, hi, cfg.arl0)
    return ControlLimits(rho * h_s, rho * h_c, h_s, h_c, a_s, a_c, a)


def bootstrap_arl(s_cal, c_cal, k_s, k_c, h_s, h_c, n_bootstrap=1000, max_run_length=4000,
                  seed=0, shape_moments=(0.0, 1.0), color_moments=(0.0, 1.0)):
    """Combined-scheme bootstrap ARL at given limits."""
    comb, _ = bootstrap_run_lengths(
        [_standardize(s_cal, shape_moments), _standardize(c_cal, color_moments)],
        [k_s, k_c], [h_s, h_c], n_bootstrap, max_run_length, seed)
    return float(comb.mean())


# --------------------------------------------------------------------------
# orchestration


@dataclass
class StepRecord:
    t: int
    s: float
    c: float
    Cs: float
    Cc: float
    signal: Optional[str]


@dataclass
class MonitoringReport:
    steps: list = field(default_factory=list)
    monitor: Optional["CombinedCusumMonitor"] = None

    @property
    def run_length(self) -> Optional[int]:
        for rec in self.steps:
            if rec.signal:
                return rec.t
        return None

    @property
    def signal_source(self) -> Optional[str]:
        for rec in self.steps:
            if rec.signal:
                return rec.signal
        return None

    @property
    def signaled(self) -> bool:
        return self.run_length is not None


class CombinedCusumMonitor(BaseEstimator):
    """Two-chart CUSUM scheme fitted on in-control spectral features.

    ``fit`` takes reference rows ``[lam_2..lam_k, |beta_1|..|beta_k|]`` (as
    produced by :class:`~colorshape.spectral.SpectralFeatureExtractor`) in
    their natural order and splits them into sequential blocks of sizes
    ``m1`` (whitening), ``m2`` (chart moments) and ``m3`` (limits).
    """

    def __init__(self, n_eigs=101, m1=600, m2=300, m3=1000, arl0=100.0, k_s=0.05, k_c=0.05,
                 n_bootstrap=1000, max_run_length=4000, random_state=0):
        self.n_eigs = n_eigs
        self.m1 = m1
        self.m2 = m2
        self.m3 = m3
        self.arl0 = arl0
        self.k_s = k_s
        self.k_c = k_c
        self.n_bootstrap = n_bootstrap
        self.max_run_length = max_run_length
        self.random_state = random_state

    @property
    def config(self) -> CalibrationConfig:
        return CalibrationConfig(self.m1, self.m2, self.m3, self.arl0, self.k_s, self.k_c,
                                 self.n_bootstrap, self.max_run_length, self.random_state)

    def _split(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = self.n_eigs - 1
        if X.shape[1] != 2 * self.n_eigs - 1:
            raise ParameterError(
                f"expected {2 * self.n_eigs - 1} feature columns for n_eigs={self.n_eigs}, "
                f"got {X.shape[1]}"
            )
        return X[:, :d], X[:, d:]

    def fit(self, X, y=None):
        cfg = self.config
        X = check_array(X, dtype=float)
        need = cfg.m1 + cfg.m2 + cfg.m3
        if X.shape[0] < need:
            raise ParameterError(f"reference sample has {X.shape[0]} rows, need m1+m2+m3={need}")
        lam, beta = self._split(X)
        b1 = slice(0, cfg.m1)
        b2 = slice(cfg.m1, cfg.m1 + cfg.m2)
        b3 = slice(cfg.m1 + cfg.m2, need)
        self.shape_standardizer_ = Standardizer().fit(lam[b1])
        self.color_standardizer_ = Standardizer().fit(beta[b1])
        s2 = self.shape_standardizer_.statistic(lam[b2])
        c2 = self.color_standardizer_.statistic(beta[b2])
        shape_m = (float(s2.mean()), float(s2.std(ddof=1)))
        color_m = (float(c2.mean()), float(c2.std(ddof=1)))
        s3 = self.shape_standardizer_.statistic(lam[b3])
        c3 = self.color_standardizer_.statistic(beta[b3])
        self.calibration_statistics_ = (s3, c3)
        self.limits_ = calibrate_limits(s3, c3, cfg, shape_m, color_m)
        self.shape_chart_ = CusumChart(*shape_m, cfg.k_s, self.limits_.h_s)
        self.color_chart_ = CusumChart(*color_m, cfg.k_c, self.limits_.h_c)
        return self

    def statistics(self, X):
        """``(s, c)`` arrays for feature rows ``X``."""
        check_is_fitted(self, "limits_")
        lam, beta = self._split(X)
        return self.shape_standardizer_.statistic(lam), self.color_standardizer_.statistic(beta)

    def initial_state(self) -> CombinedChartState:
        check_is_fitted(self, "limits_")
        return CombinedChartState(self.shape_chart_, self.color_chart_)

    def monitor(self, X, state: Optional[CombinedChartState] = None) -> MonitoringReport:
        """Run the charts over the rows of ``X`` in order (no reset on signal)."""
        state = self.initial_state() if state is None else state
        report = MonitoringReport()
        X = np.atleast_2d(np.asarray(X, dtype=float)) if len(X) else np.empty((0, 2 * self.n_eigs - 1))
        if X.shape[0] == 0:
            return report
        s, c = self.statistics(X)
        for si, ci in zip(s, c):
            state, sig = combined_step(state, float(si), float(ci))
            report.steps.append(StepRecord(state.time_index, float(si), float(ci),
                                           state.shape_chart.state, state.color_chart.state, sig))
        return report

    def decision_function(self, X):
        """CUSUM states ``(Cs, Cc)`` after each row, starting from zero."""
        rep = self.monitor(X)
        return np.array([[r.Cs, r.Cc] for r in rep.steps]).reshape(-1, 2)

    def predict(self, X):
        """1 where the combined scheme signals at that step, else 0."""
        rep = self.monitor(X)
        return np.array([1 if r.signal else 0 for r in rep.steps], dtype=int)


def run_monitoring(reference, stream, cfg: CalibrationConfig, k_eig: int,
                   n_neighbors=30, extractor=None):
    """Extract features, fit on ``reference`` clouds, then monitor ``stream``.

    The fitted monitor is attached to the returned report.
    """
    from .spectral import SpectralFeatureExtractor

    ext = extractor or SpectralFeatureExtractor(n_eigs=k_eig, n_neighbors=n_neighbors)
    ext.fit()
    need = cfg.m1 + cfg.m2 + cfg.m3
    if len(reference) < need:
        raise ParameterError(f"{len(reference)} reference clouds supplied, need {need}")
    Xref = ext.transform(list(reference)[:need])
    mon = CombinedCusumMonitor(
        n_eigs=k_eig, m1=cfg.m1, m2=cfg.m2, m3=cfg.m3, arl0=cfg.arl0, k_s=cfg.k_s,
        k_c=cfg.k_c, n_bootstrap=cfg.n_bootstrap, max_run_length=cfg.max_run_length,
        random_state=cfg.rng_seed,
    ).fit(Xref)
    stream = list(stream)
    Xs = ext.transform(stream) if stream else np.empty((0, 2 * k_eig - 1))
    report = mon.monitor(Xs)
    report.monitor = mon
    return report


# --------------------------------------------------------------------------
# calibration file


def _fmt(v):
    return repr(float(v))


def save_calibration(monitor: CombinedCusumMonitor, path):
    """Plain-text ``key = value`` file; vectors/matrices as embedded CSV blocks."""
    check_is_fitted(monitor, "limits_")
    lines = ["# combined shape/color CUSUM calibration"]
    params = monitor.get_params()
    for key in ("n_eigs", "m1", "m2", "m3", "arl0", "k_s", "k_c", "n_bootstrap",
                "max_run_length", "random_state"):
        lines.append(f"{key} = {params[key]}")
    for name, chart in (("shape", monitor.shape_chart_), ("color", monitor.color_chart_)):
        lines += [f"{name}.mu = {_fmt(chart.mu)}", f"{name}.sigma = {_fmt(chart.sigma)}",
                  f"{name}.k = {_fmt(chart.k_ref)}", f"{name}.h = {_fmt(chart.h)}"]
    lim = monitor.limits_
    lines += [f"stage1.h_s = {_fmt(lim.stage1_h_s)}", f"stage1.h_c = {_fmt(lim.stage1_h_c)}",
              f"arl.shape = {_fmt(lim.arl_shape)}", f"arl.color = {_fmt(lim.arl_color)}",
              f"arl.combined = {_fmt(lim.arl_combined)}"]
    for name, st in (("lambda", monitor.shape_standardizer_), ("beta_abs", monitor.color_standardizer_)):
        lines.append(f"{name}.discrepancy = {_fmt(st.discrepancy_)}")
        lines.append(f"{name}.mean = <<CSV")
        lines.append(",".join(_fmt(v) for v in st.mean_))
        lines.append("CSV")
        lines.append(f"{name}.whitening = <<CSV")
        lines += [",".join(_fmt(v) for v in row) for row in st.whitening_]
        lines.append("CSV")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_kv_blocks(text, source):
    out = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}: line {i}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if value == "<<CSV":
            block = []
            while i < len(lines) and lines[i].strip() != "CSV":
                block.append([float(v) for v in lines[i].split(",")])
                i += 1
            if i >= len(lines):
                raise ParseError(f"{source}: unterminated CSV block for {key!r}")
            i += 1
            out[key] = np.array(block)
        else:
            out[key] = value
    return out


def load_calibration(path) -> CombinedCusumMonitor:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    kv = _parse_kv_blocks(path.read_text(encoding="utf-8"), str(path))
    try:
        mon = CombinedCusumMonitor(
            n_eigs=int(kv["n_eigs"]), m1=int(kv["m1"]), m2=int(kv["m2"]), m3=int(kv["m3"]),
            arl0=float(kv["arl0"]), k_s=float(kv["k_s"]), k_c=float(kv["k_c"]),
            n_bootstrap=int(kv["n_bootstrap"]), max_run_length=int(kv["max_run_length"]),
            random_state=int(kv["random_state"]),
        )
        for attr, name in (("shape_standardizer_", "lambda"), ("color_standardizer_", "beta_abs")):
            st = Standardizer()
            st.mean_ = kv[f"{name}.mean"].reshape(-1)
            st.whitening_ = np.atleast_2d(kv[f"{name}.whitening"])
            st.n_features_in_ = st.mean_.shape[0]
            st.discrepancy_ = float(kv[f"{name}.discrepancy"])
            setattr(mon, attr, st)
        charts = {}
        for name in ("shape", "color"):
            charts[name] = CusumChart(float(kv[f"{name}.mu"]), float(kv[f"{name}.sigma"]),
                                      float(kv[f"{name}.k"]), float(kv[f"{name}.h"]))
        mon.shape_chart_, mon.color_chart_ = charts["shape"], charts["color"]
        mon.limits_ = ControlLimits(
            charts["shape"].h, charts["color"].h, float(kv["stage1.h_s"]),
            float(kv["stage1.h_c"]), float(kv["arl.shape"]), float(kv["arl.color"]),
            float(kv["arl.combined"]))
    except KeyError as exc:
        raise ParseError(f"{path}: missing key {exc.args[0]!r}") from None
    return mon
