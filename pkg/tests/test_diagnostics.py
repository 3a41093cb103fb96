import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse, stats
from scipy.sparse import csgraph

from colorshape.diagnostics import (
    FunctionalMap, TextureTransporter, TransportedTexture, f_statistics, functional_map_objective,
    iou, pointwise_test, solve_functional_map, tfce_enhance, threshold_localize,
    transport_texture,
)
from colorshape.exceptions import ParameterError
from colorshape.pointcloud import build_knn
from colorshape.simulation import NoiseSpec, make_nominal, sample_ic
from colorshape.spectral import ColorRegression, Spectrum


def path_graph(n):
    return sparse.diags([np.ones(n - 1), np.ones(n - 1)], [1, -1], format="csr")


def tfce_oracle(stat, A, dh, E=0.5, H=2.0):
    out = np.zeros_like(stat)
    m = 1
    while m * dh <= stat.max() * (1 + 1e-12):
        h = m * dh
        keep = stat >= h - 1e-12 * stat.max()
        idx = np.flatnonzero(keep)
        _, lab = csgraph.connected_components(A[idx][:, idx], directed=False)
        sizes = np.bincount(lab)
        out[idx] += sizes[lab] ** E * h ** H * dh
        m += 1
    return out


# --- functional maps --------------------------------------------------------

def gradient_descent(A0, A1, lam0, lam1, eta, iters=40000):
    k = A0.shape[0]
    D = (lam1[:, None] - lam0[None, :]) ** 2
    C = np.zeros((k, k))
    lip = 2 * (np.linalg.eigvalsh(A0 @ A0.T).max() + eta * D.max())
    for _ in range(iters):
        grad = 2 * (C @ A0 - A1) @ A0.T + 2 * eta * D * C
        C -= grad / lip
    return C


@pytest.mark.parametrize("seed", range(3))
def test_functional_map_matches_descent_oracle(seed):
    rng = np.random.default_rng(seed)
    k, p = rng.integers(3, 11), rng.integers(12, 21)
    A0, A1 = rng.standard_normal((k, p)), rng.standard_normal((k, p))
    lam0 = np.sort(rng.uniform(0, 5, k))
    lam1 = np.sort(rng.uniform(0, 5, k))
    C = solve_functional_map(A0, A1, lam0, lam1, 0.5)
    G = gradient_descent(A0, A1, lam0, lam1, 0.5)
    f, g = (functional_map_objective(X, A0, A1, lam0, lam1, 0.5) for X in (C, G))
    assert f <= g + 1e-4


def test_functional_map_first_order_optimality():
    rng = np.random.default_rng(5)
    k, p = 8, 20
    A0, A1 = rng.standard_normal((k, p)), rng.standard_normal((k, p))
    lam0, lam1 = np.sort(rng.uniform(0, 5, k)), np.sort(rng.uniform(0, 5, k))
    C = solve_functional_map(A0, A1, lam0, lam1, 1e-3)
    f = functional_map_objective(C, A0, A1, lam0, lam1, 1e-3)
    assert f <= functional_map_objective(np.zeros_like(C), A0, A1, lam0, lam1, 1e-3)
    for _ in range(50):
        dC = rng.standard_normal(C.shape)
        dC *= 0.01 / np.linalg.norm(dC)
        assert f <= functional_map_objective(C + dC, A0, A1, lam0, lam1, 1e-3)


def test_functional_map_shrinkage_with_eta():
    rng = np.random.default_rng(1)
    k, p = 6, 15
    A0 = rng.standard_normal((k, p))
    A1 = rng.standard_normal((k, p))
    lam = np.array([0.0, 1.0, 3.0, 6.0, 10.0, 15.0])
    small = solve_functional_map(A0, A1, lam, lam, 1e-3)
    large = solve_functional_map(A0, A1, lam, lam, 1e6)
    gap = (lam[:, None] - lam[None, :]) ** 2
    far = gap >= 9
    assert np.all(np.abs(large[far]) <= np.abs(small[far]))
    assert np.abs(large[far]).max() < 1e-4


def test_functional_map_singular_without_eta():
    rng = np.random.default_rng(0)
    A0 = rng.standard_normal((6, 3))  # rank 3 < k = 6
    with pytest.raises(ParameterError, match="eta"):
        solve_functional_map(A0, A0, np.arange(6.0), np.arange(6.0), 0.0)


def test_functional_map_shape_checks():
    with pytest.raises(ParameterError):
        solve_functional_map(np.ones((3, 4)), np.ones((3, 5)), np.zeros(3), np.zeros(3), 1.0)


@pytest.fixture(scope="module")
def transporter():
    design = make_nominal("two_lobe", 900, 0)
    return design, TextureTransporter(n_eigs=30, n_neighbors=30).fit(design.base_cloud)


def test_self_map_is_identity(transporter):
    _, tt = transporter
    C = tt.functional_map(tt.reference_)[0].matrix
    off = C - np.diag(np.diag(C))
    assert np.abs(off).max() < 1e-6
    assert np.all(np.abs(off).max(axis=1) < np.abs(np.diag(C)))


def test_transport_identity_and_zero(transporter):
    _, tt = transporter
    spec = tt.reference_.spectrum
    k = spec.k
    fmap = FunctionalMap(np.eye(k))
    beta = np.zeros(k)
    beta[1] = 2.5
    tex = transport_texture(fmap, ColorRegression(beta, np.abs(beta), 0.0), spec)
    np.testing.assert_allclose(tex.values, spec.eigenfunctions @ beta, atol=1e-10)
    zero = transport_texture(fmap, ColorRegression(np.zeros(k), np.zeros(k), 0.0), spec)
    assert np.all(zero.values == 0)
    with pytest.raises(ParameterError):
        transport_texture(fmap, ColorRegression(np.zeros(k + 1), np.zeros(k + 1), 0.0), spec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_transport_linear(seed):
    rng = np.random.default_rng(seed)
    k, n = 6, 40
    spec = Spectrum(np.arange(k, dtype=float), rng.standard_normal((n, k)))
    fmap = FunctionalMap(rng.standard_normal((k, k)))
    b1, b2 = rng.standard_normal(k), rng.standard_normal(k)

    def tr(b):
        return transport_texture(fmap, ColorRegression(b, np.abs(b), 0.0), spec).values

    np.testing.assert_allclose(tr(b1 + b2), tr(b1) + tr(b2), rtol=1e-12, atol=1e-12)


def test_ic_sample_transport_correlates(transporter):
    design, tt = transporter
    cloud = sample_ic(design, NoiseSpec(0.001, 0.01, (880, 890)), 3)
    tex = tt.transport(cloud)
    assert tex.values.shape == (design.n,)
    assert np.corrcoef(tex.values, design.base_cloud.color)[0, 1] > 0.9


# --- TFCE -------------------------------------------------------------------

def test_tfce_zero():
    assert np.all(tfce_enhance(np.zeros(5), path_graph(5)) == 0)


def test_tfce_isolated_point():
    stat = np.zeros(5)
    stat[2] = 1.0
    A = sparse.csr_matrix((5, 5))
    out = tfce_enhance(stat, A, dh=0.1)
    # sum_{m=1..10} 1^0.5 * (0.1 m)^2 * 0.1
    assert out[2] == pytest.approx(0.385, rel=1e-12)
    assert np.all(np.delete(out, 2) == 0)


def test_tfce_extent_increases_score():
    A = path_graph(10)
    one = np.zeros(10)
    one[4] = 2.0
    two = one.copy()
    two[5] = 2.0
    assert tfce_enhance(two, A, dh=0.1)[4] > tfce_enhance(one, A, dh=0.1)[4]


def test_tfce_rejects_negative():
    with pytest.raises(ParameterError):
        tfce_enhance(np.array([1.0, -0.1]), path_graph(2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_tfce_matches_component_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((60, 3))
    A = build_knn(X, 4).adjacency()
    stat = np.maximum(rng.standard_normal(60) * 2, 0)
    if stat.max() == 0:
        return
    dh = stat.max() / 37
    np.testing.assert_allclose(tfce_enhance(stat, A, dh=dh), tfce_oracle(stat, A, dh), rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 29), st.floats(0.01, 3.0))
def test_tfce_monotone(seed, q, bump):
    rng = np.random.default_rng(seed)
    A = path_graph(30) + sparse.eye(30, k=5) + sparse.eye(30, k=-5)
    stat = rng.uniform(0, 2, 30)
    raised = stat.copy()
    raised[q] += bump
    dh = 0.05
    assert np.all(tfce_enhance(raised, A, dh=dh) >= tfce_enhance(stat, A, dh=dh) - 1e-12)


# --- permutation test -------------------------------------------------------

def test_f_statistics_match_scipy():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((13, 7))
    lab = np.zeros(13, dtype=bool)
    lab[8:] = True
    F = f_statistics(X, lab)[0]
    ref = stats.f_oneway(X[~lab], X[lab], axis=0).statistic
    np.testing.assert_allclose(F, ref, rtol=1e-10)


def test_identical_groups():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 30))
    rep = pointwise_test(list(X), list(X.copy()), path_graph(30), n_permutations=99)
    assert np.all(rep.f_stat == 0)
    assert not rep.significant_mask.any() and rep.verdict == "shape_only"


def test_one_vs_one_rejected():
    with pytest.raises(ParameterError, match="degrees of freedom"):
        pointwise_test([np.zeros(5)], [np.ones(5)], path_graph(5))


def test_p_value_range_and_mask():
    rng = np.random.default_rng(2)
    ic = rng.standard_normal((8, 50))
    oc = rng.standard_normal((8, 50))
    oc[:, 10:15] += 3.0
    rep = pointwise_test(ic, oc, path_graph(50), alpha=0.05, n_permutations=199, rng_seed=1)
    assert rep.p_values.min() >= 1 / 200 and rep.p_values.max() <= 1
    np.testing.assert_array_equal(rep.significant_mask, rep.p_values < 0.05)
    assert rep.verdict == "shape_and_color"
    assert rep.significant_mask[10:15].all()
    assert iou(rep.significant_mask, np.isin(np.arange(50), range(10, 15))) > 0.5


def test_permutation_test_reproducible():
    rng = np.random.default_rng(3)
    ic, oc = rng.standard_normal((5, 20)), rng.standard_normal((5, 20))
    a = pointwise_test(ic, oc, path_graph(20), n_permutations=50, rng_seed=9)
    b = pointwise_test(ic, oc, path_graph(20), n_permutations=50, rng_seed=9)
    np.testing.assert_array_equal(a.p_values, b.p_values)


def test_fwer_under_exchangeability():
    rng = np.random.default_rng(4)
    A = path_graph(40)
    hits = 0
    reps = 150
    for r in range(reps):
        X = rng.standard_normal((12, 40))
        X = X + np.roll(X, 1, axis=1)  # spatially smooth noise
        rep = pointwise_test(X[:6], X[6:], A, alpha=0.05, n_permutations=99, rng_seed=r)
        hits += rep.significant_mask.any()
    se = np.sqrt(0.05 * 0.95 / reps)
    assert hits / reps <= 0.05 + 2 * se


# --- thresholding ---------------------------------------------------------

def test_threshold_mean_gives_empty():
    ic = np.random.default_rng(0).standard_normal((4, 30))
    assert not threshold_localize(list(ic), TransportedTexture(ic.mean(axis=0))).any()


def test_threshold_dark_spot():
    rng = np.random.default_rng(1)
    ic = 5 + 0.01 * rng.standard_normal((10, 1000))
    oc = 5 + 0.01 * rng.standard_normal(1000)
    oc[100:110] -= 1.0
    mask = threshold_localize(ic, oc, quantile=0.99)
    assert mask.any() and mask[100:110].sum() == mask.sum()


@pytest.mark.parametrize("q", [0.5, 1.0, 0.2])
def test_threshold_quantile_range(q):
    with pytest.raises(ParameterError):
        threshold_localize([np.zeros(3)], np.zeros(3), quantile=q)
