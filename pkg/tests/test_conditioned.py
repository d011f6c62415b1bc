import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from conftest import QND_PARAMS, QND_ZF
from stochpath.conditioned import (Postselection, WickIndexSet, acceptance_fraction,
                                   action_decomposition_check, conditional_mean_z,
                                   conditional_moments_exact, conditional_var_z,
                                   conditional_zz_corr, double_factorial, final_state_pdf,
                                   m_inverse, m_inverse_element, m_log_determinant, m_matrix,
                                   mean_first_order, optimal_path_u, path_action, postselect,
                                   readout_total_pdf, stats_rows, tanh_derivative,
                                   var_first_order, wick_moment)
from stochpath.errors import (BoundaryDivergenceError, EmptySelectionError,
                              EndpointMismatchError, SeriesTruncationWarning, ValidationError)

T1 = QND_PARAMS.total_time


def test_optimal_path_end_points():
    assert optimal_path_u(0.2, -0.5, 2.0, 0.0) == pytest.approx(math.atanh(0.2))
    assert optimal_path_u(0.2, -0.5, 2.0, 2.0) == pytest.approx(math.atanh(-0.5))
    t = np.linspace(0, 0.6, 7)
    assert np.allclose(optimal_path_u(0.3, 0.3, 0.6, t), math.atanh(0.3))
    u = optimal_path_u(0.0, QND_ZF, 0.6, t)
    assert np.allclose(u, t / 0.6 * 0.881373587019543, rtol=1e-14)
    with pytest.raises(BoundaryDivergenceError):
        optimal_path_u(1.0, 0.0, 1.0, 0.5)


def test_final_pdf_symmetry():
    z = np.linspace(-0.99, 0.99, 41)
    assert np.allclose(final_state_pdf(z, 0.0, 0.6), final_state_pdf(-z, 0.0, 0.6), rtol=1e-13)


@pytest.mark.parametrize("z_I", [0.0, 0.5])
@pytest.mark.parametrize("T", [0.2, 0.6])
def test_final_pdf_normalised(z_I, T):
    # integrate in u = atanh z to avoid the end-point singularity
    f = lambda u: final_state_pdf(math.tanh(u), z_I, T) / math.cosh(u) ** 2
    val, _ = integrate.quad(f, -15, 15, epsabs=1e-13, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_final_pdf_is_readout_change_of_variables():
    T, zI = 0.6, 0.3
    z = np.linspace(-0.95, 0.95, 23)
    r = (np.arctanh(z) - math.atanh(zI)) / T
    lhs = final_state_pdf(z, zI, T) * T * (1 - z ** 2)
    assert np.allclose(lhs, readout_total_pdf(r, zI, T), rtol=1e-12)


def test_final_pdf_histogram(qnd_record):
    z = qnd_record.final[:, 2]
    edges = np.linspace(-0.9, 0.9, 19)
    counts, _ = np.histogram(z, edges)
    probs = np.array([integrate.quad(lambda x: final_state_pdf(x, 0.0, T1), a, b)[0]
                      for a, b in zip(edges[:-1], edges[1:])])
    expected = probs * len(z)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert stats.chi2.sf(chi2, len(counts)) > 0.01


def test_m_inverse_examples():
    assert m_inverse_element(1, 1, 2, 0.1) == pytest.approx(0.05)
    assert m_inverse_element(2, 5, 8, 0.1) == m_inverse_element(5, 2, 8, 0.1)
    Mi = m_inverse(8, 0.1)
    assert np.array_equal(Mi, Mi.T)
    with pytest.raises(IndexError):
        m_inverse_element(0, 1, 4, 0.1)
    with pytest.raises(IndexError):
        m_inverse_element(1, 4, 4, 0.1)


@settings(max_examples=60)
@given(st.integers(2, 8), st.floats(1e-3, 1.0), st.floats(0.1, 10.0))
def test_m_times_inverse(n, dt, tau):
    M = m_matrix(n, dt, tau)
    assert np.allclose(M @ m_inverse(n, dt, tau), np.eye(n - 1), atol=1e-10)
    sign, logdet = np.linalg.slogdet(M)
    assert sign == 1 and logdet == pytest.approx(m_log_determinant(n, dt, tau), rel=1e-12, abs=1e-12)


def test_wick_examples():
    n, dt = 10, 0.06
    T = n * dt
    j, k = 3, 7
    assert wick_moment([j, k], n, dt) == pytest.approx(j * dt * (1 - k * dt / T), rel=1e-13)
    Mi = lambda a, b: m_inverse_element(a, b, n, dt)
    four = Mi(1, 2) * Mi(4, 6) + Mi(1, 4) * Mi(2, 6) + Mi(1, 6) * Mi(2, 4)
    assert wick_moment(WickIndexSet((1, 2, 4, 6)), n, dt) == pytest.approx(four, rel=1e-13)
    assert wick_moment([1, 2, 3], n, dt) == 0.0
    for p in (1, 2, 3):
        assert wick_moment([4] * (2 * p), n, dt) == pytest.approx(
            double_factorial(2 * p - 1) * Mi(4, 4) ** p, rel=1e-12)
    with pytest.raises(ValidationError):
        WickIndexSet(())


def _dense_gaussian_moment(idx, n, dt):
    """Tensor Gauss-Hermite quadrature over the full (n-1)-dim Gaussian."""
    cov = m_inverse(n, dt)
    L = np.linalg.cholesky(cov)
    d = n - 1
    x, w = np.polynomial.hermite_e.hermegauss(4)
    w = w / w.sum()
    total = 0.0
    for nodes in itertools.product(range(4), repeat=d):
        xi = x[list(nodes)]
        eta = L @ xi
        total += np.prod(w[list(nodes)]) * np.prod([eta[i - 1] for i in idx])
    return total


@settings(max_examples=80)
@given(st.integers(2, 5).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.integers(1, n - 1), min_size=1, max_size=6))),
    st.floats(0.01, 0.5))
def test_wick_vs_dense_gaussian(case, dt):
    n, idx = case
    ref = _dense_gaussian_moment(idx, n, dt)
    assert wick_moment(idx, n, dt) == pytest.approx(ref, rel=1e-8, abs=1e-12)


def test_wick_1122_brute_force():
    assert wick_moment([1, 1, 2, 2], 4, 0.1) == pytest.approx(
        _dense_gaussian_moment([1, 1, 2, 2], 4, 0.1), rel=1e-10)


def test_tanh_derivatives_by_recurrence():
    u = np.linspace(-2, 2, 9)
    h = 1e-3
    for k in range(1, 5):
        fd = (tanh_derivative(k - 1, u + h) - tanh_derivative(k - 1, u - h)) / (2 * h)
        assert np.allclose(tanh_derivative(k, u), fd, atol=1e-5)
    assert np.allclose(tanh_derivative(1, u), 1 / np.cosh(u) ** 2)


def test_first_order_closed_forms():
    t = np.linspace(0, 0.6, 13)
    u = optimal_path_u(0.0, QND_ZF, 0.6, t)
    s2 = t * (1 - t / 0.6)
    m = np.tanh(u) - s2 / np.cosh(u) ** 2 * np.tanh(u)
    v = s2 / np.cosh(u) ** 4
    assert np.allclose(conditional_mean_z(t, 0.0, QND_ZF, 0.6, order=1), m, atol=1e-15)
    assert np.allclose(conditional_var_z(t, 0.0, QND_ZF, 0.6, order=1), v, atol=1e-15)
    assert np.allclose(mean_first_order(t, 0.0, QND_ZF, 0.6), m, atol=1e-15)
    assert np.allclose(var_first_order(t, 0.0, QND_ZF, 0.6), v, atol=1e-15)


@pytest.mark.parametrize("order", [1, 2, 3, 4])
def test_boundary_pinning(order):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeriesTruncationWarning)
        assert conditional_mean_z(0.0, 0.1, 0.6, 0.8, order=order) == pytest.approx(0.1, abs=1e-15)
        assert conditional_mean_z(0.8, 0.1, 0.6, 0.8, order=order) == pytest.approx(0.6, abs=1e-15)
        assert conditional_var_z(0.0, 0.1, 0.6, 0.8, order=order) == 0.0
        assert conditional_var_z(0.8, 0.1, 0.6, 0.8, order=order) == pytest.approx(0.0, abs=1e-15)
        t = np.linspace(0, 1, 11)
        assert np.allclose(conditional_mean_z(t, 0.0, 0.0, 1.0, order=order), 0.0, atol=1e-15)


def test_variance_peak_at_midpoint():
    T = 0.4
    t = np.linspace(0, T, 401)
    v = var_first_order(t, 0.0, 0.0, T)
    assert t[np.argmax(v)] == pytest.approx(T / 2)
    assert v.max() == pytest.approx(T / 4)


def test_series_approaches_exact():
    t = np.linspace(0.03, 0.57, 10)
    ex_m, ex_v = conditional_moments_exact(t, 0.0, QND_ZF, 0.6)
    errs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeriesTruncationWarning)
        for order in (1, 2, 3, 4):
            errs.append((np.abs(conditional_mean_z(t, 0.0, QND_ZF, 0.6, order=order) - ex_m).max(),
                         np.abs(conditional_var_z(t, 0.0, QND_ZF, 0.6, order=order) - ex_v).max()))
    assert errs[-1][0] < errs[0][0] / 10
    assert errs[-1][1] < errs[0][1] / 5


def test_truncation_warning_fires():
    with pytest.warns(SeriesTruncationWarning):
        conditional_var_z(np.linspace(0, 0.6, 21), 0.0, 0.9, 0.6, order=4)


def test_zz_corr_shape():
    assert conditional_zz_corr(0.0, 0.3, 0.0, 0.5, 0.6) == 0.0
    tk = np.linspace(0.2, 0.6, 9)
    # with z_I = z_F = 0 the sech factors are 1: linear in t_k, zero at T
    c = conditional_zz_corr(0.2, tk, 0.0, 0.0, 0.6)
    assert np.allclose(np.diff(c, 2), 0.0, atol=1e-15)
    assert c[-1] == pytest.approx(0.0, abs=1e-15)
    assert conditional_zz_corr(0.4, 0.2, 0.1, 0.5, 0.6) == conditional_zz_corr(0.2, 0.4, 0.1, 0.5, 0.6)


def _exact_connected(tj, tk, z_I, z_F, T):
    """Cov[tanh(u_j + eta_j), tanh(u_k + eta_k)] by 2-d Gauss-Hermite."""
    lo, hi = min(tj, tk), max(tj, tk)
    C = np.array([[lo * (1 - lo / T), lo * (1 - hi / T)], [lo * (1 - hi / T), hi * (1 - hi / T)]])
    uj = optimal_path_u(z_I, z_F, T, lo)
    uk = optimal_path_u(z_I, z_F, T, hi)
    x, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / w.sum()
    if C[0, 0] == 0 or C[1, 1] == 0:
        return 0.0
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    a0 = math.sqrt(C[0, 0])
    ej = a0 * X
    ek = C[0, 1] / a0 * X + math.sqrt(max(C[1, 1] - C[0, 1] ** 2 / C[0, 0], 0.0)) * Y
    a = np.tanh(uj + ej)
    b = np.tanh(uk + ek)
    return float((W * a * b).sum() - (W * a).sum() * (W * b).sum())


def test_empirical_correlator(qnd_record):
    res = postselect(qnd_record, Postselection(QND_ZF, 0.02), z_I=0.0, T=T1)
    t = res.times
    inner = slice(1, -1)
    ex = np.array([[_exact_connected(a, b, 0.0, QND_ZF, T1) for b in t[inner]] for a in t[inner]])
    z = (res.cov[inner, inner] - ex) / res.cov_stderr[inner, inner]
    assert np.abs(z).max() < 4
    first = conditional_zz_corr(t[inner, None], t[None, inner], 0.0, QND_ZF, T1)
    ti = t[inner]
    s2 = ti * (1 - ti / T1)
    cov = np.minimum.outer(ti, ti) * (1 - np.maximum.outer(ti, ti) / T1)
    # first order differs from the full Gaussian average only at the next order
    assert np.all(np.abs(first - ex) <= 1.5 * cov * np.add.outer(s2, s2))


def test_acceptance_fraction(qnd_record):
    sel = Postselection(QND_ZF, 0.02)
    res = postselect(qnd_record, sel, z_I=0.0, T=T1)
    direct = integrate.quad(lambda z: final_state_pdf(z, 0.0, T1), QND_ZF - 0.02, QND_ZF + 0.02)[0]
    assert res.predicted_fraction == pytest.approx(direct, rel=1e-8)
    assert abs(res.fraction - direct) < 3 * res.fraction_stderr
    assert acceptance_fraction(Postselection(0.0, 5.0), 0.2, T1) == pytest.approx(1.0, abs=1e-9)


def test_wide_tolerance_is_unconditioned(qnd_record):
    res = postselect(qnd_record, Postselection(0.0, 2.0))
    assert res.n_accepted == res.n_total
    z = qnd_record.states[:, :, 2]
    assert np.allclose(res.mean, z.mean(axis=0))
    assert np.allclose(res.var, z.var(axis=0, ddof=1))


def test_tolerance_convergence(qnd_record):
    errs = []
    for tol in (0.08, 0.04, 0.02):
        res = postselect(qnd_record, Postselection(QND_ZF, tol))
        errs.append(np.abs(res.mean - mean_first_order(res.times, 0.0, QND_ZF, T1)).mean())
    assert errs[0] > errs[1] > errs[2]


def test_empty_selection_reports_prediction(qnd_record):
    with pytest.raises(EmptySelectionError) as ei:
        postselect(qnd_record, Postselection(0.999, 1e-9), z_I=0.0, T=T1)
    assert 0 < ei.value.predicted_fraction < 1e-6


def test_postselection_validation():
    with pytest.raises(ValidationError):
        Postselection(1.0, 0.02)
    with pytest.raises(ValidationError):
        Postselection(0.5, 0.0)


def test_stats_rows(qnd_record):
    res = postselect(qnd_record, Postselection(QND_ZF, 0.02))
    rows = stats_rows(res, 0.0, T1)
    assert len(rows) == len(res.times)
    assert rows[0][1] == 0.0 and rows[-1][1] == pytest.approx(QND_ZF)


def test_action_on_optimal_path():
    n, dt = 50, 0.012
    t = np.arange(n + 1) * dt
    z = np.tanh(optimal_path_u(-0.2, 0.5, n * dt, t))
    z[0], z[-1] = -0.2, 0.5
    S, S0, q = action_decomposition_check(z, -0.2, 0.5, dt)
    assert q == pytest.approx(0.0, abs=1e-20)
    assert S == pytest.approx(S0, rel=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_action_decomposition_random_paths(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 200))
    dt = float(rng.uniform(1e-3, 0.05))
    zI, zF = rng.uniform(-0.95, 0.95, 2)
    t = np.arange(n + 1) * dt
    u = optimal_path_u(zI, zF, n * dt, t) + np.concatenate([[0], rng.normal(0, 0.3, n - 1), [0]])
    z = np.tanh(u)
    z[0], z[-1] = zI, zF
    S, S0, q = action_decomposition_check(z, zI, zF, dt)
    assert q >= 0
    assert S == pytest.approx(S0 - q, rel=1e-8, abs=1e-12)
    assert S <= S0 + 1e-12


def test_action_forms_and_endpoint_check():
    u = np.array([0.0, 0.1, 0.3])
    assert path_action(u, 0.1, form="riemann") != path_action(u, 0.1)
    with pytest.raises(EndpointMismatchError):
        action_decomposition_check(np.tanh(u), 0.0, 0.5, 0.1)
    with pytest.raises(ValidationError):
        path_action(u, 0.1, form="midpoint")
