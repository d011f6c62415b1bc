import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from stochpath.errors import StepSizeError, UnphysicalStateError, ValidationError
from stochpath.kernel import (UpdateScheme, action_increment, log_readout_pdf, readout_pdf,
                              readouts_from_noise, sample_readout, update_exact, update_ito,
                              update_stratonovich)
from stochpath.model import BlochState, ModelParams

P = ModelParams(dt=0.006)


def test_scheme_parse():
    assert UpdateScheme.parse("split-operator(7)") == UpdateScheme.split(7)
    assert UpdateScheme.parse("ito") == UpdateScheme.ito()
    assert str(UpdateScheme.split(10)) == "split-operator(10)"
    with pytest.raises(ValidationError):
        UpdateScheme.parse("split-operator(0)")
    with pytest.raises(ValidationError):
        UpdateScheme.parse("rk4")


def test_pdf_peak_and_symmetry():
    assert readout_pdf(1.0, 1.0, P) == pytest.approx(math.sqrt(P.dt / (2 * math.pi)), rel=1e-15)
    r = np.linspace(-40, 40, 101)
    assert np.allclose(readout_pdf(r, 0.0, P), readout_pdf(-r, 0.0, P), rtol=1e-14)
    assert np.all(readout_pdf(r, 0.3, P) > 0)
    with pytest.raises(UnphysicalStateError):
        readout_pdf(0.0, 1.2, P)


@pytest.mark.parametrize("z", [-0.9, 0.0, 0.9])
def test_pdf_normalised(z):
    val, _ = quad(lambda r: readout_pdf(r, z, P), -np.inf, np.inf, epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_log_pdf_consistent():
    r = np.linspace(-30, 30, 61)
    assert np.allclose(log_readout_pdf(r, 0.4, P), np.log(readout_pdf(r, 0.4, P)), atol=1e-12)


def test_sample_mean_clt():
    rng = np.random.default_rng(11)
    N = 10 ** 6
    r = sample_readout(np.zeros(N), P, rng)
    assert abs(r.mean()) < 4 * math.sqrt(P.tau_m / P.dt) / math.sqrt(N)
    r1 = sample_readout(np.ones(200000), P, rng)
    assert abs(r1.mean() - 1) < 4 * math.sqrt(P.tau_m / P.dt) / math.sqrt(200000)


def test_branch_frequency():
    rng = np.random.default_rng(5)
    N = 10 ** 6
    b = readouts_from_noise(0.5, rng.random(N), np.zeros(N), P)
    assert set(np.unique(b)) == {-1.0, 1.0}
    assert (b > 0).mean() == pytest.approx(0.75, abs=0.002)


def test_white_noise_readout():
    g = np.array([0.0, 1.0])
    r = readouts_from_noise(0.2, np.zeros(2), g, P, white_noise=True)
    assert r[0] == 0.2
    assert r[1] == pytest.approx(0.2 + math.sqrt(1 / P.dt))


@settings(max_examples=300, deadline=None)
@given(st.floats(-0.999999, 0.999999), st.floats(-60, 60))
def test_qnd_closed_form(z, r):
    s = BlochState(0.0, 0.0, z)
    out = update_exact(s, r, P)
    assert out.z == pytest.approx(math.tanh(math.atanh(z) + r * P.dt / P.tau_m), abs=1e-12)


@pytest.mark.parametrize("z", [1.0, -1.0])
def test_pointer_fixed_points(z):
    for r in (-50.0, 0.0, 3.0, 80.0):
        assert update_exact(BlochState(0, 0, z), r, P).z == z


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(-60, 60),
       st.floats(-100, 100), st.floats(-20, 20), st.sampled_from([1, 3, 10]))
def test_purity_preserved(th, ph, r, delta, eps, m):
    s = BlochState(math.sin(th) * math.cos(ph), math.sin(th) * math.sin(ph), math.cos(th))
    p = ModelParams(dt=0.006, delta=delta, epsilon=eps)
    for sch in (UpdateScheme.exact(), UpdateScheme.split(m)):
        assert update_exact(s, r, p, scheme=sch).norm == pytest.approx(1.0, abs=1e-10)


def test_dephasing_shrinks_coherence():
    p = ModelParams(dt=0.01, gamma=3.0)
    out = update_exact(BlochState(0.6, 0.0, 0.8), 0.0, p)
    assert out.x == pytest.approx(0.6 * math.exp(-0.03), rel=1e-12)
    assert out.z == pytest.approx(0.8, rel=1e-12)


def test_split_converges_to_exact():
    p = ModelParams(dt=1e-6, delta=100.0)  # delta * dt = 1e-4
    s = BlochState(0.3, -0.4, 0.5)
    for r in (-500.0, 0.0, 700.0):
        a = update_exact(s, r, p)
        b = update_exact(s, r, p, scheme=UpdateScheme.split(10))
        assert np.allclose(a.as_array(), b.as_array(), atol=1e-6)


def test_ito_trivial_cases():
    p = ModelParams(dt=1e-3)
    s = BlochState(0.0, 0.0, 0.4)
    assert update_ito(s, 0.0, p) == s
    top = update_ito(BlochState(0, 0, 1), 37.0, p)
    assert top.z == 1.0


def test_ito_overshoot_raises():
    p = ModelParams(dt=1e-3, delta=20 * math.pi)
    with pytest.raises(StepSizeError):
        update_ito(BlochState(0, 0, 1), 0.0, p)


def test_stratonovich_zero_readout():
    s = BlochState(0.1, 0.2, 0.3)
    assert update_stratonovich(s, 0.0, P) == s


def test_stratonovich_dephasing_only():
    p = ModelParams(dt=1e-3, gamma=2.0)
    s = BlochState(0.5, -0.3, 0.0)
    out = update_stratonovich(s, 0.0, p)
    gd = p.gamma * p.dt
    # predictor-corrector: second-order Taylor factor of exp(-gamma dt)
    assert out.x == pytest.approx(0.5 * (1 - gd + gd * gd / 2), rel=1e-12)
    assert out.y == pytest.approx(-0.3 * (1 - gd + gd * gd / 2), rel=1e-12)
    assert abs(out.x - 0.5 * (1 - gd)) < 0.5 * gd ** 2


def test_stratonovich_richardson():
    s = BlochState(0.0, 0.0, 0.2)
    errs = []
    for dt in (0.02, 0.01, 0.005):
        p = ModelParams(dt=dt)
        errs.append(abs(update_stratonovich(s, 3.0, p).z - update_exact(s, 3.0, p).z))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_action_increment():
    assert action_increment(BlochState(0, 0, 1), 1.0, P) == 0.0
    assert action_increment(BlochState(0, 0, 0), 0.0, P) == pytest.approx(-P.dt / 2)


def test_action_sum_vs_single_gaussian():
    rng = np.random.default_rng(2)
    p = ModelParams(dt=1e-3)
    z = rng.uniform(-0.9, 0.9, 500)
    r = z + rng.standard_normal(500) / math.sqrt(p.dt)
    F = sum(action_increment(BlochState(0, 0, zi), ri, p) for zi, ri in zip(z, r))
    logp = np.sum(0.5 * np.log(p.dt / (2 * math.pi)) - p.dt * (r - z) ** 2 / 2)
    lhs = logp + 500 * 0.5 * math.log(2 * math.pi / p.dt)
    # the two differ only by the O(dt) term -dt (1 - z^2) / 2 per step
    assert F - lhs == pytest.approx(-np.sum(p.dt * (1 - z ** 2) / 2), abs=1e-9)
    assert abs(F - lhs) <= 500 * p.dt / 2
