import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochpath.errors import (DegenerateEigenvalueError, FrameDegenerateError,
                              NumericalConsistencyError, UnphysicalStateError, ValidationError)
from stochpath.model import (BlochState, ModelParams, diagonal_matrix, eigensystem,
                             from_diagonal, to_diagonal)


def test_bloch_state_rejects_outside_ball():
    BlochState(0.0, 0.6, 0.8)
    with pytest.raises(UnphysicalStateError):
        BlochState(0.0, 0.8, 0.8)
    with pytest.raises(UnphysicalStateError):
        BlochState(float("nan"), 0.0, 0.0)


def test_params_validation_lists_paths():
    with pytest.raises(ValidationError) as ei:
        ModelParams(tau_m=-1.0)
    assert ("tau_m", "must be > 0") in ei.value.violations
    assert ModelParams.check(1.0, 0.0, 0)[0][0] == "dt"
    assert any(p == "gamma" for p, _ in ModelParams.check(1.0, 0.1, 10, gamma=-0.4))


def test_total_time_is_derived():
    p = ModelParams.from_total_time(0.6, 0.006)
    assert p.n_steps == 100
    assert p.total_time == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(ValidationError):
        ModelParams.from_total_time(0.601, 0.006)


def test_plain_measurement_frame():
    f = eigensystem(ModelParams())
    assert f.lambda1 == pytest.approx(-0.5)
    assert f.lambda2 == pytest.approx(-0.5)
    assert f.lambda3 == pytest.approx(0.0)
    assert f.omega == pytest.approx(0.5)
    assert f.kappa1 == 0
    assert f.beta1 is None
    with pytest.raises(FrameDegenerateError):
        f.require_beta()
    with pytest.raises(FrameDegenerateError):
        eigensystem(ModelParams(), require_beta=True)


def test_low_efficiency_rate():
    p = ModelParams.from_efficiency(0.02)
    assert p.Gamma == pytest.approx(25.0)
    assert p.efficiency == pytest.approx(0.02)


def test_complex_omega():
    f = eigensystem(ModelParams(gamma=0.5, delta=1.0))
    assert f.omega == pytest.approx(1j * math.sqrt(3))
    assert f.lambda2 == pytest.approx(-(1 + 1j * math.sqrt(3)) / 2)


def test_degenerate_eigenvalue():
    with pytest.raises(DegenerateEigenvalueError):
        eigensystem(ModelParams(gamma=0.5, delta=0.5))


def test_unit_y_state_low_efficiency():
    p = ModelParams.from_efficiency(0.02, delta=20 * math.pi)
    f = eigensystem(p)
    u, v, w = to_diagonal(BlochState(0, 1, 0), f, p)
    # independent: invert the forward matrix numerically
    uvw = np.linalg.solve(diagonal_matrix(f), np.array([0, 1, 0], dtype=complex))
    assert np.allclose([u, v, w], uvw, atol=1e-14)
    assert v == pytest.approx(-0.5101983940891807j, abs=1e-13)
    assert w == pytest.approx(0.5101983940891807j, abs=1e-13)


def test_origin_and_frame_requirements():
    p = ModelParams(delta=3.0)
    f = eigensystem(p)
    assert to_diagonal(BlochState(0, 0, 0), f) == (0, 0, 0)
    assert from_diagonal(0, 0, 0, f) == BlochState(0, 0, 0)
    with pytest.raises(FrameDegenerateError):
        to_diagonal(BlochState(0, 0, 1), eigensystem(ModelParams()))


def test_imaginary_residual_detected():
    f = eigensystem(ModelParams(delta=20 * math.pi))
    with pytest.raises(NumericalConsistencyError):
        from_diagonal(0.1j, 0, 0, f)


@st.composite
def states(draw):
    x, y, z = (draw(st.floats(-1, 1)) for _ in range(3))
    n = math.sqrt(x * x + y * y + z * z)
    if n > 1:
        x, y, z = x / n * 0.999, y / n * 0.999, z / n * 0.999
    return BlochState(x, y, z)


params_st = st.builds(
    lambda g, d: ModelParams(gamma=g, delta=d),
    st.floats(0, 30), st.floats(0.05, 100)).filter(
        lambda p: abs(p.Gamma - 2 * p.delta) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(states(), params_st)
def test_round_trip(s, p):
    f = eigensystem(p)
    u, v, w = to_diagonal(s, f, p)
    assert abs((v + w) - s.z) < 1e-12
    back = from_diagonal(u, v, w, f)
    assert np.allclose(back.as_array(), s.as_array(), atol=1e-12)
    if f.omega.imag != 0:
        assert abs(v - w.conjugate()) < 1e-12


@settings(max_examples=200, deadline=None)
@given(params_st)
def test_eigenvalue_sum_and_product(p):
    f = eigensystem(p)
    assert f.lambda2 + f.lambda3 == pytest.approx(-p.Gamma, rel=1e-12, abs=1e-12)
    assert f.lambda2 * f.lambda3 == pytest.approx(p.delta ** 2, rel=1e-9, abs=1e-9)
    assert f.lambda1 == -p.Gamma
    assert f.kappa1 == 0


def test_conjugate_pair_gives_real_state():
    p = ModelParams(delta=20 * math.pi)
    f = eigensystem(p)
    v = 0.3 - 0.2j
    s = from_diagonal(0.1, v, v.conjugate(), f)
    assert s.z == pytest.approx(0.6)
    b1 = f.beta1
    assert s.y == pytest.approx(2 * (b1 * v).real)
    assert cmath.isclose(f.beta2, b1.conjugate())
