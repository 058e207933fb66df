import math

import numpy as np
import pytest

from koopmpc.dynamics import (
    CstrParams,
    CstrState,
    ControlInput,
    IntegrationFailure,
    STEADY_CONTROL,
    STEADY_STATE,
    TimeGrid,
    cstr_rhs,
    dopri45,
    integrate,
)


def test_steady_state_residuals_small():
    c_dot, T_dot = cstr_rhs(STEADY_STATE, STEADY_CONTROL)
    assert abs(c_dot) < 1e-4
    assert abs(T_dot) < 1e-4


def test_rhs_zero_concentration_no_cooling():
    # reaction term vanishes at c=0, so c_dot = rho/V exactly
    c_dot, _ = cstr_rhs(CstrState(c=0.0, T=0.7293), ControlInput(rho=1.0, F=0.0))
    assert c_dot == 1.0 / 20.0


def test_rhs_saturated_concentration():
    # feed term vanishes at c=1: c_dot = -k * exp(-N/T)
    c_dot, _ = cstr_rhs(CstrState(c=1.0, T=0.7293), ControlInput(rho=1.0, F=390.0))
    expected = -300.0 * math.exp(-5.0 / 0.7293)
    assert c_dot == pytest.approx(expected, abs=1e-12)
    assert c_dot == pytest.approx(-0.3160, abs=5e-4)


def test_rhs_rejects_nonfinite():
    with pytest.raises(ValueError):
        CstrState(c=float("nan"), T=0.7)
    with pytest.raises(ValueError):
        ControlInput(rho=float("inf"), F=0.0)


def test_negative_concentration_warns():
    with pytest.warns(UserWarning):
        CstrState(c=-0.01, T=0.7)


def test_params_must_be_positive():
    with pytest.raises(ValueError):
        CstrParams(V=-1.0)


def test_time_grid_multiple():
    grid = TimeGrid()
    assert grid.substeps_per_ctrl == 4
    with pytest.raises(ValueError):
        TimeGrid(dt_discr=0.3, dt_ctrl=1.0)


def test_integrate_zero_duration_identity():
    out = integrate(STEADY_STATE, STEADY_CONTROL, 0.0)
    assert out is STEADY_STATE


def test_integrate_holds_steady_state():
    out = integrate(STEADY_STATE, STEADY_CONTROL, 0.25)
    assert abs(out.c - STEADY_STATE.c) < 1e-4
    assert abs(out.T - STEADY_STATE.T) < 1e-4


def _rk4_fixed(state, inp, duration, step=1e-3):
    y = state.as_array()
    n = int(round(duration / step))
    for _ in range(n):
        s = CstrState(c=float(y[0]), T=float(y[1]))
        k1 = np.array(cstr_rhs(s, inp))
        s2 = CstrState(c=float(y[0] + 0.5 * step * k1[0]), T=float(y[1] + 0.5 * step * k1[1]))
        k2 = np.array(cstr_rhs(s2, inp))
        s3 = CstrState(c=float(y[0] + 0.5 * step * k2[0]), T=float(y[1] + 0.5 * step * k2[1]))
        k3 = np.array(cstr_rhs(s3, inp))
        s4 = CstrState(c=float(y[0] + step * k3[0]), T=float(y[1] + step * k3[1]))
        k4 = np.array(cstr_rhs(s4, inp))
        y = y + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return CstrState(c=float(y[0]), T=float(y[1]))


def test_increased_cooling_lowers_temperature_vs_rk4_oracle():
    inp = ControlInput(rho=1.0, F=700.0)
    out = integrate(STEADY_STATE, inp, 1.0)
    oracle = _rk4_fixed(STEADY_STATE, inp, 1.0)
    assert out.T < STEADY_STATE.T
    assert abs(out.c - oracle.c) < 1e-7
    assert abs(out.T - oracle.T) < 1e-7


def test_integrator_order_on_exponential_decay():
    tol = 1e-8
    y = dopri45(lambda t, x: -x, np.array([1.0]), 0.0, 1.0, rtol=tol, atol=tol)
    assert abs(y[0] - math.exp(-1.0)) < tol * 10


def test_integrate_deterministic():
    inp = ControlInput(rho=1.1, F=500.0)
    a = integrate(STEADY_STATE, inp, 1.0)
    b = integrate(STEADY_STATE, inp, 1.0)
    assert a.c == b.c and a.T == b.T


def test_integrate_validates_arguments():
    with pytest.raises(ValueError):
        integrate(STEADY_STATE, STEADY_CONTROL, -1.0)
    with pytest.raises(ValueError):
        integrate(STEADY_STATE, STEADY_CONTROL, 1.0, tol=0.0)


def test_blowup_reports_time_reached():
    # y' = y^2 from y0=1 blows up at t=1
    with pytest.raises(IntegrationFailure) as exc:
        dopri45(lambda t, y: y**2, np.array([1.0]), 0.0, 2.0, rtol=1e-8, atol=1e-8)
    assert 0.9 < exc.value.time_reached <= 1.05
