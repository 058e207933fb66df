"""Dimensionless CSTR plant model and adaptive Runge-Kutta integration.

The two-state reactor (product concentration c, temperature T) with controls
(production rate rho, coolant flow rate F) is the mechanistic ground truth
driving every environment and data generator in this package.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CstrParams",
    "CstrState",
    "ControlInput",
    "TimeGrid",
    "IntegrationFailure",
    "cstr_rhs",
    "integrate",
    "dopri45",
    "STEADY_STATE",
    "STEADY_CONTROL",
    "C_BOUNDS",
    "T_BOUNDS",
    "RHO_BOUNDS",
    "F_BOUNDS",
    "STORAGE_CAPACITY",
]

# Operating envelope and steady-state operating point shared by all tasks.
C_BOUNDS = (0.1231, 0.1504)
T_BOUNDS = (0.6, 0.8)
RHO_BOUNDS = (0.8, 1.2)
F_BOUNDS = (0.0, 700.0)
STORAGE_CAPACITY = 6.0  # hours of steady-state production


class IntegrationFailure(RuntimeError):
    """Adaptive step size underflowed before reaching the end time."""

    def __init__(self, message: str, time_reached: float):
        super().__init__(message)
        self.time_reached = time_reached


@dataclass(frozen=True)
class CstrParams:
    """Reactor constants (dimensionless benchmark values)."""

    V: float = 20.0
    k: float = 300.0
    N_act: float = 5.0
    T_f: float = 0.3947
    alpha_c: float = 1.95e-4
    T_c: float = 0.3816

    def __post_init__(self):
        for name in ("V", "k", "N_act", "T_f", "alpha_c", "T_c"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"CstrParams.{name} must be finite and > 0, got {value!r}")


@dataclass(frozen=True)
class CstrState:
    c: float
    T: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and math.isfinite(self.T)):
            raise ValueError(f"CstrState components must be finite, got {self!r}")
        if self.c < 0.0:
            warnings.warn(f"negative concentration c={self.c:.6g}", stacklevel=3)

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.T])

    @classmethod
    def from_array(cls, x) -> "CstrState":
        return cls(c=float(x[0]), T=float(x[1]))


@dataclass(frozen=True)
class ControlInput:
    rho: float
    F: float

    def __post_init__(self):
        if not (math.isfinite(self.rho) and math.isfinite(self.F)):
            raise ValueError(f"ControlInput components must be finite, got {self!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.F])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        return cls(rho=float(u[0]), F=float(u[1]))


@dataclass(frozen=True)
class TimeGrid:
    """Discretization (15 min) and control (60 min) steps, in hours."""

    dt_discr: float = 0.25
    dt_ctrl: float = 1.0

    def __post_init__(self):
        if self.dt_discr <= 0 or self.dt_ctrl <= 0:
            raise ValueError("time steps must be positive")
        ratio = self.dt_ctrl / self.dt_discr
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                f"dt_ctrl={self.dt_ctrl} is not an integer multiple of dt_discr={self.dt_discr}"
            )

    @property
    def substeps_per_ctrl(self) -> int:
        return int(round(self.dt_ctrl / self.dt_discr))


STEADY_STATE = CstrState(c=0.1367, T=0.7293)
STEADY_CONTROL = ControlInput(rho=1.0, F=390.0)


def cstr_rhs(
    state: CstrState, inp: ControlInput, params: CstrParams = CstrParams()
) -> tuple[float, float]:
    """Right-hand side (c_dot, T_dot) of the reactor ODEs."""
    c, T = state.c, state.T
    if T == 0.0:
        raise ValueError("temperature must be nonzero for the Arrhenius term")
    reaction = c * params.k * math.exp(-params.N_act / T)
    c_dot = (1.0 - c) * inp.rho / params.V - reaction
    T_dot = (
        (params.T_f - T) * inp.rho / params.V
        + reaction
        - inp.F * params.alpha_c * (T - params.T_c)
    )
    return c_dot, T_dot


# Dormand-Prince 5(4) tableau.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# b5 - b4: weights of the embedded error estimate
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0
_FAC_MIN = 0.2
_FAC_MAX = 10.0


def _initial_step(f, t0, y0, f0, t1, rtol, atol):
    sc = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / sc) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / sc) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = f(t0 + h0, y1)
    d2 = float(np.sqrt(np.mean(((f1 - f0) / sc) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, t1 - t0)


def dopri45(f, y0, t0: float, t1: float, rtol: float = 1e-8, atol: float = 1e-8,
            max_steps: int = 100_000) -> np.ndarray:
    """Integrate y' = f(t, y) from t0 to t1 with the embedded Dormand-Prince
    5(4) pair, PI step-size control, and FSAL reuse. Returns y(t1).

    Raises IntegrationFailure (carrying the time reached) on step-size
    underflow or step-count exhaustion.
    """
    y = np.asarray(y0, dtype=float).copy()
    t = float(t0)
    if t1 <= t:
        return y
    k = [np.zeros_like(y) for _ in range(7)]
    k[0] = np.asarray(f(t, y), dtype=float)
    h = _initial_step(f, t, y, k[0], t1, rtol, atol)
    err_prev = 1.0
    hmin_floor = 16.0 * np.finfo(float).eps * max(abs(t0), abs(t1))
    for _ in range(max_steps):
        h = min(h, t1 - t)
        if h < max(hmin_floor, 16.0 * np.finfo(float).eps * abs(t)):
            raise IntegrationFailure(
                f"step size underflow at t={t:.12g} (h={h:.3e})", time_reached=t
            )
        for i in range(1, 7):
            yi = y.copy()
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    yi += (h * a) * k[j]
            k[i] = np.asarray(f(t + _DP_C[i] * h, yi), dtype=float)
        y_new = y.copy()
        for i, b in enumerate(_DP_B5):
            if b != 0.0:
                y_new += (h * b) * k[i]
        err_vec = np.zeros_like(y)
        for i, e in enumerate(_DP_E):
            if e != 0.0:
                err_vec += (h * e) * k[i]
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / sc) ** 2)))
        if not math.isfinite(err):
            h *= 0.1
            continue
        if err <= 1.0:
            t += h
            y = y_new
            k[0] = k[6]  # FSAL
            if t >= t1 - 1e-14 * max(1.0, abs(t1)):
                return y
            factor = _SAFETY * (err + 1e-16) ** (-_PI_ALPHA) * err_prev ** _PI_BETA
            err_prev = max(err, 1e-16)
            h *= min(_FAC_MAX, max(_FAC_MIN, factor))
        else:
            h *= min(1.0, max(_FAC_MIN, _SAFETY * err ** (-0.2)))
    raise IntegrationFailure(
        f"exceeded {max_steps} steps at t={t:.12g}", time_reached=t
    )


def integrate(
    state: CstrState,
    inp: ControlInput,
    duration: float,
    params: CstrParams = CstrParams(),
    tol: float = 1e-8,
) -> CstrState:
    """Advance the reactor state by `duration` hours under a zero-order-hold
    control input, with local error control at `tol` (absolute and relative).
    """
    if not math.isfinite(duration) or duration < 0:
        raise ValueError(f"duration must be finite and >= 0, got {duration!r}")
    if not (math.isfinite(tol) and tol > 0):
        raise ValueError(f"tol must be finite and > 0, got {tol!r}")
    if duration == 0.0:
        return state

    def f(_t, y):
        dc, dT = cstr_rhs(_RawState(float(y[0]), float(y[1])), inp, params)
        return np.array([dc, dT])

    y = dopri45(f, state.as_array(), 0.0, duration, rtol=tol, atol=tol)
    return CstrState(c=float(y[0]), T=float(y[1]))


class _RawState:
    """Lightweight stand-in for CstrState inside the integrator hot loop
    (skips validation/warning at every stage evaluation)."""

    __slots__ = ("c", "T")

    def __init__(self, c, T):
        self.c = c
        self.T = T
