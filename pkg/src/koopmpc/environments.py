"""RL environments for the two control tasks.

NmpcEnv: setpoint tracking under a production rate that is redrawn every
eight hours; reward is the negative squared relative deviation of (c, T)
from their targets. EnmpcEnv: demand response against hourly electricity
prices with a product storage; reward is scaled cost savings versus
steady-state production, overridden by -1 whenever any state or storage
bound is violated during the control interval. Both step the mechanistic
plant at the discretization rate with zero-order-hold controls.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import (
    CstrParams,
    CstrState,
    ControlInput,
    IntegrationFailure,
    STEADY_CONTROL,
    STEADY_STATE,
    TimeGrid,
)

__all__ = [
    "PriceSeries",
    "load_prices",
    "write_price_csv",
    "synthetic_prices",
    "NmpcObs",
    "EnmpcObs",
    "NmpcEnv",
    "EnmpcEnv",
    "PRICE_WINDOW",
    "EPISODE_CONTROL_STEPS",
]

PRICE_WINDOW = 9  # hourly price lookahead handed to the controller
EPISODE_CONTROL_STEPS = 72  # three days at one-hour control steps

# Default date ranges of the historic day-ahead price protocol.
TRAIN_RANGE = ("2015-03-29", "2018-03-25")
TEST_RANGE = ("2018-03-26", "2018-09-30")


@dataclass(frozen=True)
class PriceSeries:
    """Contiguous hourly day-ahead prices."""

    timestamps: np.ndarray  # datetime64[h], strictly increasing by one hour
    values: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        if ts.shape != vals.shape or ts.ndim != 1 or ts.size == 0:
            raise ValueError("timestamps/values must be equal-length 1-D arrays")
        steps = np.diff(ts).astype("timedelta64[h]").astype(int)
        if ts.size > 1 and not np.all(steps == 1):
            gap_at = ts[:-1][steps != 1]
            raise ValueError(f"price series has gaps after {gap_at[:5].tolist()}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("price series contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(np.mean(self.values))

    def slice_range(self, start: str, end: str) -> "PriceSeries":
        """Inclusive date range selection (whole days)."""
        lo = np.datetime64(start, "h")
        hi = np.datetime64(end, "h") + np.timedelta64(23, "h")
        mask = (self.timestamps >= lo) & (self.timestamps <= hi)
        if not mask.any():
            raise ValueError(f"no prices in range {start}..{end}")
        return PriceSeries(self.timestamps[mask], self.values[mask])


def load_prices(
    path,
    timestamp_col: str = "utc_timestamp",
    price_col: str = "AT_price_day_ahead",
    start: str | None = None,
    end: str | None = None,
) -> PriceSeries:
    """Read an hourly price CSV (Open Power System Data layout by default);
    validates contiguity and flags missing hours by timestamp."""
    stamps, values = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or timestamp_col not in reader.fieldnames:
            raise ValueError(f"column {timestamp_col!r} not found in {path}")
        if price_col not in reader.fieldnames:
            raise ValueError(f"column {price_col!r} not found in {path}")
        for row in reader:
            raw = row[price_col].strip()
            if raw == "":
                raise ValueError(f"missing price at {row[timestamp_col]}")
            stamps.append(np.datetime64(row[timestamp_col].replace("Z", ""), "h"))
            values.append(float(raw))
    if not stamps:
        raise ValueError(f"no rows in {path}")
    ts = np.array(stamps, dtype="datetime64[h]")
    vals = np.array(values)
    steps = np.diff(ts).astype("timedelta64[h]").astype(int)
    if np.any(steps != 1):
        first_gap = ts[:-1][steps != 1][0]
        missing = first_gap + np.timedelta64(1, "h")
        raise ValueError(f"price series gap: missing hour {missing}")
    series = PriceSeries(ts, vals)
    if start is not None or end is not None:
        series = series.slice_range(start or str(ts[0]), end or str(ts[-1]))
    return series


def write_price_csv(path, series: PriceSeries, timestamp_col="utc_timestamp",
                    price_col="AT_price_day_ahead") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([timestamp_col, price_col])
        for t, v in zip(series.timestamps, series.values):
            writer.writerow([str(t), repr(float(v))])


def synthetic_prices(
    start: str = TRAIN_RANGE[0],
    end: str = TEST_RANGE[1],
    seed: int = 0,
    base: float = 50.0,
    daily_amp: float = 15.0,
    weekly_amp: float = 6.0,
    noise_std: float = 5.0,
) -> PriceSeries:
    """Deterministic stand-in for the historic price data: daily and weekly
    sinusoids plus seeded Gaussian noise."""
    lo = np.datetime64(start, "h")
    hi = np.datetime64(end, "h") + np.timedelta64(23, "h")
    n = int((hi - lo).astype(int)) + 1
    ts = lo + np.arange(n).astype("timedelta64[h]")
    hours = np.arange(n)
    rng = np.random.default_rng(seed)
    vals = (
        base
        + daily_amp * np.sin(2 * np.pi * (hours - 6.0) / 24.0)
        + weekly_amp * np.sin(2 * np.pi * hours / (24.0 * 7.0))
        + noise_std * rng.standard_normal(n)
    )
    return PriceSeries(ts, vals)


@dataclass(frozen=True)
class NmpcObs:
    state: CstrState
    rho_ext: float


@dataclass(frozen=True)
class EnmpcObs:
    state: CstrState
    storage: float
    prices: np.ndarray  # next PRICE_WINDOW hourly prices, raw units


class NmpcEnv:
    """Setpoint tracking: external production rate redraws every 8 hours,
    coolant flow is the action."""

    REDRAW_EVERY = 8  # control steps

    def __init__(
        self,
        seed: int = 0,
        episode_steps: int = EPISODE_CONTROL_STEPS,
        params: CstrParams = CstrParams(),
        grid: TimeGrid = TimeGrid(),
        integration_tol: float = 1e-8,
    ):
        self.rng = np.random.default_rng(seed)
        self.episode_steps = episode_steps
        self.params = params
        self.grid = grid
        self.tol = integration_tol
        self.c_range = dynamics.C_BOUNDS[1] - dynamics.C_BOUNDS[0]
        self.t_range = dynamics.T_BOUNDS[1] - dynamics.T_BOUNDS[0]
        self.target = STEADY_STATE
        self.state: CstrState | None = None
        self.rho_ext = STEADY_CONTROL.rho
        self.step_count = 0

    def _draw_rho(self) -> float:
        return float(self.rng.uniform(*dynamics.RHO_BOUNDS))

    def reset(self) -> NmpcObs:
        self.state = self.target
        self.rho_ext = self._draw_rho()
        self.step_count = 0
        return self._obs()

    def _obs(self) -> NmpcObs:
        return NmpcObs(state=self.state, rho_ext=self.rho_ext)

    def reward(self, state: CstrState) -> float:
        dc = (state.c - self.target.c) / self.c_range
        dT = (state.T - self.target.T) / self.t_range
        return -(dc * dc) - (dT * dT)

    def step(self, F: float) -> tuple[NmpcObs, float, bool, dict]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        F = float(np.clip(F, *dynamics.F_BOUNDS))
        inp = ControlInput(rho=self.rho_ext, F=F)
        substates = []
        state = self.state
        try:
            for _ in range(self.grid.substeps_per_ctrl):
                state = dynamics.integrate(state, inp, self.grid.dt_discr, self.params, self.tol)
                substates.append(state)
        except IntegrationFailure:
            self.step_count = self.episode_steps
            return self._obs(), -10.0, True, {"integration_failure": True, "substates": substates}
        self.state = state
        self.step_count += 1
        done = self.step_count >= self.episode_steps
        info = {"substates": substates, "applied": inp, "integration_failure": False}
        if not done and self.step_count % self.REDRAW_EVERY == 0:
            self.rho_ext = self._draw_rho()
        return self._obs(), self.reward(state), done, info


class EnmpcEnv:
    """Demand response with product storage against hourly electricity prices."""

    def __init__(
        self,
        prices: PriceSeries,
        seed: int = 0,
        episode_steps: int = EPISODE_CONTROL_STEPS,
        beta: float | None = None,
        price_scale: float | None = None,
        c_bounds: tuple[float, float] = dynamics.C_BOUNDS,
        t_bounds: tuple[float, float] = dynamics.T_BOUNDS,
        storage_capacity: float = dynamics.STORAGE_CAPACITY,
        params: CstrParams = CstrParams(),
        grid: TimeGrid = TimeGrid(),
        integration_tol: float = 1e-8,
    ):
        self.prices = prices
        self.rng = np.random.default_rng(seed)
        self.episode_steps = episode_steps
        self.params = params
        self.grid = grid
        self.tol = integration_tol
        self.c_bounds = c_bounds
        self.t_bounds = t_bounds
        self.capacity = storage_capacity
        self.price_scale = price_scale if price_scale is not None else prices.mean()
        # default balances one full shutdown hour at the mean price against
        # the violation penalty of -1
        self.beta = beta if beta is not None else 1.0 / (
            STEADY_CONTROL.F * self.price_scale * grid.dt_ctrl
        )
        self.state: CstrState | None = None
        self.storage = 0.0
        self.price_idx = 0
        self.step_count = 0
        self.mode = "train"

    def reset(self, mode: str = "train") -> EnmpcObs:
        if mode not in ("train", "test"):
            raise ValueError(f"unknown mode {mode!r}")
        need = self.episode_steps + PRICE_WINDOW
        if len(self.prices) < need:
            raise ValueError(
                f"price series too short: {len(self.prices)} hours < {need} required"
            )
        self.mode = mode
        self.state = STEADY_STATE
        self.step_count = 0
        if mode == "train":
            self.storage = float(self.rng.uniform(1.0, 2.0))
            self.price_idx = int(self.rng.integers(0, len(self.prices) - need + 1))
        else:
            self.storage = 0.0
            self.price_idx = 0
        return self._obs()

    def _obs(self) -> EnmpcObs:
        k = self.price_idx + self.step_count
        return EnmpcObs(
            state=self.state,
            storage=self.storage,
            prices=self.prices.values[k : k + PRICE_WINDOW].copy(),
        )

    def current_price(self) -> float:
        return float(self.prices.values[self.price_idx + self.step_count])

    def step(self, u) -> tuple[EnmpcObs, float, bool, dict]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        u = np.asarray(u, dtype=float)
        rho = float(np.clip(u[0], *dynamics.RHO_BOUNDS))
        F = float(np.clip(u[1], *dynamics.F_BOUNDS))
        inp = ControlInput(rho=rho, F=F)
        price = self.current_price()
        substates = []
        state = self.state
        try:
            for _ in range(self.grid.substeps_per_ctrl):
                state = dynamics.integrate(state, inp, self.grid.dt_discr, self.params, self.tol)
                substates.append(state)
        except IntegrationFailure:
            self.step_count = self.episode_steps
            return self._obs(), -10.0, True, {"integration_failure": True, "substates": substates}
        self.state = state
        self.storage += (rho - STEADY_CONTROL.rho) * self.grid.dt_ctrl

        viol_c = any(s.c < self.c_bounds[0] or s.c > self.c_bounds[1] for s in substates)
        viol_T = any(s.T < self.t_bounds[0] or s.T > self.t_bounds[1] for s in substates)
        viol_l = self.storage < 0.0 or self.storage > self.capacity
        violated = viol_c or viol_T or viol_l

        cost_ss = STEADY_CONTROL.F * price * self.grid.dt_ctrl
        cost = F * price * self.grid.dt_ctrl
        reward = -1.0 if violated else self.beta * (cost_ss - cost)

        self.step_count += 1
        done = self.step_count >= self.episode_steps
        info = {
            "substates": substates,
            "applied": inp,
            "price": price,
            "cost": cost,
            "cost_ss": cost_ss,
            "violated": violated,
            "violations": {"c": viol_c, "T": viol_T, "storage": viol_l},
            "storage": self.storage,
            "integration_failure": False,
        }
        return self._obs(), reward, done, info
