"""Data generation from the mechanistic plant and curriculum-based system
identification of the Koopman surrogate.

Trajectories start at the target state; one control follows a random
piecewise-constant reference while the other is chosen per control step by a
scalar receding-horizon search that keeps the concentration near its target,
which concentrates coverage on the feasible operating region. Identification
minimizes the sum of the three Koopman losses, ramping stochastically from
one-step to 240-step closed-loop windows, with early stopping on a fixed
validation window set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .dynamics import ControlInput, CstrState, IntegrationFailure, TimeGrid
from .koopman import KoopmanModel, SiLossWeights, si_loss_and_grads, si_losses
from .nn_core import AdamState, adam_step

__all__ = [
    "DatagenConfig",
    "CurriculumSchedule",
    "Trajectory",
    "sample_reference_signal",
    "generate_trajectory",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "coverage_fraction",
    "train_si",
    "SiResult",
]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class DatagenConfig:
    n_trajectories: int = 84
    n_train: int = 63
    traj_len: int = 480  # discretization steps (5 days)
    c_target: float = dynamics.STEADY_STATE.c
    w_rho: float = 10.0
    w_F: float = 0.1
    lookahead: int = 8  # discretization steps simulated per candidate control
    terminal_weight: float = 48.0  # cost-to-go proxy on the final c deviation
    gs_iters: int = 18
    seed: int = 0
    integration_tol: float = 1e-8

    def __post_init__(self):
        if not (0 < self.n_train < self.n_trajectories):
            raise ValueError("train split must leave a nonempty validation set")
        if self.w_rho <= 0 or self.w_F <= 0:
            raise ValueError("tracking weights must be positive")
        if self.traj_len % TimeGrid().substeps_per_ctrl != 0:
            raise ValueError("trajectory length must cover whole control steps")

    @property
    def n_val(self) -> int:
        return self.n_trajectories - self.n_train


@dataclass
class CurriculumSchedule:
    ramp_epochs: int = 250
    long_horizon: int = 240
    max_epochs: int = 5000
    min_epochs_before_stop: int = 350
    patience: int = 100
    lr: float = 0.5e-4
    minibatch: int = 64
    windows_per_traj: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.ramp_epochs <= 0 or self.long_horizon < 2:
            raise ValueError("invalid curriculum parameters")

    def one_step_probability(self, epoch: int) -> float:
        return max(0.0, 1.0 - epoch / self.ramp_epochs)


@dataclass
class Trajectory:
    states: np.ndarray  # (L+1, 2) raw units
    controls: np.ndarray  # (L, 2) raw units, constant over each control step
    grid: TimeGrid = field(default_factory=TimeGrid)
    which_free: str = "F"
    seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError("states must be one longer than controls")
        k = self.grid.substeps_per_ctrl
        blocks = self.controls.reshape(-1, k, 2)
        if not np.all(blocks == blocks[:, :1, :]):
            raise ValueError("controls must be constant over each control step")

    def __len__(self) -> int:
        return self.controls.shape[0]


def sample_reference_signal(
    which: str, length: int, bounds: tuple[float, float], seed
) -> np.ndarray:
    """Piecewise-constant reference: one uniform draw per control step, held
    over the four discretization steps it spans."""
    if which not in ("rho", "F"):
        raise ValueError(f"unknown control {which!r}")
    k = TimeGrid().substeps_per_ctrl
    n_ctrl = (length + k - 1) // k
    rng = np.random.default_rng(seed)
    draws = rng.uniform(bounds[0], bounds[1], size=n_ctrl)
    return np.repeat(draws, k)[:length]


def _golden_section(J, lo, hi, iters, extra_candidates=()):
    a, b = lo, hi
    fa, fb = J(a), J(b)
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1, f2 = J(x1), J(x2)
    for _ in range(iters):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLDEN * (b - a)
            f1 = J(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (b - a)
            f2 = J(x2)
    candidates = [(f1, x1), (f2, x2), (fa, lo), (fb, hi)]
    candidates += [(J(v), v) for v in extra_candidates]
    return min(candidates)


def _choose_controls(state, ref_window, which_free, cfg, dt) -> tuple[float, float]:
    """Pick this control step's (rho, F) by cyclic scalar searches over the
    lookahead: the free control minimizes the concentration tracking term;
    the referenced control may deviate from its reference against a
    feasible-range-normalized quadratic penalty (w_rho / w_F). The remainder
    of the window holds the free candidate and follows the reference.
    """
    k = TimeGrid().substeps_per_ctrl
    if which_free == "F":
        free_bounds, free_ss = dynamics.F_BOUNDS, dynamics.STEADY_CONTROL.F
        ref_bounds, w_ref = dynamics.RHO_BOUNDS, cfg.w_rho
    else:
        free_bounds, free_ss = dynamics.RHO_BOUNDS, dynamics.STEADY_CONTROL.rho
        ref_bounds, w_ref = dynamics.F_BOUNDS, cfg.w_F
    ref_width = ref_bounds[1] - ref_bounds[0]

    def J(free_value, ref_value):
        obj = 0.0
        s = state
        for j, ref_j in enumerate(ref_window):
            applied_ref = ref_value if j < k else ref_j
            if which_free == "F":
                inp = ControlInput(rho=applied_ref, F=free_value)
            else:
                inp = ControlInput(rho=free_value, F=applied_ref)
            s = dynamics.integrate(s, inp, dt, tol=cfg.integration_tol)
            obj += (cfg.c_target - s.c) ** 2
        obj += w_ref * ((ref_window[0] - ref_value) / ref_width) ** 2
        # terminal cost-to-go proxy: a drifted concentration keeps paying
        # for many steps beyond the short lookahead
        obj += cfg.terminal_weight * (cfg.c_target - s.c) ** 2
        return obj

    ref_now = float(ref_window[0])
    best_f, free = _golden_section(
        lambda v: J(v, ref_now), *free_bounds, cfg.gs_iters, extra_candidates=(free_ss,)
    )
    _, ref_val = _golden_section(
        lambda v: J(free, v), *ref_bounds, cfg.gs_iters, extra_candidates=(ref_now,)
    )
    _, free = _golden_section(
        lambda v: J(v, ref_val), *free_bounds, max(cfg.gs_iters // 2, 8),
        extra_candidates=(free, free_ss),
    )
    if which_free == "F":
        return ref_val, free
    return free, ref_val


def generate_trajectory(cfg: DatagenConfig, which_free: str, seed) -> Trajectory:
    """One 5-day trajectory: the complementary control tracks its random
    reference while the free one is optimized per control step over a short
    simulated lookahead. Regenerates with a shifted seed on integration
    failure."""
    if which_free not in ("rho", "F"):
        raise ValueError(f"unknown control {which_free!r}")
    which_ref = "F" if which_free == "rho" else "rho"
    ref_bounds = dynamics.F_BOUNDS if which_ref == "F" else dynamics.RHO_BOUNDS
    grid = TimeGrid()
    k = grid.substeps_per_ctrl
    for attempt in range(5):
        try:
            ref = sample_reference_signal(which_ref, cfg.traj_len, ref_bounds, (seed, attempt))
            states = np.empty((cfg.traj_len + 1, 2))
            controls = np.empty((cfg.traj_len, 2))
            state = CstrState(c=cfg.c_target, T=dynamics.STEADY_STATE.T)
            states[0] = state.as_array()
            for step in range(cfg.traj_len // k):
                i0 = step * k
                window = ref[i0 : i0 + cfg.lookahead]
                if window.size < cfg.lookahead:
                    window = np.concatenate([window, np.full(cfg.lookahead - window.size, window[-1])])
                rho, F = _choose_controls(state, window, which_free, cfg, grid.dt_discr)
                inp = ControlInput(rho=rho, F=F)
                for j in range(k):
                    state = dynamics.integrate(state, inp, grid.dt_discr, tol=cfg.integration_tol)
                    states[i0 + j + 1] = state.as_array()
                    controls[i0 + j] = inp.as_array()
            return Trajectory(states=states, controls=controls, grid=grid,
                              which_free=which_free, seed=seed)
        except IntegrationFailure:
            warnings.warn(f"trajectory seed {seed} failed to integrate; regenerating")
            continue
    raise RuntimeError(f"could not generate a valid trajectory from seed {seed}")


def generate_dataset(cfg: DatagenConfig) -> list[Trajectory]:
    """84 trajectories, alternating which control carries the random
    reference, each from its own derived seed."""
    out = []
    for i in range(cfg.n_trajectories):
        which_free = "F" if i % 2 == 0 else "rho"
        out.append(generate_trajectory(cfg, which_free, seed=(cfg.seed, i)))
    return out


def coverage_fraction(trajectories: list[Trajectory]) -> float:
    """Fraction of visited states inside the feasible (c, T) box."""
    states = np.concatenate([t.states for t in trajectories])
    inside = (
        (states[:, 0] >= dynamics.C_BOUNDS[0])
        & (states[:, 0] <= dynamics.C_BOUNDS[1])
        & (states[:, 1] >= dynamics.T_BOUNDS[0])
        & (states[:, 1] <= dynamics.T_BOUNDS[1])
    )
    return float(np.mean(inside))


def _config_digest(cfg: DatagenConfig) -> str:
    payload = json.dumps({k: getattr(cfg, k) for k in (
        "n_trajectories", "n_train", "traj_len", "c_target", "w_rho", "w_F",
        "lookahead", "gs_iters", "seed", "integration_tol")}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_dataset(directory, trajectories: list[Trajectory], cfg: DatagenConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, traj in enumerate(trajectories):
        name = f"trajectory_{i:03d}.csv"
        files.append(name)
        with open(directory / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "c", "T", "rho", "F"])
            L = len(traj)
            for t in range(L + 1):
                u = traj.controls[min(t, L - 1)]
                writer.writerow([
                    repr(t * traj.grid.dt_discr),
                    repr(float(traj.states[t, 0])), repr(float(traj.states[t, 1])),
                    repr(float(u[0])), repr(float(u[1])),
                ])
    manifest = {
        "config_digest": _config_digest(cfg),
        "n_trajectories": cfg.n_trajectories,
        "train_indices": list(range(cfg.n_train)),
        "val_indices": list(range(cfg.n_train, cfg.n_trajectories)),
        "files": files,
        "which_free": [t.which_free for t in trajectories],
        "seeds": [str(t.seed) for t in trajectories],
        "dt_discr": TimeGrid().dt_discr,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(directory) -> tuple[list[Trajectory], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    trajectories = []
    for i, name in enumerate(manifest["files"]):
        rows = np.genfromtxt(directory / name, delimiter=",", skip_header=1)
        states = rows[:, 1:3]
        controls = rows[:-1, 3:5]
        trajectories.append(
            Trajectory(states=states, controls=controls,
                       which_free=manifest["which_free"][i])
        )
    return trajectories, manifest


# ---------------------------------------------------------------------------
# Curriculum SI training
# ---------------------------------------------------------------------------

def _normalize_trajectories(model: KoopmanModel, trajectories):
    out = []
    for t in trajectories:
        X = model.state_norm.normalize(t.states)
        U = model.control_norm.normalize(t.controls)
        out.append((X, U))
    return out


def _one_step_windows(data):
    X = np.concatenate([x[:-1][:, None, :] for x, _ in data])
    X1 = np.concatenate([x[1:][:, None, :] for x, _ in data])
    U = np.concatenate([u[:, None, :] for _, u in data])
    return np.concatenate([X, X1], axis=1), U  # (n, 2, 2), (n, 1, 2)


def _long_windows(data, H, offsets):
    Xs, Us = [], []
    for (x, u), offs in zip(data, offsets):
        for o in offs:
            Xs.append(x[o : o + H + 1])
            Us.append(u[o : o + H])
    return np.stack(Xs), np.stack(Us)


def _fixed_val_windows(data, H):
    offsets = []
    for x, _ in data:
        L = x.shape[0] - 1
        n_fit = max(1, L // H)
        offsets.append([i * H for i in range(n_fit)])
    return _long_windows(data, H, offsets)


@dataclass
class SiResult:
    model: KoopmanModel
    log: list[dict]
    best_epoch: int
    best_val: float
    val_comb_240: float


def train_si(
    model: KoopmanModel,
    train_trajs: list[Trajectory],
    val_trajs: list[Trajectory],
    schedule: CurriculumSchedule,
    seed=None,
) -> SiResult:
    """Stochastic curriculum training; returns the parameters that achieved
    the minimum validation loss encountered (the initial model included)."""
    if not train_trajs or not val_trajs:
        raise ValueError("training and validation sets must be nonempty")
    rng = np.random.default_rng(schedule.seed if seed is None else seed)
    weights = SiLossWeights()
    data = _normalize_trajectories(model, train_trajs)
    val_data = _normalize_trajectories(model, val_trajs)
    H = schedule.long_horizon
    Xv, Uv = _fixed_val_windows(val_data, H)
    X1all, U1all = _one_step_windows(data)

    opt = AdamState.init(model.params(), lr=schedule.lr)

    def val_losses():
        ae, pred, comb = si_losses(model, Xv, Uv)
        return ae + pred + comb, comb

    best_val, best_comb = val_losses()
    best_params = [p.copy() for p in model.params()]
    best_epoch = -1
    log = [{"epoch": -1, "mode": "init", "train_loss": float("nan"),
            "val_total": best_val, "val_comb": best_comb}]

    epochs_since_best = 0
    for epoch in range(schedule.max_epochs):
        one_step = rng.random() < schedule.one_step_probability(epoch)
        if one_step:
            order = rng.permutation(X1all.shape[0])
            Xe, Ue = X1all[order], U1all[order]
        else:
            offsets = [
                rng.integers(0, x.shape[0] - H, size=schedule.windows_per_traj)
                for x, _ in data
            ]
            Xe, Ue = _long_windows(data, H, offsets)
            order = rng.permutation(Xe.shape[0])
            Xe, Ue = Xe[order], Ue[order]

        train_loss = 0.0
        n_mb = 0
        for i0 in range(0, Xe.shape[0], schedule.minibatch):
            Xb = Xe[i0 : i0 + schedule.minibatch]
            Ub = Ue[i0 : i0 + schedule.minibatch]
            (ae, pred, comb), grads = si_loss_and_grads(model, Xb, Ub, weights)
            total = ae + pred + comb
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            adam_step(model.params(), grads.params(), opt)
            train_loss += total
            n_mb += 1

        vt, vc = val_losses()
        log.append({"epoch": epoch, "mode": "1-step" if one_step else f"{H}-step",
                    "train_loss": train_loss / max(n_mb, 1), "val_total": vt, "val_comb": vc})
        if vt < best_val:
            best_val, best_comb = vt, vc
            best_params = [p.copy() for p in model.params()]
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epoch + 1 >= schedule.min_epochs_before_stop and epochs_since_best >= schedule.patience:
            break

    for p, bp in zip(model.params(), best_params):
        p[:] = bp
    return SiResult(model=model, log=log, best_epoch=best_epoch,
                    best_val=best_val, val_comb_240=best_comb)
