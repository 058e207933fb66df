"""Differentiable Koopman-MPC policies.

Builds the task OCPs as convex QPs over blocked controls, latent states,
storage levels, and slack variables (all in normalized units), solves them
through the QP layer, returns the first control move, and chains QP
parameter gradients back to the Koopman model parameters (encoder weights
and the A, B, C matrices).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, qp_layer
from .koopman import KoopmanGrads, KoopmanModel
from .nn_core import mlp_backward, mlp_forward

__all__ = [
    "OcpConfig",
    "PolicyInput",
    "PolicyOutput",
    "BuiltQp",
    "KoopmanMpcPolicy",
    "build_nmpc_qp",
    "build_enmpc_qp",
    "act",
    "backward",
]


@dataclass
class OcpConfig:
    """Horizon, blocking, bounds, and penalty configuration of one task OCP.

    All bound and target fields are in raw physical units; the builders map
    them through the model's normalization. `horizon` counts discretization
    steps and must be a multiple of `block`.
    """

    task: str  # "nmpc" | "enmpc"
    horizon: int
    block: int = 4
    control_lb: np.ndarray = None
    control_ub: np.ndarray = None
    state_lb: np.ndarray | None = None
    state_ub: np.ndarray | None = None
    target_state: np.ndarray | None = None
    slack_penalty: float = 1e3
    tikhonov: float = 1e-4
    storage_capacity: float = dynamics.STORAGE_CAPACITY
    rho_ss: float = 1.0
    dt_discr: float = 0.25
    price_scale: float = 1.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 60

    def __post_init__(self):
        if self.task not in ("nmpc", "enmpc"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.horizon <= 0 or self.horizon % self.block != 0:
            raise ValueError("horizon must be a positive multiple of the block size")
        if self.slack_penalty <= 0:
            raise ValueError("slack penalty must be positive")
        self.control_lb = np.asarray(self.control_lb, dtype=float)
        self.control_ub = np.asarray(self.control_ub, dtype=float)
        if np.any(self.control_ub <= self.control_lb):
            raise ValueError("control bounds must be ordered")
        if (self.state_lb is None) != (self.state_ub is None):
            raise ValueError("state bounds must be given as a pair")
        if self.state_lb is not None:
            self.state_lb = np.asarray(self.state_lb, dtype=float)
            self.state_ub = np.asarray(self.state_ub, dtype=float)
            if np.any(self.state_ub <= self.state_lb):
                raise ValueError("state bounds must be ordered")
        if self.target_state is not None:
            self.target_state = np.asarray(self.target_state, dtype=float)

    @property
    def n_blocks(self) -> int:
        return self.horizon // self.block

    @classmethod
    def nmpc(cls, **overrides) -> "OcpConfig":
        kw = dict(
            task="nmpc",
            horizon=12,
            control_lb=np.array([dynamics.F_BOUNDS[0]]),
            control_ub=np.array([dynamics.F_BOUNDS[1]]),
            target_state=np.array([dynamics.STEADY_STATE.c, dynamics.STEADY_STATE.T]),
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def enmpc(cls, c_bounds: tuple[float, float] | None = None, **overrides) -> "OcpConfig":
        c_lo, c_hi = c_bounds if c_bounds is not None else dynamics.C_BOUNDS
        kw = dict(
            task="enmpc",
            horizon=36,
            control_lb=np.array([dynamics.RHO_BOUNDS[0], dynamics.F_BOUNDS[0]]),
            control_ub=np.array([dynamics.RHO_BOUNDS[1], dynamics.F_BOUNDS[1]]),
            state_lb=np.array([c_lo, dynamics.T_BOUNDS[0]]),
            state_ub=np.array([c_hi, dynamics.T_BOUNDS[1]]),
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class PolicyInput:
    state: dynamics.CstrState
    rho_ext: float | None = None
    storage: float | None = None
    prices: np.ndarray | None = None

    def validate(self, cfg: OcpConfig):
        if cfg.task == "nmpc":
            if self.rho_ext is None or not math.isfinite(self.rho_ext):
                raise ValueError("nmpc input requires a finite rho_ext")
        else:
            if self.storage is None or not math.isfinite(self.storage):
                raise ValueError("enmpc input requires a finite storage level")
            if self.prices is None or len(self.prices) < cfg.n_blocks:
                raise ValueError(f"enmpc input requires a {cfg.n_blocks}-entry price window")
            if not np.all(np.isfinite(np.asarray(self.prices)[: cfg.n_blocks])):
                raise ValueError("price window contains non-finite entries")


@dataclass
class _Layout:
    """Variable / constraint index map of a built OCP."""

    n_var: int
    n_u: int  # controls per block in the OCP decision space
    n_blocks: int
    horizon: int
    latent: int
    z_off: int
    l_off: int = -1
    s_off: int = -1

    def u_cols(self, b: int) -> slice:
        return slice(b * self.n_u, (b + 1) * self.n_u)

    def z_cols(self, t: int) -> slice:
        # valid for t >= 1 (z_0 is a parameter, not a variable)
        return slice(self.z_off + (t - 1) * self.latent, self.z_off + t * self.latent)

    def l_col(self, t: int) -> int:
        return self.l_off + (t - 1)

    def s_cols(self, t: int) -> slice:
        return slice(self.s_off + (t - 1) * 3, self.s_off + t * 3)

    def dyn_rows(self, t: int) -> slice:
        return slice(t * self.latent, (t + 1) * self.latent)

    def sto_row(self, t: int) -> int:
        return self.horizon * self.latent + t


@dataclass
class BuiltQp:
    problem: qp_layer.QpProblem
    layout: _Layout


@dataclass
class PolicyOutput:
    u_star: np.ndarray  # first-block control, raw units
    u_sampled: np.ndarray | None
    log_prob: float | None
    predicted_states: np.ndarray  # (horizon+1, n) raw units
    predicted_slacks: np.ndarray | None
    status: str
    scs_margin: float
    fallback: bool
    grad_hook: object = field(default=None, repr=False)
    _internals: dict = field(default_factory=dict, repr=False)


class KoopmanMpcPolicy:
    """Receding-horizon QP policy around a Koopman model.

    The QP structure (cost, dynamics, constraint matrices) depends only on
    the model matrices A, B, C; it is rebuilt when those change and reused
    otherwise, so repeated `act` calls amortize the factorization work.
    """

    def __init__(self, model: KoopmanModel, cfg: OcpConfig):
        self.model = model
        self.cfg = cfg
        self.degenerate_count = 0
        self.fallback_count = 0
        self._abc_snapshot = None
        self._structure = None
        self._qp_cache = qp_layer.QpStructureCache()
        if cfg.task == "nmpc" and cfg.target_state is None:
            raise ValueError("nmpc config requires a target state")

    # -- structure ---------------------------------------------------------

    def _ensure_structure(self):
        snap = (self.model.A, self.model.B, self.model.C)
        if self._abc_snapshot is not None and all(
            np.array_equal(a, b) for a, b in zip(self._abc_snapshot, snap)
        ):
            return self._structure
        self._abc_snapshot = tuple(m.copy() for m in snap)
        if self.cfg.task == "nmpc":
            self._structure = self._build_nmpc_structure()
        else:
            self._structure = self._build_enmpc_structure()
        self._qp_cache = qp_layer.QpStructureCache()
        return self._structure

    def _build_nmpc_structure(self):
        m, cfg = self.model, self.cfg
        N, H, nb = m.latent_dim, cfg.horizon, cfg.n_blocks
        lay = _Layout(n_var=nb + H * N, n_u=1, n_blocks=nb, horizon=H, latent=N, z_off=nb)
        A, B, C = m.A, m.B, m.C
        B_F = B[:, 1]

        Q = np.zeros((lay.n_var, lay.n_var))
        q = np.zeros(lay.n_var)
        tgt = m.state_norm.normalize(cfg.target_state)
        CtC2 = 2.0 * (C.T @ C)
        for t in range(1, H + 1):
            zc = lay.z_cols(t)
            Q[zc, zc] = CtC2
            q[zc.start : zc.stop] = -2.0 * (C.T @ tgt)
        Q[np.diag_indices(lay.n_var)] += 2.0 * cfg.tikhonov

        A_eq = np.zeros((H * N, lay.n_var))
        for t in range(H):
            rows = lay.dyn_rows(t)
            A_eq[rows, lay.z_cols(t + 1)] = np.eye(N)
            if t >= 1:
                A_eq[rows, lay.z_cols(t)] = -A
            A_eq[rows.start : rows.stop, t // cfg.block] = -B_F

        G = np.zeros((2 * nb, lay.n_var))
        h = np.zeros(2 * nb)
        for b in range(nb):
            G[2 * b, b] = 1.0
            h[2 * b] = 1.0
            G[2 * b + 1, b] = -1.0
            h[2 * b + 1] = 0.0
        return {"Q": Q, "q": q, "A_eq": A_eq, "G": G, "h": h, "layout": lay}

    def _build_enmpc_structure(self):
        m, cfg = self.model, self.cfg
        N, H, nb = m.latent_dim, cfg.horizon, cfg.n_blocks
        n_u = 2
        z_off = n_u * nb
        l_off = z_off + H * N
        s_off = l_off + H
        n_var = s_off + 3 * H
        lay = _Layout(
            n_var=n_var, n_u=n_u, n_blocks=nb, horizon=H, latent=N,
            z_off=z_off, l_off=l_off, s_off=s_off,
        )
        A, B, C = m.A, m.B, m.C

        Q = np.zeros((n_var, n_var))
        Q[np.diag_indices(n_var)] = 2.0 * cfg.tikhonov
        sl = slice(s_off, n_var)
        Q[sl, sl] += 2.0 * cfg.slack_penalty * np.eye(3 * H)
        # q is input-dependent (prices); only its sparsity lives here

        rho_w = cfg.control_ub[0] - cfg.control_lb[0]
        sto_gain = cfg.dt_discr * rho_w / cfg.storage_capacity
        sto_const = cfg.dt_discr * (cfg.control_lb[0] - cfg.rho_ss) / cfg.storage_capacity

        A_eq = np.zeros((H * N + H, n_var))
        for t in range(H):
            rows = lay.dyn_rows(t)
            A_eq[rows, lay.z_cols(t + 1)] = np.eye(N)
            if t >= 1:
                A_eq[rows, lay.z_cols(t)] = -A
            uc = lay.u_cols(t // cfg.block)
            A_eq[rows, uc] = -B
            r = lay.sto_row(t)
            A_eq[r, lay.l_col(t + 1)] = 1.0
            if t >= 1:
                A_eq[r, lay.l_col(t)] = -1.0
            A_eq[r, uc.start] = -sto_gain  # rho column of the block

        # normalized state bounds (variant bounds mapped through the model norm)
        st_lo = m.state_norm.normalize(cfg.state_lb)
        st_hi = m.state_norm.normalize(cfg.state_ub)

        G = np.zeros((9 * H + 4 * nb, n_var))
        h = np.zeros(9 * H + 4 * nb)
        for t in range(1, H + 1):
            r0 = 9 * (t - 1)
            zc = lay.z_cols(t)
            sc = lay.s_cols(t)
            for j in range(2):  # state c then T
                G[r0 + 2 * j, zc] = C[j]
                G[r0 + 2 * j, sc.start + j] = -1.0
                h[r0 + 2 * j] = st_hi[j]
                G[r0 + 2 * j + 1, zc] = -C[j]
                G[r0 + 2 * j + 1, sc.start + j] = -1.0
                h[r0 + 2 * j + 1] = -st_lo[j]
            lc = lay.l_col(t)
            G[r0 + 4, lc] = 1.0
            G[r0 + 4, sc.start + 2] = -1.0
            h[r0 + 4] = 1.0
            G[r0 + 5, lc] = -1.0
            G[r0 + 5, sc.start + 2] = -1.0
            h[r0 + 5] = 0.0
            for j in range(3):  # slack nonnegativity
                G[r0 + 6 + j, sc.start + j] = -1.0
                h[r0 + 6 + j] = 0.0
        base = 9 * H
        for b in range(nb):
            uc = lay.u_cols(b)
            for j in range(n_u):
                G[base + 4 * b + 2 * j, uc.start + j] = 1.0
                h[base + 4 * b + 2 * j] = 1.0
                G[base + 4 * b + 2 * j + 1, uc.start + j] = -1.0
                h[base + 4 * b + 2 * j + 1] = 0.0
        return {
            "Q": Q, "A_eq": A_eq, "G": G, "h": h, "layout": lay,
            "sto_const": sto_const,
        }

    # -- per-call problem assembly ------------------------------------------

    def build(self, inp: PolicyInput) -> tuple[BuiltQp, np.ndarray, object]:
        """Assemble the QP for one policy input. Returns (built, z0, tape)."""
        inp.validate(self.cfg)
        st = self._ensure_structure()
        lay = st["layout"]
        m, cfg = self.model, self.cfg
        x_norm = m.state_norm.normalize(inp.state.as_array())
        z0, tape = mlp_forward(m.encoder, x_norm)

        H, N = lay.horizon, lay.latent
        if cfg.task == "nmpc":
            rho_norm = (inp.rho_ext - cfg_rho_lb(m)) / cfg_rho_width(m)
            b_eq = np.tile(m.B[:, 0] * rho_norm, H)
            b_eq[:N] += m.A @ z0
            q = st["q"]
        else:
            b_eq = np.zeros(H * N + H)
            b_eq[:N] = m.A @ z0
            b_eq[H * N] = st["sto_const"] + inp.storage / cfg.storage_capacity
            b_eq[H * N + 1 :] = st["sto_const"]
            q = np.zeros(lay.n_var)
            p_norm = np.asarray(inp.prices, dtype=float)[: lay.n_blocks] / cfg.price_scale
            for b in range(lay.n_blocks):
                q[lay.u_cols(b).start + 1] = p_norm[b]  # F column of the block
        problem = qp_layer.QpProblem(
            Q=st["Q"], q=q, A_eq=st["A_eq"], b_eq=b_eq, G=st["G"], h=st["h"]
        )
        return BuiltQp(problem, lay), z0, tape

    # -- policy evaluation ---------------------------------------------------

    def act(
        self,
        inp: PolicyInput,
        stochastic: bool = False,
        sigma: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> PolicyOutput:
        built, z0, tape = self.build(inp)
        cfg = self.cfg
        lay = built.layout
        sol = qp_layer.solve(
            built.problem, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter, structure=self._qp_cache
        )
        if sol.status != "optimal":
            self.fallback_count += 1
            u_star = self._fallback_control()
            out = PolicyOutput(
                u_star=u_star, u_sampled=None, log_prob=None,
                predicted_states=np.tile(inp.state.as_array(), (lay.horizon + 1, 1)),
                predicted_slacks=None, status=sol.status, scs_margin=0.0,
                fallback=True,
            )
            out._internals = {"policy": self}
        else:
            v = sol.v_star
            u_norm = np.clip(v[lay.u_cols(0)], 0.0, 1.0)
            u_star = cfg.control_lb + u_norm * (cfg.control_ub - cfg.control_lb)
            zs = np.empty((lay.horizon + 1, lay.latent))
            zs[0] = z0
            for t in range(1, lay.horizon + 1):
                zs[t] = v[lay.z_cols(t)]
            x_hat = self.model.state_norm.denormalize(zs @ self.model.C.T)
            slacks = None
            if cfg.task == "enmpc":
                slacks = v[lay.s_off :].reshape(lay.horizon, 3)
            out = PolicyOutput(
                u_star=u_star, u_sampled=None, log_prob=None,
                predicted_states=x_hat, predicted_slacks=slacks,
                status=sol.status, scs_margin=qp_layer.scs_margin(sol),
                fallback=False,
            )
            out._internals = {
                "problem": built.problem, "solution": sol, "layout": lay,
                "z0": z0, "tape": tape, "policy": self,
                "rho_ext": inp.rho_ext,
            }
        out.grad_hook = lambda dloss_du: backward(out, dloss_du)
        if stochastic:
            if sigma is None or rng is None:
                raise ValueError("stochastic mode requires sigma and rng")
            sigma = np.asarray(sigma, dtype=float)
            if np.any(sigma <= 0):
                raise ValueError("sigma must be positive")
            noise = rng.standard_normal(out.u_star.shape[0])
            out.u_sampled = out.u_star + sigma * noise
            out.log_prob = gaussian_log_prob(out.u_sampled, out.u_star, sigma)
        return out

    def log_prob_of(self, out: PolicyOutput, u: np.ndarray, sigma: np.ndarray) -> float:
        return gaussian_log_prob(u, out.u_star, np.asarray(sigma, dtype=float))

    def _fallback_control(self) -> np.ndarray:
        if self.cfg.task == "nmpc":
            return np.array([dynamics.STEADY_CONTROL.F])
        return np.array([dynamics.STEADY_CONTROL.rho, dynamics.STEADY_CONTROL.F])


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, sigma: np.ndarray) -> float:
    z = (np.asarray(u) - np.asarray(mean)) / sigma
    return float(-0.5 * np.sum(z**2) - np.sum(np.log(sigma * np.sqrt(2.0 * np.pi))))


def cfg_rho_lb(model: KoopmanModel) -> float:
    return float(model.control_norm.lower[0])


def cfg_rho_width(model: KoopmanModel) -> float:
    return float(model.control_norm.width[0])


def backward(out: PolicyOutput, dloss_du: np.ndarray) -> tuple[KoopmanGrads, bool]:
    """Chain d(loss)/d(u_star) through the QP and the OCP construction into
    gradients w.r.t. all Koopman parameters. Returns (grads, degenerate_flag);
    on degenerate sensitivity the gradients are zero and the flag is set.
    """
    internals = out._internals
    policy: KoopmanMpcPolicy = internals.get("policy") if internals else None
    if out.fallback or policy is None:
        model = policy.model if policy is not None else None
        if model is None:
            raise ValueError("output carries no internals to differentiate")
        return KoopmanGrads.zeros_like(model), True
    model, cfg = policy.model, policy.cfg
    lay: _Layout = internals["layout"]
    problem: qp_layer.QpProblem = internals["problem"]
    sol: qp_layer.QpSolution = internals["solution"]
    z0, tape = internals["z0"], internals["tape"]

    dloss_du = np.asarray(dloss_du, dtype=float)
    if dloss_du.shape != out.u_star.shape:
        raise ValueError("dloss_du shape does not match the control dimension")
    d_unorm = dloss_du * (cfg.control_ub - cfg.control_lb)
    dloss_dv = np.zeros(lay.n_var)
    dloss_dv[lay.u_cols(0)] = d_unorm

    try:
        g = qp_layer.differentiate(problem, sol, dloss_dv)
    except qp_layer.DegenerateSensitivity:
        policy.degenerate_count += 1
        return KoopmanGrads.zeros_like(model), True

    N, H = lay.latent, lay.horizon
    dA = np.zeros_like(model.A)
    dB = np.zeros_like(model.B)
    dC = np.zeros_like(model.C)

    for t in range(H):
        rows = lay.dyn_rows(t)
        if t >= 1:
            dA -= g.dA_eq[rows, lay.z_cols(t)]
        uc = lay.u_cols(t // cfg.block)
        if cfg.task == "nmpc":
            dB[:, 1] -= g.dA_eq[rows.start : rows.stop, uc.start]
        else:
            dB -= g.dA_eq[rows, uc]
    db0 = g.db_eq[:N]
    dA += np.outer(db0, z0)
    dz0 = model.A.T @ db0

    if cfg.task == "nmpc":
        rho_norm = (internals["rho_ext"] - cfg_rho_lb(model)) / cfg_rho_width(model)
        for t in range(H):
            rows = lay.dyn_rows(t)
            dB[:, 0] += g.db_eq[rows.start : rows.stop] * rho_norm
        tgt = model.state_norm.normalize(cfg.target_state)
        for t in range(1, H + 1):
            zc = lay.z_cols(t)
            dQ_t = g.dQ[zc, zc]
            dC += 4.0 * model.C @ dQ_t
            dC += -2.0 * np.outer(tgt, g.dq[zc.start : zc.stop])
    else:
        for t in range(1, H + 1):
            r0 = 9 * (t - 1)
            zc = lay.z_cols(t)
            for j in range(2):
                dC[j] += g.dG[r0 + 2 * j, zc]
                dC[j] -= g.dG[r0 + 2 * j + 1, zc]

    _, enc_grads = mlp_backward(model.encoder, tape, dz0)
    return KoopmanGrads(enc_grads, dA, dB, dC), False


# -- module-level conveniences (fresh policy per call) -----------------------

def build_nmpc_qp(model: KoopmanModel, cfg: OcpConfig, inp: PolicyInput) -> BuiltQp:
    built, _, _ = KoopmanMpcPolicy(model, cfg).build(inp)
    return built


def build_enmpc_qp(model: KoopmanModel, cfg: OcpConfig, inp: PolicyInput) -> BuiltQp:
    if cfg.task != "enmpc":
        raise ValueError("config task must be 'enmpc'")
    built, _, _ = KoopmanMpcPolicy(model, cfg).build(inp)
    return built


def act(
    model: KoopmanModel,
    cfg: OcpConfig,
    inp: PolicyInput,
    stochastic: bool = False,
    sigma: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> PolicyOutput:
    return KoopmanMpcPolicy(model, cfg).act(inp, stochastic=stochastic, sigma=sigma, rng=rng)
