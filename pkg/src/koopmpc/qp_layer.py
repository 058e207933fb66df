"""Canonical convex QP with a differentiable solution map.

    min_v  1/2 v'Q v + q'v   s.t.  A_eq v = b_eq,  G v <= h

Forward: equality constraints are eliminated through an orthonormal nullspace
basis (QR of A_eq'), and the reduced inequality-constrained problem is solved
with a dense Mehrotra predictor-corrector interior-point method. Backward:
the optimum is differentiated w.r.t. every problem datum by solving the
(active-set reduced, symmetric) KKT system once — the implicit-function
route, exact wherever strict complementarity holds.

An optional QpStructureCache lets callers that solve many problems sharing
the same (Q, A_eq, G) objects reuse the factorizations; results are
bit-identical with or without it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpGradients",
    "QpStructureCache",
    "DegenerateSensitivity",
    "solve",
    "differentiate",
    "scs_margin",
    "dump_problem",
    "load_problem",
]

_RANK_TOL = 1e-9


class DegenerateSensitivity(RuntimeError):
    """KKT system singular beyond regularization; carries constraint indices."""

    def __init__(self, message: str, indices):
        super().__init__(message)
        self.indices = list(indices)


def _as_matrix(M, rows, cols, name):
    if M is None:
        return np.zeros((rows if rows is not None else 0, cols))
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != cols or (rows is not None and M.shape[0] != rows):
        raise ValueError(f"{name} has shape {M.shape}, expected ({rows}, {cols})")
    return M


@dataclass
class QpProblem:
    Q: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        n = self.q.shape[0]
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected ({n}, {n})")
        if not np.allclose(self.Q, self.Q.T, atol=1e-10, rtol=0):
            raise ValueError("Q must be symmetric")
        self.A_eq = _as_matrix(self.A_eq, None, n, "A_eq")
        self.b_eq = (
            np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float)
        )
        if self.b_eq.shape != (self.A_eq.shape[0],):
            raise ValueError("b_eq length does not match A_eq rows")
        self.G = _as_matrix(self.G, None, n, "G")
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float)
        if self.h.shape != (self.G.shape[0],):
            raise ValueError("h length does not match G rows")
        for name in ("Q", "q", "A_eq", "b_eq", "G", "h"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n_var(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    def objective(self, v: np.ndarray) -> float:
        return float(0.5 * v @ self.Q @ v + self.q @ v)


@dataclass
class QpSolution:
    v_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    status: str  # optimal | max_iter | infeasible
    kkt_residual: float
    iterations: int = 0
    _cache: dict = field(default_factory=dict, repr=False)


@dataclass
class QpGradients:
    dQ: np.ndarray
    dq: np.ndarray
    dA_eq: np.ndarray
    db_eq: np.ndarray
    dG: np.ndarray
    dh: np.ndarray


class QpStructureCache:
    """Reusable factorizations for problems sharing Q, A_eq, G objects."""

    __slots__ = ("_ids", "_data")

    def __init__(self):
        self._ids = None
        self._data = None

    def lookup(self, p: QpProblem):
        if self._ids is not None and self._ids == (id(p.Q), id(p.A_eq), id(p.G)):
            return self._data
        return None

    def store(self, p: QpProblem, data: dict):
        self._ids = (id(p.Q), id(p.A_eq), id(p.G))
        self._data = data


def _factor_structure(p: QpProblem) -> dict:
    """QR-eliminate equalities and project the cost/inequality data."""
    n, me = p.n_var, p.n_eq
    if me > 0:
        Qfull, Rfull = scipy.linalg.qr(p.A_eq.T, mode="full")
        R = Rfull[:me, :]
        diag = np.abs(np.diag(R))
        if me > n or diag.min() <= _RANK_TOL * max(diag.max(), 1.0):
            raise ValueError("A_eq is numerically rank deficient")
        Q1 = Qfull[:, :me]
        Z = Qfull[:, me:]
    else:
        R = np.zeros((0, 0))
        Q1 = np.zeros((n, 0))
        Z = np.eye(n)
    QZ = p.Q @ Z
    Qr = Z.T @ QZ
    Qr = 0.5 * (Qr + Qr.T)
    Gr = p.G @ Z if p.n_ineq > 0 else np.zeros((0, Z.shape[1]))
    return {"Q1": Q1, "Z": Z, "R": R, "QZ": QZ, "Qr": Qr, "Gr": Gr}


def _chol_with_reg(M: np.ndarray):
    """Cholesky factor of M, escalating a diagonal shift if needed."""
    scale = max(float(np.trace(M)) / max(M.shape[0], 1), 1.0)
    reg = 0.0
    for _ in range(8):
        try:
            return scipy.linalg.cho_factor(M + reg * np.eye(M.shape[0]), lower=True), reg
        except scipy.linalg.LinAlgError:
            reg = max(reg * 100.0, 1e-14 * scale)
    raise scipy.linalg.LinAlgError("matrix not positive definite after regularization")


def _kkt_residual(p: QpProblem, v, lam, nu) -> float:
    stat = p.Q @ v + p.q
    if p.n_eq:
        stat = stat + p.A_eq.T @ nu
    if p.n_ineq:
        stat = stat + p.G.T @ lam
    res = float(np.max(np.abs(stat))) if stat.size else 0.0
    if p.n_eq:
        res = max(res, float(np.max(np.abs(p.A_eq @ v - p.b_eq))))
    if p.n_ineq:
        slack = p.h - p.G @ v
        res = max(res, float(max(0.0, np.max(-slack))))
        res = max(res, float(np.max(np.abs(lam * slack))))
        res = max(res, float(max(0.0, np.max(-lam))))
    return res


def solve(
    p: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 50,
    structure: QpStructureCache | None = None,
) -> QpSolution:
    """Solve the QP to a KKT residual below tol (status then 'optimal')."""
    data = structure.lookup(p) if structure is not None else None
    if data is None:
        data = _factor_structure(p)
        if structure is not None:
            structure.store(p, data)
    Q1, Z, R, Qr, Gr = data["Q1"], data["Z"], data["R"], data["Qr"], data["Gr"]
    n, me, mi = p.n_var, p.n_eq, p.n_ineq
    nr = Z.shape[1]

    if me > 0:
        v_p = Q1 @ scipy.linalg.solve_triangular(R.T, p.b_eq, lower=True)
    else:
        v_p = np.zeros(n)
    qr = Z.T @ (p.q + p.Q @ v_p) if nr > 0 else np.zeros(0)
    hr = p.h - p.G @ v_p if mi > 0 else np.zeros(0)

    iterations = 0
    if nr == 0:
        w = np.zeros(0)
        lam = np.zeros(mi)
    elif mi == 0:
        cf, _ = _chol_with_reg(Qr)
        w = scipy.linalg.cho_solve(cf, -qr)
        lam = np.zeros(0)
    else:
        w, lam, iterations, _ = _mehrotra(Qr, qr, Gr, hr, tol, max_iter, data)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam))):
            w = np.zeros(nr)
            lam = np.zeros(mi)

    v = v_p + Z @ w
    nu = _recover_nu(p, data, v, lam)
    residual = _kkt_residual(p, v, lam, nu)
    if residual < tol:
        status = "optimal"
    else:
        primal_gap = float(np.max(p.G @ v - p.h)) if mi else 0.0
        eq_gap = float(np.max(np.abs(p.A_eq @ v - p.b_eq))) if me else 0.0
        status = "infeasible" if max(primal_gap, eq_gap) > np.sqrt(tol) else "max_iter"
    cache = dict(data)
    cache["slack"] = p.h - p.G @ v if mi else np.zeros(0)
    return QpSolution(v, lam, nu, status, residual, iterations, cache)


def _recover_nu(p: QpProblem, data, v, lam):
    if p.n_eq == 0:
        return np.zeros(0)
    rhs = -(p.Q @ v + p.q)
    if p.n_ineq:
        rhs = rhs - p.G.T @ lam
    return scipy.linalg.solve_triangular(data["R"], data["Q1"].T @ rhs, lower=False)


def _mehrotra(Qr, qr, Gr, hr, tol, max_iter, data):
    """Predictor-corrector interior point on min 1/2 w'Qr w + qr'w, Gr w <= hr."""
    nr, mi = Qr.shape[0], Gr.shape[0]
    cf0 = data.get("Qr_chol")
    if cf0 is None:
        cf0, _ = _chol_with_reg(Qr)
        data["Qr_chol"] = cf0
    w = scipy.linalg.cho_solve(cf0, -qr)
    s_raw = hr - Gr @ w
    shift = max(0.0, -1.5 * float(s_raw.min())) if mi else 0.0
    s = np.maximum(s_raw + shift, 1.0)
    lam = np.ones(mi)
    tiny = 1e-14
    best = np.inf
    stall = 0

    for it in range(1, max_iter + 1):
        r_d = Qr @ w + qr + Gr.T @ lam
        r_p = Gr @ w + s - hr
        mu = float(lam @ s) / mi
        comp = float(np.max(lam * s))
        worst = max(np.max(np.abs(r_d)), np.max(np.abs(r_p)), comp)
        if worst < 0.5 * tol:
            return w, lam, it - 1, True
        if worst < 0.98 * best:
            best = worst
            stall = 0
        else:
            stall += 1
            if stall >= 12:  # no longer improving; let the caller judge the iterate
                return w, lam, it - 1, False
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(s))):
            return w, lam, it - 1, False

        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            d = lam / s
        if not np.all(np.isfinite(d)):
            return w, lam, it - 1, False
        M = Qr + Gr.T @ (d[:, None] * Gr)
        try:
            cf, _ = _chol_with_reg(M)
        except (scipy.linalg.LinAlgError, ValueError):
            return w, lam, it - 1, False

        def newton(r_c):
            rhs = -r_d + Gr.T @ ((r_c - lam * r_p) / s)
            dw = scipy.linalg.cho_solve(cf, rhs)
            ds = -r_p - Gr @ dw
            dlam = -(r_c + lam * ds) / s
            return dw, ds, dlam

        # affine (predictor) direction
        dw_a, ds_a, dlam_a = newton(lam * s)
        a_p = _max_step(s, ds_a)
        a_d = _max_step(lam, dlam_a)
        mu_aff = float((lam + a_d * dlam_a) @ (s + a_p * ds_a)) / mi
        sigma = min(1.0, max(0.0, (mu_aff / max(mu, tiny)) ** 3))

        # corrector
        dw, ds, dlam = newton(lam * s + ds_a * dlam_a - sigma * mu)
        a_p = min(1.0, 0.995 * _max_step(s, ds))
        a_d = min(1.0, 0.995 * _max_step(lam, dlam))
        w = w + a_p * dw
        s = s + a_p * ds
        lam = lam + a_d * dlam
        s = np.maximum(s, tiny)
        lam = np.maximum(lam, tiny)
    return w, lam, max_iter, False


def _max_step(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-x[neg] / dx[neg])))


def scs_margin(sol: QpSolution) -> float:
    """min_i max(lambda_i, slack_i): small values flag near-degenerate
    sensitivity (strict complementary slackness nearly violated)."""
    slack = sol._cache.get("slack")
    if slack is None:
        raise ValueError("solution carries no slack cache")
    if slack.size == 0:
        return np.inf
    return float(np.min(np.maximum(sol.lambda_star, slack)))


def differentiate(p: QpProblem, sol: QpSolution, dloss_dv: np.ndarray) -> QpGradients:
    """Gradients of a scalar loss L(v*) w.r.t. all problem data, from one
    solve of the symmetric active-set KKT system.

    Exact where LICQ/SOSC/strict complementarity hold at the solution; a
    diagonal regularization (with a warning) is applied when the reduced
    system is near-singular, and DegenerateSensitivity is raised when it is
    singular beyond that.
    """
    if sol.status != "optimal":
        raise ValueError(f"cannot differentiate a solution with status {sol.status!r}")
    g = np.asarray(dloss_dv, dtype=float)
    if g.shape != (p.n_var,):
        raise ValueError(f"dloss_dv has shape {g.shape}, expected ({p.n_var},)")
    data = sol._cache if sol._cache else _factor_structure(p)
    Z, Q1, R, Qr = data["Z"], data["Q1"], data["R"], data["Qr"]
    v = sol.v_star
    lam = sol.lambda_star
    nr = Z.shape[1]

    slack = data.get("slack")
    if slack is None:
        slack = p.h - p.G @ v if p.n_ineq else np.zeros(0)
    active = lam > slack if p.n_ineq else np.zeros(0, dtype=bool)
    GA = (p.G[active] @ Z) if np.any(active) else np.zeros((0, nr))
    na = GA.shape[0]

    K = np.zeros((nr + na, nr + na))
    K[:nr, :nr] = Qr
    if na:
        K[:nr, nr:] = GA.T
        K[nr:, :nr] = GA
    rhs = np.concatenate([Z.T @ g, np.zeros(na)])

    y = _solve_saddle(K, rhs, nr, na, active)
    w_y = y[:nr]
    y_lam_active = y[nr:]

    y_v = Z @ w_y
    y_lam = np.zeros(p.n_ineq)
    if na:
        y_lam[active] = y_lam_active
    if p.n_eq:
        resid = g - p.Q @ y_v
        if p.n_ineq:
            resid = resid - p.G.T @ y_lam
        y_nu = scipy.linalg.solve_triangular(R, Q1.T @ resid, lower=False)
    else:
        y_nu = np.zeros(0)

    dQ = -0.5 * (np.outer(y_v, v) + np.outer(v, y_v))
    dq = -y_v
    dA = -(np.outer(sol.nu_star, y_v) + np.outer(y_nu, v)) if p.n_eq else np.zeros_like(p.A_eq)
    db = y_nu
    dG = -(lam[:, None] * y_v[None, :] + y_lam[:, None] * v[None, :]) if p.n_ineq else np.zeros_like(p.G)
    if p.n_ineq:
        dG[~active] = 0.0
    dh = y_lam
    return QpGradients(dQ=dQ, dq=dq, dA_eq=dA, db_eq=db, dG=dG, dh=dh)


def _solve_saddle(K, rhs, nr, na, active_mask):
    try:
        return scipy.linalg.solve(K, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError):
        pass
    reg = 1e-10
    Kreg = K.copy()
    Kreg[:nr, :nr] += reg * np.eye(nr)
    if na:
        Kreg[nr:, nr:] -= reg * np.eye(na)
    warnings.warn("near-degenerate KKT system; applying diagonal regularization")
    try:
        return scipy.linalg.solve(Kreg, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError):
        idx = np.flatnonzero(active_mask)
        raise DegenerateSensitivity(
            "KKT system singular beyond regularization", indices=idx
        ) from None


# ---------------------------------------------------------------------------
# Self-describing text dump (debugging reproductions)
# ---------------------------------------------------------------------------

def dump_problem(p: QpProblem, path) -> None:
    with open(path, "w") as fh:
        fh.write("koopmpc-qp 1\n")
        fh.write(f"dims {p.n_var} {p.n_eq} {p.n_ineq}\n")
        for name in ("Q", "q", "A_eq", "b_eq", "G", "h"):
            arr = np.atleast_2d(getattr(p, name))
            fh.write(f"{name}\n")
            for row in arr:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_problem(path) -> QpProblem:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("koopmpc-qp"):
        raise ValueError("not a koopmpc qp dump")
    n, me, mi = (int(x) for x in lines[1].split()[1:])
    rows = {"Q": n, "q": 1, "A_eq": me, "b_eq": 1 if me else 1, "G": mi, "h": 1}
    out = {}
    i = 2
    for name in ("Q", "q", "A_eq", "b_eq", "G", "h"):
        if lines[i] != name:
            raise ValueError(f"expected section {name!r} at line {i + 1}")
        i += 1
        count = rows[name]
        vals = []
        for _ in range(count):
            vals.append([float(x) for x in lines[i].split()] if lines[i] else [])
            i += 1
        out[name] = np.array(vals)
    q = out["q"][0] if out["q"].size else np.zeros(n)
    b_eq = out["b_eq"][0] if me else np.zeros(0)
    h = out["h"][0] if mi else np.zeros(0)
    A_eq = out["A_eq"].reshape(me, n) if me else None
    G = out["G"].reshape(mi, n) if mi else None
    return QpProblem(Q=out["Q"], q=q, A_eq=A_eq, b_eq=b_eq if me else None, G=G, h=h if mi else None)
