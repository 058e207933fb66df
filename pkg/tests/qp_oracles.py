"""Shared test oracles for the QP layer: random strictly convex instances and
a brute-force active-set enumeration solver (independent of the IPM path)."""

import itertools

import numpy as np

from koopmpc.qp_layer import QpProblem


def random_strictly_convex_qp(rng, n_max=12, mi_max=20, with_eq=True):
    n = int(rng.integers(2, n_max + 1))
    mi = int(rng.integers(1, mi_max + 1))
    me = int(rng.integers(0, min(3, n - 1) + 1)) if with_eq else 0
    A = rng.normal(size=(n, n))
    Q = A @ A.T + (0.5 + rng.random()) * n * np.eye(n)
    q = rng.normal(size=n)
    G = rng.normal(size=(mi, n))
    v0 = 0.3 * rng.normal(size=n)
    h = G @ v0 + 0.2 + np.abs(rng.normal(size=mi))
    A_eq = rng.normal(size=(me, n)) if me else None
    b_eq = A_eq @ v0 if me else None
    return QpProblem(Q=Q, q=q, A_eq=A_eq, b_eq=b_eq, G=G, h=h)


def active_set_enumeration(p: QpProblem, feas_tol=1e-9):
    """Exhaustively try every candidate active set of inequality constraints,
    solving the corresponding equality-constrained KKT system, and return the
    feasible KKT point with nonnegative multipliers (the global optimum for a
    strictly convex QP). Vectorized over subsets of equal size.
    """
    n, me, mi = p.n_var, p.n_eq, p.n_ineq
    best_obj, best_v = np.inf, None
    max_active = min(mi, n - me)
    for k in range(0, max_active + 1):
        subsets = list(itertools.combinations(range(mi), k))
        if not subsets:
            continue
        m = me + k
        dim = n + m
        K = np.zeros((len(subsets), dim, dim))
        rhs = np.zeros((len(subsets), dim))
        K[:, :n, :n] = p.Q
        rhs[:, :n] = -p.q
        if me:
            K[:, n : n + me, :n] = p.A_eq
            K[:, :n, n : n + me] = p.A_eq.T
            rhs[:, n : n + me] = p.b_eq
        for si, sub in enumerate(subsets):
            if k:
                GA = p.G[list(sub)]
                K[si, n + me :, :n] = GA
                K[si, :n, n + me :] = GA.T
                rhs[si, n + me :] = p.h[list(sub)]
        try:
            sol = np.linalg.solve(K, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # fall back to per-subset solves, skipping singular systems
            sol = np.full((len(subsets), dim), np.nan)
            for si in range(len(subsets)):
                try:
                    sol[si] = np.linalg.solve(K[si], rhs[si])
                except np.linalg.LinAlgError:
                    continue
        for si, sub in enumerate(subsets):
            v = sol[si, :n]
            if not np.all(np.isfinite(v)):
                continue
            lam_a = sol[si, n + me :]
            if k and np.min(lam_a) < -feas_tol:
                continue
            if mi and np.max(p.G @ v - p.h) > feas_tol:
                continue
            if me and np.max(np.abs(p.A_eq @ v - p.b_eq)) > 1e-7:
                continue
            obj = p.objective(v)
            if obj < best_obj - 1e-12:
                best_obj, best_v = obj, v
    return best_obj, best_v
