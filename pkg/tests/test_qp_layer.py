import numpy as np
import pytest

from koopmpc.qp_layer import (
    QpProblem,
    QpStructureCache,
    differentiate,
    dump_problem,
    load_problem,
    scs_margin,
    solve,
)
from qp_oracles import active_set_enumeration, random_strictly_convex_qp


def test_unconstrained_minimum():
    p = QpProblem(Q=np.diag([2.0, 2.0]), q=np.array([-2.0, -4.0]))
    s = solve(p)
    assert s.status == "optimal"
    assert np.allclose(s.v_star, [1.0, 2.0], atol=1e-8)


def test_scalar_box_kkt_by_hand():
    # min 1/2 (v-2)^2 s.t. v <= 1  ->  v* = 1, lambda* = 1
    p = QpProblem(Q=np.array([[1.0]]), q=np.array([-2.0]), G=np.array([[1.0]]), h=np.array([1.0]))
    s = solve(p)
    assert s.status == "optimal"
    assert s.v_star[0] == pytest.approx(1.0, abs=1e-8)
    assert s.lambda_star[0] == pytest.approx(1.0, abs=1e-7)


def test_random_qps_match_enumeration_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        p = random_strictly_convex_qp(rng, n_max=8, mi_max=10)
        s = solve(p)
        assert s.status == "optimal"
        assert s.kkt_residual < 1e-8
        obj_oracle, _ = active_set_enumeration(p)
        assert s.status == "optimal"
        assert p.objective(s.v_star) == pytest.approx(obj_oracle, abs=1e-6)


def test_solution_invariants_at_optimal():
    rng = np.random.default_rng(5)
    p = random_strictly_convex_qp(rng)
    s = solve(p)
    assert s.status == "optimal"
    slack = p.h - p.G @ s.v_star
    assert np.min(slack) > -1e-8
    assert np.min(s.lambda_star) > -1e-12
    assert np.max(np.abs(s.lambda_star * slack)) < 1e-8


def test_scale_consistency():
    rng = np.random.default_rng(9)
    p = random_strictly_convex_qp(rng)
    tol = 1e-8
    s1 = solve(p, tol=tol)
    c = 37.0
    p2 = QpProblem(Q=c * p.Q, q=c * p.q, A_eq=p.A_eq, b_eq=p.b_eq, G=p.G, h=p.h)
    s2 = solve(p2, tol=tol)
    assert np.max(np.abs(s1.v_star - s2.v_star)) < 10 * tol


def test_infeasible_detected_without_crash():
    # v <= 0 and v >= 1 simultaneously
    p = QpProblem(
        Q=np.array([[1.0]]), q=np.array([0.0]),
        G=np.array([[1.0], [-1.0]]), h=np.array([0.0, -1.0]),
    )
    s = solve(p)
    assert s.status in ("infeasible", "max_iter")


def test_rank_deficient_equalities_rejected():
    p = QpProblem(
        Q=np.eye(2), q=np.zeros(2),
        A_eq=np.array([[1.0, 1.0], [2.0, 2.0]]), b_eq=np.array([1.0, 2.0]),
    )
    with pytest.raises(ValueError):
        solve(p)


def test_structure_cache_gives_identical_results():
    rng = np.random.default_rng(11)
    p = random_strictly_convex_qp(rng)
    cache = QpStructureCache()
    s_plain = solve(p)
    s_first = solve(p, structure=cache)
    # second call through the warm cache must be bit-identical
    s_again = solve(p, structure=cache)
    assert np.array_equal(s_first.v_star, s_again.v_star)
    assert np.array_equal(s_plain.v_star, s_first.v_star)


def test_differentiate_active_inactive_and_unconstrained():
    # active: dv*/dh = 1
    p = QpProblem(Q=np.array([[1.0]]), q=np.array([-2.0]), G=np.array([[1.0]]), h=np.array([1.0]))
    s = solve(p)
    g = differentiate(p, s, np.array([1.0]))
    assert g.dh[0] == pytest.approx(1.0, abs=1e-7)
    # inactive: dv*/dh = 0
    p2 = QpProblem(Q=np.array([[1.0]]), q=np.array([-2.0]), G=np.array([[1.0]]), h=np.array([3.0]))
    s2 = solve(p2)
    g2 = differentiate(p2, s2, np.array([1.0]))
    assert g2.dh[0] == 0.0
    # unconstrained: dL/dq = -Q^{-1} g
    Q = np.array([[3.0, 0.5], [0.5, 2.0]])
    p3 = QpProblem(Q=Q, q=np.array([1.0, -1.0]))
    s3 = solve(p3)
    gv = np.array([0.7, 0.3])
    g3 = differentiate(p3, s3, gv)
    assert np.allclose(g3.dq, -np.linalg.solve(Q, gv), atol=1e-8)


def test_objective_gradient_wrt_b_eq_is_minus_nu():
    rng = np.random.default_rng(21)
    p = random_strictly_convex_qp(rng, with_eq=True)
    while p.n_eq == 0:
        p = random_strictly_convex_qp(rng, with_eq=True)
    s = solve(p, tol=1e-10)
    g = differentiate(p, s, p.Q @ s.v_star + p.q)  # dObjective/dv
    assert np.allclose(g.db_eq, -s.nu_star, atol=1e-6)
    # finite-difference confirmation on one entry
    eps = 1e-6
    db = np.zeros(p.n_eq); db[0] = eps
    op = solve(QpProblem(p.Q, p.q, p.A_eq, p.b_eq + db, p.G, p.h), tol=1e-12)
    om = solve(QpProblem(p.Q, p.q, p.A_eq, p.b_eq - db, p.G, p.h), tol=1e-12)
    fd = (p.objective(op.v_star) - p.objective(om.v_star)) / (2 * eps)
    assert fd == pytest.approx(-s.nu_star[0], abs=1e-4)


def test_gradients_match_finite_differences_when_scs_holds():
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 25:
        p = random_strictly_convex_qp(rng, n_max=8, mi_max=10)
        s = solve(p, tol=1e-10)
        if s.status != "optimal" or scs_margin(s) < 1e-3:
            continue
        checked += 1
        gvec = rng.normal(size=p.n_var)
        g = differentiate(p, s, gvec)
        eps = 1e-6

        def loss(**kw):
            data = {"Q": p.Q, "q": p.q, "A_eq": p.A_eq, "b_eq": p.b_eq, "G": p.G, "h": p.h}
            data.update(kw)
            return float(gvec @ solve(QpProblem(**data), tol=1e-12).v_star)

        checks = [("q", p.q, g.dq), ("h", p.h, g.dh), ("G", p.G, g.dG), ("Q", p.Q, g.dQ)]
        if p.n_eq:
            checks += [("A_eq", p.A_eq, g.dA_eq), ("b_eq", p.b_eq, g.db_eq)]
        for name, arr, grad in checks:
            k = rng.integers(arr.size)
            idx = np.unravel_index(k, arr.shape)
            E = np.zeros_like(arr)
            E[idx] = eps
            if name == "Q" and idx[0] != idx[1]:
                E[idx[1], idx[0]] = eps
            fd = (loss(**{name: arr + E}) - loss(**{name: arr - E})) / (2 * eps)
            an = float(np.sum(np.asarray(grad) * E / eps))
            assert abs(an - fd) / max(1.0, abs(an), abs(fd)) < 1e-4, (name, idx, an, fd)


def test_differentiate_requires_optimal():
    p = QpProblem(
        Q=np.array([[1.0]]), q=np.array([0.0]),
        G=np.array([[1.0], [-1.0]]), h=np.array([0.0, -1.0]),
    )
    s = solve(p)
    with pytest.raises(ValueError):
        differentiate(p, s, np.array([1.0]))


def test_scs_margin_cases():
    # strictly interior: margin = min slack
    p = QpProblem(Q=np.eye(1), q=np.zeros(1), G=np.array([[1.0]]), h=np.array([2.0]))
    s = solve(p)
    assert scs_margin(s) == pytest.approx(2.0, abs=1e-6)
    # active v <= 1 example: margin = max(lambda, 0) = 1
    p2 = QpProblem(Q=np.array([[1.0]]), q=np.array([-2.0]), G=np.array([[1.0]]), h=np.array([1.0]))
    s2 = solve(p2)
    assert scs_margin(s2) == pytest.approx(1.0, abs=1e-6)
    # degenerate construction: lambda = slack = 0 exactly; the interior-point
    # iterate stops at the sqrt(tol) scale, so the margin lands there too
    p3 = QpProblem(Q=np.array([[1.0]]), q=np.array([0.0]), G=np.array([[1.0]]), h=np.array([0.0]))
    s3 = solve(p3)
    assert scs_margin(s3) < 1e-4


def test_no_equality_no_inequality_edge_cases():
    p = QpProblem(Q=np.eye(3), q=np.array([1.0, -2.0, 0.5]))
    s = solve(p)
    assert np.allclose(s.v_star, -p.q, atol=1e-10)
    assert scs_margin(s) == np.inf


def test_problem_dump_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    p = random_strictly_convex_qp(rng)
    path = tmp_path / "problem.qp"
    dump_problem(p, path)
    p2 = load_problem(path)
    for name in ("Q", "q", "A_eq", "b_eq", "G", "h"):
        assert np.array_equal(getattr(p, name), getattr(p2, name)), name


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(Q=np.array([[1.0, 0.5], [0.0, 1.0]]), q=np.zeros(2))  # asymmetric
    with pytest.raises(ValueError):
        QpProblem(Q=np.eye(2), q=np.zeros(3))
    with pytest.raises(ValueError):
        QpProblem(Q=np.eye(2), q=np.array([np.nan, 0.0]))
