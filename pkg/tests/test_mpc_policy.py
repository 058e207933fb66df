import numpy as np
import pytest

from koopmpc import dynamics
from koopmpc.koopman import KoopmanModel
from koopmpc.mpc_policy import (
    KoopmanMpcPolicy,
    OcpConfig,
    PolicyInput,
    act,
    backward,
    build_enmpc_qp,
    build_nmpc_qp,
)


def make_model(rng, N=8, stable=True):
    m = KoopmanModel.create(rng, latent_dim=N)
    m.A[:] = 0.8 * np.eye(N) + 0.05 * rng.normal(size=(N, N))
    m.B[:] = 0.2 * rng.normal(size=(N, 2))
    m.C[:] = 0.4 * rng.normal(size=(2, N))
    return m


def nmpc_input():
    return PolicyInput(state=dynamics.CstrState(0.139, 0.72), rho_ext=1.05)


def enmpc_input(prices=None):
    return PolicyInput(
        state=dynamics.CstrState(0.139, 0.72),
        storage=1.5,
        prices=np.full(9, 50.0) if prices is None else prices,
    )


def test_nmpc_qp_dimensions(rng):
    m = make_model(rng)
    cfg = OcpConfig.nmpc()
    built = build_nmpc_qp(m, cfg, nmpc_input())
    p = built.problem
    assert p.n_var == 3 + 12 * 8
    assert p.n_eq == 12 * 8
    assert p.n_ineq == 6
    # Tikhonov: no zero diagonal
    assert np.min(np.diag(p.Q)) > 0


def test_enmpc_qp_dimensions(rng):
    m = make_model(rng)
    cfg = OcpConfig.enmpc()
    built = build_enmpc_qp(m, cfg, enmpc_input())
    p = built.problem
    n_expected = 9 * 2 + 36 * 8 + 36 + 36 * 3
    assert p.n_var == n_expected
    assert p.n_eq == 36 * 8 + 36
    assert p.n_ineq == 9 * 36 + 4 * 9
    assert np.min(np.diag(p.Q)) > 0


def test_built_qp_is_psd(rng):
    m = make_model(rng)
    for built in (
        build_nmpc_qp(m, OcpConfig.nmpc(), nmpc_input()),
        build_enmpc_qp(m, OcpConfig.enmpc(), enmpc_input()),
    ):
        np.linalg.cholesky(built.problem.Q + 1e-12 * np.eye(built.problem.n_var))


def test_nmpc_degenerate_objective_projects_to_zero(rng):
    # A = I, B = 0: objective constant in F, Tikhonov picks smallest-norm F.
    # The Tikhonov scale must sit well above the solve tolerance for the
    # projection to be numerically visible, so the fixture raises it.
    m = make_model(rng)
    m.A[:] = np.eye(8)
    m.B[:] = 0.0
    out = act(m, OcpConfig.nmpc(tikhonov=1e-6, qp_tol=1e-12, qp_max_iter=200), nmpc_input())
    assert out.status == "optimal"
    # normalized F pushed to the interval projection of zero -> lower bound
    assert out.u_star[0] / 700.0 == pytest.approx(0.0, abs=1e-3)


def test_enmpc_storage_constant_at_rho_ss(rng):
    m = make_model(rng)
    cfg = OcpConfig.enmpc()
    built = build_enmpc_qp(m, cfg, enmpc_input())
    lay = built.layout
    p = built.problem
    # verify the storage recursion rows: rho at steady state keeps l constant
    v = np.zeros(p.n_var)
    rho_ss_norm = (1.0 - 0.8) / 0.4
    l0_norm = 1.5 / 6.0
    for b in range(lay.n_blocks):
        v[lay.u_cols(b).start] = rho_ss_norm
    for t in range(1, lay.horizon + 1):
        v[lay.l_col(t)] = l0_norm
    rows = [lay.sto_row(t) for t in range(lay.horizon)]
    resid = p.A_eq[rows] @ v - p.b_eq[rows]
    assert np.max(np.abs(resid)) < 1e-12


def test_enmpc_low_price_reduces_cooling(rng):
    m = make_model(rng)
    cfg = OcpConfig.enmpc(price_scale=50.0)
    pol = KoopmanMpcPolicy(m, cfg)
    out = pol.act(enmpc_input())
    assert out.status == "optimal"
    # with equal positive prices and no binding state constraints the F
    # objective pushes coolant flow toward its feasible minimum
    built = build_enmpc_qp(m, cfg, enmpc_input())
    assert out.u_star[1] <= 700.0


def test_act_deterministic_and_receding(rng):
    m = make_model(rng)
    pol = KoopmanMpcPolicy(m, OcpConfig.nmpc())
    a = pol.act(nmpc_input())
    b = pol.act(nmpc_input())
    assert np.array_equal(a.u_star, b.u_star)
    # a transient policy produces the same move (no hidden state)
    c = act(m, OcpConfig.nmpc(), nmpc_input())
    assert np.allclose(a.u_star, c.u_star, atol=1e-9)


def test_act_stochastic_logprob(rng):
    m = make_model(rng)
    pol = KoopmanMpcPolicy(m, OcpConfig.nmpc())
    sigma = np.array([70.0])
    out = pol.act(nmpc_input(), stochastic=True, sigma=sigma, rng=rng)
    assert out.u_sampled is not None
    # log-density at the mean
    lp_mean = pol.log_prob_of(out, out.u_star, sigma)
    assert lp_mean == pytest.approx(-float(np.sum(np.log(sigma * np.sqrt(2 * np.pi)))), abs=1e-12)
    # sigma -> 0 limit: sampled control collapses to the mean
    tiny = pol.act(nmpc_input(), stochastic=True, sigma=np.array([1e-12]), rng=rng)
    assert tiny.u_sampled[0] == pytest.approx(tiny.u_star[0], abs=1e-9)


def test_u_star_within_bounds(rng):
    m = make_model(rng)
    out = act(m, OcpConfig.nmpc(), nmpc_input())
    assert 0.0 - 1e-9 <= out.u_star[0] <= 700.0 + 1e-9
    out2 = act(m, OcpConfig.enmpc(), enmpc_input())
    assert 0.8 - 1e-9 <= out2.u_star[0] <= 1.2 + 1e-9
    assert 0.0 - 1e-9 <= out2.u_star[1] <= 700.0 + 1e-9


def test_backward_zero_loss_grad_gives_zero(rng):
    m = make_model(rng)
    pol = KoopmanMpcPolicy(m, OcpConfig.nmpc())
    out = pol.act(nmpc_input())
    grads, degen = backward(out, np.zeros(1))
    assert not degen
    assert all(np.allclose(g, 0.0, atol=1e-12) for g in grads.params())


def _chain_fd_check(model, cfg, inp, gvec, n_checks=4, eps=1e-6, tol=1e-3):
    pol = KoopmanMpcPolicy(model, cfg)
    out = pol.act(inp)
    assert out.status == "optimal"
    grads, degen = backward(out, gvec)
    assert not degen

    def loss(mm):
        return float(gvec @ KoopmanMpcPolicy(mm, cfg).act(inp).u_star)

    rng = np.random.default_rng(0)
    worst = 0.0
    for pi, (arr, gar) in enumerate(zip(model.params(), grads.params())):
        for k in rng.choice(arr.size, size=min(n_checks, arr.size), replace=False):
            idx = np.unravel_index(int(k), arr.shape)
            mp = model.copy(); mp.params()[pi][idx] += eps
            mm_ = model.copy(); mm_.params()[pi][idx] -= eps
            fd = (loss(mp) - loss(mm_)) / (2 * eps)
            an = gar[idx]
            err = abs(an - fd) / max(1.0, abs(an), abs(fd))
            worst = max(worst, err)
    assert worst < tol, worst


def test_full_chain_gradient_tiny_nmpc(rng):
    m = KoopmanModel.create(rng, latent_dim=3, hidden=(4,))
    m.A[:] = 0.8 * np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    m.B[:] = 0.3 * rng.normal(size=(3, 2))
    m.C[:] = 0.5 * rng.normal(size=(2, 3))
    cfg = OcpConfig.nmpc(horizon=2, block=1)
    _chain_fd_check(m, cfg, nmpc_input(), np.array([1.0]))


def test_full_chain_gradient_tiny_enmpc(rng):
    m = KoopmanModel.create(rng, latent_dim=3, hidden=(4,))
    m.A[:] = 0.8 * np.eye(3) + 0.1 * rng.normal(size=(3, 3))
    m.B[:] = 0.3 * rng.normal(size=(3, 2))
    m.C[:] = 0.5 * rng.normal(size=(2, 3))
    # Tikhonov raised so the linear-cost OCP has measurable curvature: the
    # finite-difference oracle is meaningless at the default 1e-8 because the
    # solver noise dominates the quotient
    cfg = OcpConfig.enmpc(horizon=2, block=1, price_scale=50.0, tikhonov=1e-3, qp_tol=1e-12)
    inp = PolicyInput(
        state=dynamics.CstrState(0.139, 0.71), storage=1.5, prices=np.array([60.0, 30.0])
    )
    _chain_fd_check(m, cfg, inp, np.array([0.7, -1.3]))


def test_inactive_constraint_rows_do_not_contribute(rng):
    # rows of C that only touch inactive constraints leave the gradient at 0
    m = KoopmanModel.create(rng, latent_dim=3, hidden=(4,))
    m.A[:] = 0.5 * np.eye(3)
    m.B[:] = 0.3 * rng.normal(size=(3, 2))
    m.C[:] = 0.2 * rng.normal(size=(2, 3))
    cfg = OcpConfig.enmpc(horizon=2, block=1, price_scale=50.0, tikhonov=1e-3)
    inp = PolicyInput(
        state=dynamics.CstrState(0.1367, 0.7293), storage=3.0, prices=np.array([50.0, 50.0])
    )
    pol = KoopmanMpcPolicy(m, cfg)
    out = pol.act(inp)
    assert out.status == "optimal"
    grads, _ = backward(out, np.array([1.0, 0.0]))
    # in eNMPC, C only enters through the state-bound inequality rows; when
    # none of them is active the C gradient vanishes
    sol = out._internals["solution"]
    prob = out._internals["problem"]
    slack = prob.h - prob.G @ sol.v_star
    state_rows_active = (sol.lambda_star[: 9 * 2] > slack[: 9 * 2])[
        np.tile([True, True, True, True, False, False, False, False, False], 2)
    ]
    if not state_rows_active.any():
        assert np.allclose(grads.dC, 0.0, atol=1e-10)


def test_slack_free_solution_respects_state_bounds(rng):
    m = make_model(rng)
    cfg = OcpConfig.enmpc(price_scale=50.0)
    pol = KoopmanMpcPolicy(m, cfg)
    out = pol.act(enmpc_input())
    assert out.status == "optimal"
    if out.predicted_slacks.max() < 1e-7:
        lo = m.state_norm.normalize(cfg.state_lb)
        hi = m.state_norm.normalize(cfg.state_ub)
        pred = m.state_norm.normalize(out.predicted_states[1:])
        assert np.all(pred >= lo - 1e-6) and np.all(pred <= hi + 1e-6)


def test_fallback_on_unsolvable_qp(rng):
    m = make_model(rng)
    pol = KoopmanMpcPolicy(m, OcpConfig.nmpc(qp_max_iter=0))
    out = pol.act(nmpc_input())
    assert out.fallback
    assert out.u_star[0] == dynamics.STEADY_CONTROL.F
    grads, degen = backward(out, np.ones(1))
    assert degen
    assert all(np.all(g == 0) for g in grads.params())


def test_policy_input_validation(rng):
    m = make_model(rng)
    with pytest.raises(ValueError):
        act(m, OcpConfig.nmpc(), PolicyInput(state=dynamics.CstrState(0.1, 0.7)))
    with pytest.raises(ValueError):
        act(
            m,
            OcpConfig.enmpc(),
            PolicyInput(state=dynamics.CstrState(0.1, 0.7), storage=1.0, prices=np.ones(3)),
        )


def test_config_validation():
    with pytest.raises(ValueError):
        OcpConfig.nmpc(horizon=10, block=4)  # not a multiple
    with pytest.raises(ValueError):
        OcpConfig.enmpc(slack_penalty=0.0)
    with pytest.raises(ValueError):
        OcpConfig.nmpc(control_lb=np.array([1.0]), control_ub=np.array([0.5]))


def test_price_scaling_argmax_invariance(rng):
    m = make_model(rng)
    inp = enmpc_input(prices=np.linspace(30, 80, 9))
    cfg1 = OcpConfig.enmpc(price_scale=50.0)
    out1 = act(m, cfg1, inp)
    # scaling prices and the slack penalty identically leaves u* unchanged
    c = 3.7
    cfg2 = OcpConfig.enmpc(price_scale=50.0 / c, slack_penalty=cfg1.slack_penalty * c)
    out2 = act(m, cfg2, inp)
    assert np.max(np.abs(out1.u_star - out2.u_star)) < 1e-4
