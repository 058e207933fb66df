import csv

import numpy as np
import pytest

from koopmpc import dynamics, evaluation
from koopmpc.environments import synthetic_prices
from koopmpc.evaluation import (
    BoundsVariant,
    EmbeddingReport,
    EnmpcReport,
    NmpcReport,
    SteadyStateController,
    TABLE_VARIANTS,
    analyze_embedding,
    emit_report,
    evaluate_enmpc,
    evaluate_nmpc,
)
from koopmpc.koopman import KoopmanModel, default_cstr_norm
from koopmpc.nn_core import Mlp


@pytest.fixture(scope="module")
def test_prices():
    return synthetic_prices(start="2018-03-26", end="2018-09-30", seed=0)


def test_table_variant_values():
    assert TABLE_VARIANTS["tightened"].c_bounds == (0.1299, 0.1435)
    assert TABLE_VARIANTS["relaxed"].c_bounds == (0.1162, 0.1572)
    assert TABLE_VARIANTS["shifted"].c_bounds == (0.1504, 0.1777)
    with pytest.raises(ValueError):
        BoundsVariant("bad", 0.2, 0.1)


class _ConstantController:
    name = "constant-F"
    task = "nmpc"

    def __init__(self, F=390.0):
        self.F = F
        self.seen = []

    def act(self, obs):
        self.seen.append(obs.rho_ext)
        return np.array([self.F])


def test_evaluate_nmpc_scores_nonpositive_and_deterministic():
    a = evaluate_nmpc(_ConstantController(), n_episodes=3, seed=9)
    b = evaluate_nmpc(_ConstantController(), n_episodes=3, seed=9)
    assert np.all(a.scores <= 0)
    assert np.array_equal(a.scores, b.scores)
    assert a.summary()["episodes"] == 3


def test_evaluate_nmpc_shared_seed_fairness():
    c1 = _ConstantController(F=390.0)
    c2 = _ConstantController(F=200.0)
    evaluate_nmpc(c1, n_episodes=2, seed=4)
    evaluate_nmpc(c2, n_episodes=2, seed=4)
    # both controllers saw the identical external production-rate schedule
    assert c1.seen == c2.seen


def test_evaluate_enmpc_steady_state_baseline(test_prices):
    rep = evaluate_enmpc(SteadyStateController(), test_prices, n_days=2)
    assert rep.relative_cost == pytest.approx(1.0, abs=1e-12)
    assert rep.violation_pct == 0.0
    assert rep.steps == 48


def test_evaluate_enmpc_variant_reconfigures_env(test_prices):
    # the shifted band excludes the steady state, so a steady-state
    # controller violates at every step
    rep = evaluate_enmpc(
        SteadyStateController(), test_prices, n_days=1, variant=TABLE_VARIANTS["shifted"]
    )
    assert rep.violation_pct == 100.0


def _identity_model():
    enc = Mlp([np.eye(2)], [np.zeros(2)], ["identity"])
    return KoopmanModel(enc, np.eye(2), np.zeros((2, 2)), np.eye(2), default_cstr_norm())


def _contracting_model(factor=0.9):
    # reconstruction pulls every normalized state toward the box center
    enc = Mlp([factor * np.eye(2)], [np.full(2, 0.5 * (1 - factor))], ["identity"])
    return KoopmanModel(enc, np.eye(2), np.zeros((2, 2)), np.eye(2), default_cstr_norm())


def _labelled_states(rng, n=400):
    norm = default_cstr_norm().subset(["c", "T"])
    xn = rng.uniform(-0.2, 1.2, size=(n, 2))
    states = norm.denormalize(xn)
    labels = np.any((xn < 0) | (xn > 1), axis=1)
    return states, labels


def test_identity_autoencoder_perfect_classification(rng):
    states, labels = _labelled_states(rng)
    m = _identity_model()
    rep = analyze_embedding(m, m, states, labels)
    for vals in rep.pairings.values():
        assert vals["mse"] < 1e-28
        assert vals["sensitivity"] == 1.0
        assert vals["specificity"] == 1.0


def test_confusion_arithmetic_against_direct_count(rng):
    states, labels = _labelled_states(rng)
    si = _identity_model()
    rl = _contracting_model()
    rep = analyze_embedding(si, rl, states, labels)
    # oracle: apply the contracting map directly and count
    norm = si.state_norm
    xn = norm.normalize(states)
    recon = 0.9 * xn + 0.05
    recon_viol = np.any((recon < 0) | (recon > 1), axis=1)
    tp = np.sum(recon_viol & labels)
    tn = np.sum(~recon_viol & ~labels)
    expect_sens = tp / labels.sum()
    expect_spec = tn / (~labels).sum()
    got = rep.pairings[("RL", "RL")]
    assert got["sensitivity"] == pytest.approx(expect_sens, abs=1e-12)
    assert got["specificity"] == pytest.approx(expect_spec, abs=1e-12)
    # contracting reconstruction loses shallow violations
    assert got["sensitivity"] < 1.0


def test_analyze_embedding_requires_both_classes(rng):
    states, labels = _labelled_states(rng)
    m = _identity_model()
    with pytest.raises(ValueError):
        analyze_embedding(m, m, states, np.zeros_like(labels, dtype=bool))


def test_emit_report_empty_is_success(tmp_path):
    written = emit_report([], tmp_path)
    assert written == []


def test_emit_report_csv_schema_and_row_counts(tmp_path, test_prices):
    rep = evaluate_enmpc(SteadyStateController(), test_prices, n_days=1, keep_trajectory=True)
    nrep = evaluate_nmpc(_ConstantController(), n_episodes=2, seed=1, keep_trajectory=True)
    written = emit_report([rep, nrep], tmp_path, formats=("csv",))
    names = {p.name for p in written}
    assert "enmpc_summary.csv" in names
    assert "nmpc_summary.csv" in names
    assert "nmpc_scores.csv" in names
    traj = tmp_path / "trajectory_steady-state.csv"
    assert traj.exists()
    with open(traj) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    assert header == ["time", "c", "T", "rho", "F", "price", "storage", "violated"]
    assert len(rows) == rep.steps + 1  # initial state plus one row per step
    with open(tmp_path / "nmpc_scores.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["controller", "episode", "score"]


def test_emit_report_svg(tmp_path, test_prices):
    rep = evaluate_enmpc(SteadyStateController(), test_prices, n_days=1, keep_trajectory=True)
    written = emit_report([rep], tmp_path, formats=("csv", "svg"))
    assert any(p.suffix == ".svg" for p in written)
