import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpbsde.errors import LatticeError
from jumpbsde.indifference import (asymptotics_sweep, definition_check, entropic_problem_identity,
                                   hat_measure_martingale_check, indifference_solve, minimal_entropy_measure,
                                   risk_min_solve, route_gap, supermartingale_check, time_consistency_check)
from jumpbsde.lattice import build_lattice
from jumpbsde.measures import martingale_check

from conftest import JUMP_CLAIM, lattice

MODES = ["euler", "dt-consistent"]


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("route", ["two-run", "direct-bsde"])
def test_zero_and_cash_claims(two_step, mode, route):
    z = indifference_solve(two_step, 0.0, 1.0, route, mode)
    assert all(np.abs(p).max() <= 1e-15 for p in z.pi)
    assert all(np.abs(p).max() <= 1e-12 for p in z.psi)
    c = indifference_solve(two_step, 0.37, 1.0, route, mode)
    assert all(np.abs(p - 0.37).max() <= 1e-14 for p in c.pi)
    assert all(np.abs(p).max() <= 1e-12 for p in c.psi)


@pytest.mark.parametrize("mode", MODES)
def test_route_equivalence(two_step, mode):
    assert route_gap(two_step, JUMP_CLAIM, 1.0, mode) <= 1e-10


def test_definition_by_value_functions(two_step):
    rep = definition_check(two_step, JUMP_CLAIM, 1.0, x=0.3)
    assert rep["difference"] <= 1e-10
    assert 0 < rep["pi0"] < 0.5


def test_cash_translation(two_step):
    a = indifference_solve(two_step, JUMP_CLAIM, 1.0)
    b = indifference_solve(two_step, lambda env: 0.5 * (env["jumps"] >= 1) + 0.2, 1.0)
    assert all(np.abs(y - x - 0.2).max() <= 1e-14 for x, y in zip(a.pi, b.pi))


def test_risk_min_examples(two_step):
    q_E = minimal_entropy_measure(two_step)
    c = risk_min_solve(two_step, 0.4, q_E)
    assert all(np.abs(y - 0.4).max() <= 1e-15 for y in c.Y)
    assert all(np.abs(z).max() <= 1e-15 for z in c.Z) and all(np.abs(u).max() <= 1e-15 for u in c.U)
    ind = risk_min_solve(two_step, "jumps>=1", q_E)
    leaves = (two_step.slices[-1].counts.sum(axis=1) >= 1).astype(float)
    assert ind.y0 == pytest.approx(q_E.expectation(leaves), abs=1e-15)


def test_risk_min_replicates_price_claims():
    m = build_lattice(dict(horizon=1, steps=3, sigma=0.3, phi=0.2, recombine=False))
    q_E = minimal_entropy_measure(m)
    sol = risk_min_solve(m, "S", q_E)
    gains = np.zeros(1)
    for k in range(m.N):
        gains = (gains[:, None] + np.einsum("nbd,nd->nb", m.dW_hat(k), sol.Z[k])).ravel()
    assert np.abs(m.slices[-1].S[:, 0] - sol.y0 - gains).max() <= 1e-12


def test_supermartingale(two_step):
    rep = supermartingale_check(indifference_solve(two_step, JUMP_CLAIM, 1.0))
    assert rep["max_drift"] <= 1e-12
    assert rep["negative_nodes"] > 0
    cash = supermartingale_check(indifference_solve(two_step, 0.3, 1.0))
    assert abs(cash["max_drift"]) <= 1e-15


def test_supermartingale_drift_vanishes_with_alpha(two_step):
    worst = []
    for a in (1.0, 0.1, 0.01):
        res = indifference_solve(two_step, JUMP_CLAIM, a)
        worst.append(max(float(np.abs(res.q_E.expect_next(k, res.pi[k + 1]) - res.pi[k]).max())
                         for k in range(two_step.N)))
    assert worst[0] > worst[1] > worst[2]
    assert worst[2] <= 0.02 * worst[0]


@pytest.mark.parametrize("mode", MODES)
def test_time_consistency(two_step, mode):
    assert time_consistency_check(two_step, JUMP_CLAIM, 1.0, "T", mode)["max_gap"] <= 1e-15
    assert time_consistency_check(two_step, JUMP_CLAIM, 1.0, 1, mode)["max_gap"] <= 1e-10
    assert time_consistency_check(two_step, JUMP_CLAIM, 1.0, "first_jump", mode)["max_gap"] <= 1e-10


def test_non_stopping_rule_rejected(two_step):
    def peek(tree):
        # stop at 1 only if the final step jumps: depends on the future
        return np.where(tree.slices[-1].counts[:, 0] > 0, 1, 2)

    with pytest.raises(LatticeError, match="not a stopping time"):
        time_consistency_check(two_step, JUMP_CLAIM, 1.0, peek)


@pytest.mark.parametrize("mode", MODES)
def test_hat_measure(two_step, mode):
    rep = hat_measure_martingale_check(two_step, JUMP_CLAIM, 1.0, mode)
    assert rep["max_residual"] <= 1e-10
    assert martingale_check(rep["measure"])["max_residual"] <= 1e-12
    if mode == "euler":
        assert rep["compensator_residual"] <= 1e-12
    cash = hat_measure_martingale_check(two_step, 0.25, 1.0, mode)
    assert cash["max_residual"] <= 1e-15
    q_E = minimal_entropy_measure(two_step, 1.0, mode)
    assert max(float(np.abs(a - b).max()) for a, b in zip(cash["measure"].factors, q_E.factors)) <= 1e-12


@pytest.mark.parametrize("mode", MODES)
def test_exponential_problem_under_q_e(two_step, mode):
    rep = entropic_problem_identity(two_step, JUMP_CLAIM, 1.0, mode)
    assert max(rep.values()) <= 1e-10
    zero = entropic_problem_identity(two_step, 0.0, 1.0, mode)
    assert max(zero.values()) <= 1e-12
    cash = entropic_problem_identity(two_step, 0.2, 1.0, mode)
    assert max(cash.values()) <= 1e-12


def test_asymptotics_constant_claim(two_step):
    rep = asymptotics_sweep(two_step, 0.3, [0.5, 0.25, 0.125, 0.0625])
    assert np.all(rep.sup_gap <= 1e-12) and np.all(rep.z_gap <= 1e-12) and np.all(rep.u_gap <= 1e-12)


def test_asymptotics_jump_claim(tmp_path):
    m = lattice(steps=4)
    rep = asymptotics_sweep(m, JUMP_CLAIM, [0.5, 0.25, 0.125, 0.0625])
    assert np.all(np.diff(rep.sup_gap) < 0)
    assert rep.slopes["sup"] >= 0.9
    assert rep.ratio_variation["sup"] <= 0.25
    assert np.all(np.diff(rep.pi0) <= 0) or np.all(np.diff(rep.pi0) >= 0)  # reported, here monotone
    assert abs(rep.pi0[-1] - rep.limit0) <= rep.sup_gap[-1] + 1e-15
    rep.to_csv(tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == ["alpha", "sup_gap", "z_gap", "u_gap"]
    assert len(lines) == 5


@pytest.mark.parametrize("grid", [[], [0.5, 0.5], [0.25, 0.5], [2.0, 1.0], [0.5, -0.1]])
def test_asymptotics_grid_validation(two_step, grid):
    with pytest.raises(ValueError):
        asymptotics_sweep(two_step, JUMP_CLAIM, grid)


def test_sweep_threads_deterministic(two_step):
    a = asymptotics_sweep(two_step, JUMP_CLAIM, [0.5, 0.25, 0.125])
    b = asymptotics_sweep(two_step, JUMP_CLAIM, [0.5, 0.25, 0.125], threads=3)
    assert np.array_equal(a.sup_gap, b.sup_gap) and np.array_equal(a.z_gap, b.z_gap)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 1.0), st.floats(-0.5, 0.5), st.floats(-0.25, 0.25))
def test_route_equivalence_property(alpha, a, b):
    m = lattice()
    claim = lambda env: a * (env["jumps"] >= 1) + b * env["jumps"] ** 2
    for mode in MODES:
        assert route_gap(m, claim, alpha, mode) <= 1e-10
