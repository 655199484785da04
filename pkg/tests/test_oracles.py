import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpbsde.errors import BudgetError
from jumpbsde.lattice import build_lattice
from jumpbsde.measures import dual_objective
from jumpbsde.oracles import brute_force_dual, brute_force_primal, dual_grid, entropic_recursion, strategy_utility
from jumpbsde.utility import solve_utility

from conftest import JUMP_CLAIM, lattice


def test_primal_trivial():
    m = lattice(phi=0.0)
    bf = brute_force_primal(m, 0.0, 2.0, x=0.4)
    assert bf.value == pytest.approx(-math.exp(-0.8), abs=1e-15)
    assert all(np.abs(t).max() <= 1e-15 for t in bf.theta)


def test_primal_closed_form_limit():
    m = build_lattice(dict(horizon=1, steps=16, sigma=0.2, phi=0.4))
    bf = brute_force_primal(m, 0.0, 2.0)
    assert abs(bf.Y[0][0] + 0.04) <= 0.04 / 16
    assert bf.stalls == 0


def test_primal_beats_random_strategies(rng):
    m = lattice(steps=3)
    bf = brute_force_primal(m, JUMP_CLAIM, 1.0, x=0.1)
    for _ in range(100):
        theta = [bf.theta[k] + rng.normal(0, 0.5, size=bf.theta[k].shape) for k in range(m.N)]
        assert strategy_utility(m, JUMP_CLAIM, 1.0, theta, 0.1) <= bf.value + 1e-15
    assert strategy_utility(m, JUMP_CLAIM, 1.0, bf.theta, 0.1) == pytest.approx(bf.value, rel=1e-12)


def test_recursion_one_period_closed_form():
    m = build_lattice(dict(horizon=1, steps=1, sigma=0.2, phi=0.0, marks=[[1.0]], weights=[0.1]))
    y = entropic_recursion(m, "jumps", 1.0).Y[0][0]
    assert y == pytest.approx(math.log(0.1 * math.e + 0.9), abs=1e-15)
    assert y == pytest.approx(0.1585651, abs=1e-7)


def test_recursion_zero_claim_and_cash_shift():
    m = lattice(steps=3)
    z = entropic_recursion(m, 0.0, 1.5)
    bf = brute_force_primal(m, 0.0, 1.5)
    assert max(float(np.abs(a - b).max()) for a, b in zip(z.Y, bf.Y)) <= 1e-12
    c = entropic_recursion(m, 0.3, 1.5)
    assert max(float(np.abs(a - b - 0.3).max()) for a, b in zip(c.Y, z.Y)) <= 1e-14


@settings(max_examples=20, deadline=None)
@given(alpha=st.floats(0.2, 3), phi=st.floats(-0.8, 0.8), a=st.floats(-1, 1), b=st.floats(-1, 1),
       steps=st.integers(1, 3))
def test_primal_and_recursion_agree(alpha, phi, a, b, steps):
    m = lattice(steps=steps, phi=phi, sigma=0.3)
    claim = lambda env: a * env["S"] + b * (env["jumps"] >= 1) + 0.3 * a * b * env["S"] * env["jumps"]
    bf = brute_force_primal(m, claim, alpha)
    rec = entropic_recursion(m, claim, alpha)
    assert max(float(np.abs(x - y).max()) for x, y in zip(bf.Y, rec.Y)) <= 1e-12
    assert max(float(np.abs(x - y).max()) for x, y in zip(bf.theta, rec.theta)) <= 1e-10


def test_dual_grid_zero_claim_selects_mmm(two_step):
    g = brute_force_dual(two_step, 0.0, 1.0)
    assert all(np.all(t == 1.0) for t in g.tilts)


def test_dual_grid_below_optimum(two_step):
    d = solve_utility(two_step, JUMP_CLAIM, 1.0, mode="dt-consistent")
    opt = dual_objective(d.dual, JUMP_CLAIM, 1.0)
    g = brute_force_dual(two_step, JUMP_CLAIM, 1.0)
    assert g.objective <= opt + 1e-12
    assert opt - g.objective <= 2e-2
    # weak duality against the primal oracle
    assert 1.0 * brute_force_primal(two_step, JUMP_CLAIM, 1.0).Y[0][0] >= g.objective - 1e-12


def test_dual_grid_attains_analytic_tilt(two_step):
    d = solve_utility(two_step, JUMP_CLAIM, 1.0, mode="dt-consistent")
    analytic = [np.exp(u) for u in d.U]
    g = brute_force_dual(two_step, JUMP_CLAIM, 1.0, extra_points=np.concatenate([a.ravel() for a in analytic]))
    assert g.objective == pytest.approx(dual_objective(d.dual, JUMP_CLAIM, 1.0), abs=1e-12)
    for t, a in zip(g.tilts, analytic):
        assert np.array_equal(t, a)


def test_dual_grid_shape():
    pts = dual_grid(1.02, 4.0)
    assert pts[0] <= math.exp(-4) and pts[-1] >= math.exp(4)
    assert np.allclose(pts[1:] / pts[:-1], 1.02)
    assert 1.0 in pts


def test_dual_budget(two_step):
    with pytest.raises(BudgetError):
        brute_force_dual(two_step, JUMP_CLAIM, 1.0, budget=100)
