import numpy as np
import pytest

from jumpbsde.claims import evaluate_claim, leaf_variables, terminal_values
from jumpbsde.errors import ConfigError

from conftest import lattice


def test_jump_indicator(two_step):
    v = evaluate_claim("0.5*(jumps>=1)", two_step)
    jumps = two_step.slices[-1].counts.sum(axis=1)
    assert np.array_equal(v, 0.5 * (jumps >= 1))


def test_prices_and_functions(two_step):
    S = two_step.slices[-1].S[:, 0]
    assert np.allclose(evaluate_claim("max(S - 1, 0)", two_step), np.maximum(S - 1, 0))
    assert np.allclose(evaluate_claim("where(S > 1, log(S), -S)", two_step), np.where(S > 1, np.log(S), -S))
    assert np.array_equal(evaluate_claim("(S > 1) & (jumps == 0)", two_step),
                          ((S > 1) & (two_step.slices[-1].counts[:, 0] == 0)).astype(float))


def test_mark_sums_and_per_mark_counts():
    m = lattice(marks=[[0.5], [1.0]], weights=[0.3, 0.2])
    env = leaf_variables(m)
    counts = m.slices[-1].counts
    assert np.allclose(env["marksum"], counts @ np.array([0.5, 1.0]))
    assert np.array_equal(evaluate_claim("jumps2", m), counts[:, 1].astype(float))


def test_constant_and_callable(two_step):
    n = two_step.slices[-1].size
    assert np.array_equal(terminal_values(two_step, 0.3), np.full(n, 0.3))
    assert np.allclose(terminal_values(two_step, lambda env: env["S"] ** 2), two_step.slices[-1].S[:, 0] ** 2)


@pytest.mark.parametrize("expr", ["__import__('os')", "S.real", "lambda: 1", "unknown + 1", "1 +"])
def test_rejects_unsupported(two_step, expr):
    with pytest.raises(ConfigError):
        evaluate_claim(expr, two_step)


def test_non_finite_claim_rejected(two_step):
    with pytest.raises(ConfigError):
        terminal_values(two_step, np.full(two_step.slices[-1].size, np.inf))
