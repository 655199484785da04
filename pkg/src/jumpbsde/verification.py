"""Property suite run on one configured model: every check returns a row of
(name, measured value, tolerance, passed)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import (entropic_generator, representation_residual, solve_bsde, stability_gap,
                   zero_generator)
from .claims import terminal_values
from .indifference import (asymptotics_sweep, definition_check, entropic_problem_identity,
                           hat_measure_martingale_check, indifference_solve, route_gap, supermartingale_check,
                           time_consistency_check)
from .lattice import expand, validate_model
from .measures import (exponential_tilt_from_U, jump_tilt, martingale_check, minimal_martingale_measure,
                       normalization_check, dual_objective)
from .errors import BudgetError
from .oracles import brute_force_dual, brute_force_primal
from .utility import bound_excess, solve_utility

TREE_LIMIT = 20_000


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool | None  # None marks a skipped check
    note: str = ""

    def row(self):
        status = "skip" if self.passed is None else ("pass" if self.passed else "FAIL")
        return [self.name, f"{self.value:.3e}" if np.isfinite(self.value) else str(self.value),
                f"{self.tol:.1e}", status, self.note]


def _le(name, value, tol, note=""):
    return Check(name, float(value), tol, bool(value <= tol), note)


def _tree_or_none(model):
    if model.is_tree:
        return model
    size = sum(model.n_branch**k for k in range(model.N + 1))
    return expand(model) if size <= TREE_LIMIT else None


def _field_gap(a, b):
    return max(float(np.abs(x - y).max()) if np.size(x) else 0.0 for x, y in zip(a, b))


def run_checks(model, claim, alpha, alphas=(), tol=1e-12) -> list:
    B = terminal_values(model, claim)
    out = []
    rep = validate_model(model, raise_on_error=False)
    out.append(Check("lattice invariants (full scan)", max(rep.prob_sum_residual, rep.drift_residual,
                                                           rep.jump_residual), 1e-13, rep.ok))

    zero = solve_bsde(model, zero_generator(), B)
    out.append(_le("zero-driver representation residual", representation_residual(zero), 1e-12))

    euler = solve_utility(model, B, alpha)
    trunc = solve_utility(model, B, alpha, truncated=True)
    ex = bound_excess(trunc)
    out.append(_le("truncation bound |Y| <= b(t)", ex["Y"], 1e-10))
    out.append(_le("truncation bound |U| <= 2 b(t)", ex["U"], 1e-10))
    ex = bound_excess(euler)
    out.append(_le("untruncated solution within the same bound", max(ex["Y"], ex["U"]), 1e-10))
    prof = trunc.profile
    a = solve_bsde(model, entropic_generator(alpha, "P_hat", model.phi_bound), B, minimal_martingale_measure(model),
                   profile=prof, init="zero")
    b = solve_bsde(model, entropic_generator(alpha, "P_hat", model.phi_bound), B, minimal_martingale_measure(model),
                   profile=prof, init="conditional")
    out.append(_le("Picard uniqueness across initialisations", _field_gap(a.Y, b.Y), 1e-10))
    p_mode = solve_utility(model, B, alpha, under="P")
    out.append(_le("P-driver and P_hat-driver solutions agree", _field_gap(p_mode.Y, euler.Y), 1e-10))

    dtc = solve_utility(model, B, alpha, mode="dt-consistent")
    out.append(_le("dual measure: asset martingale residual", martingale_check(dtc.dual)["max_residual"], 1e-12))
    out.append(_le("Euler dual measure: asset martingale residual",
                   martingale_check(euler.dual)["max_residual"], 1e-12))
    comp = 0.0
    for k in range(model.N):
        expect = np.exp(alpha * dtc.U[k]) * model.slices[k].zeta
        comp = max(comp, float(np.abs(dtc.dual.compensator(k) - expect).max()) if model.m else 0.0)
    out.append(_le("dual compensator equals exp(alpha U) zeta", comp, 1e-12))
    out.append(_le("dual density normalisation", normalization_check(dtc.dual), 1e-13))
    out.append(_le("duality: alpha Y0 equals dual objective", abs(alpha * dtc.y0 - dual_objective(dtc.dual, B, alpha)),
                   1e-10))
    sh = exponential_tilt_from_U(model, dtc.U, alpha)
    out.append(_le("exponential vs stochastic-exponential density (per step)",
                   _field_gap(sh.factors, dtc.dual.factors), 1e-10))
    diff = minimal_martingale_measure(model)
    jumps = jump_tilt(model, [np.exp(alpha * u) for u in euler.U])
    out.append(_le("product factorisation of diffusion and jump tilts",
                   _field_gap(euler.dual.factors, [x * y for x, y in zip(diff.factors, jumps.factors)]), 1e-13))

    for mode in ("euler", "dt-consistent"):
        out.append(_le(f"indifference route equivalence ({mode})", route_gap(model, B, alpha, mode), 1e-10))
    ind = indifference_solve(model, B, alpha)
    out.append(_le("indifference value Q_E-supermartingale drift", supermartingale_check(ind)["max_drift"], 1e-12))
    out.append(_le("indifference time consistency (deterministic)",
                   time_consistency_check(model, B, alpha, model.N // 2)["max_gap"], 1e-10))
    hat = hat_measure_martingale_check(model, B, alpha)
    out.append(_le("indifference value Q_hat-martingale residual (euler)", hat["max_residual"], 1e-10))
    out.append(_le("indifference value Q_hat-martingale residual (dt-consistent)",
                   hat_measure_martingale_check(model, B, alpha, "dt-consistent")["max_residual"], 1e-10))
    out.append(_le("Q_hat compensator equals (1 + h(U)) zeta_E", hat["compensator_residual"], 1e-12))
    for mode in ("euler", "dt-consistent"):
        ident = entropic_problem_identity(model, B, alpha, mode)
        out.append(_le(f"exponential problem under Q_E reproduces pi ({mode})",
                       max(ident["value_gap"], ident["strategy_gap"]), 1e-10))

    y1 = solve_utility(model, 0.0, 1.0)
    scale = 0.0
    qe_gap = 0.0
    for a_ in (0.5, 2.0):
        ya = solve_utility(model, 0.0, a_)
        scale = max(scale, max(float(np.abs(a_ * x - y).max()) for x, y in zip(ya.Y, y1.Y)))
        qe_gap = max(qe_gap, _field_gap(ya.dual.factors, y1.dual.factors))
    out.append(_le("risk-aversion scaling alpha Y(0, alpha) = Y(0, 1)", scale, 1e-10))
    out.append(_le("minimal entropy measure independent of alpha", qe_gap, 1e-10))

    try:
        grid = brute_force_dual(model, B, alpha)
        out.append(_le("dual optimiser beats grid competitors", grid.objective - dual_objective(dtc.dual, B, alpha),
                       1e-12, "grid max minus optimum"))
    except BudgetError as exc:
        out.append(Check("dual optimiser beats grid competitors", np.nan, 0.0, None, str(exc)))

    tree = _tree_or_none(model)
    if tree is not None and tree.node_count <= TREE_LIMIT:
        out.append(_le("indifference time consistency (first jump)",
                       time_consistency_check(tree, B, alpha, "first_jump")["max_gap"], 1e-10))
        bf = brute_force_primal(tree, B, alpha)
        d = solve_utility(tree, B, alpha, mode="dt-consistent")
        gap = max(_field_gap(bf.Y, d.Y), _field_gap(bf.theta, d.theta))
        out.append(_le("dt-consistent solution equals brute-force primal", gap, 1e-10))
        out.append(_le("indifference definition via value functions",
                       definition_check(tree, B, alpha)["difference"], 1e-10))
        dt_tree = solve_utility(tree, B, alpha, mode="dt-consistent")
        sh_tree = exponential_tilt_from_U(tree, dt_tree.U, alpha)
        G = [np.zeros(1)]
        for k in range(tree.N):
            G.append((G[-1][:, None] + np.einsum("nbd,nd->nb", tree.dW_hat(k), dt_tree.theta[k])).ravel())
        path = 0.0
        dens = sh_tree.cumulative_density()
        for k in range(tree.N + 1):
            ordinary = np.exp(-alpha * (dt_tree.y0 + G[k] - dt_tree.Y[k]))
            path = max(path, float(np.abs(dens[k] - ordinary).max()))
        out.append(_le("path-wise density: ordinary vs stochastic exponential", path, 1e-10))
        base = solve_utility(tree, B, alpha)
        xi = np.linspace(0.0, 1.0, tree.slices[-1].size)
        ratios = []
        for delta in (1e-2, 1e-3):
            pert = solve_utility(tree, B + delta * xi, alpha)
            ratios.append(stability_gap(base.bsde, pert.bsde).root_ratio)
        out.append(_le("stability ratio agreement across perturbation sizes",
                       abs(ratios[0] - ratios[1]) / max(ratios), 0.2))
    else:
        out.append(Check("path-wise checks", np.nan, 0.0, None, "lattice too large to expand"))

    if len(alphas) >= 2:
        rep = asymptotics_sweep(model, B, alphas)
        out.append(Check("small risk-aversion sup-gap slope", rep.slopes["sup"], 0.9,
                         bool(rep.slopes["sup"] >= 0.9), "value must be >= tolerance"))
        worst = max(rep.ratio_variation.values())
        out.append(_le("gap/alpha variation across grid", worst, 0.25))
    return out
