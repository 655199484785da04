"""Indifference valuation and hedging, its structural properties, and the
small risk-aversion limit."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, indifference_generator, solve_bsde, write_rows, zero_generator
from .claims import terminal_values
from .errors import LatticeError
from .lattice import expand
from .measures import MeasureChange, averaged_esscher_measure, h_ratio, hat_measure
from .oracles import brute_force_primal, entropic_recursion
from .utility import UtilityResult, solve_utility, value_function

ROUTES = ("two-run", "direct-bsde")


@dataclass(eq=False)
class IndifferenceResult:
    model: object
    alpha: float
    mode: str
    route: str
    B: np.ndarray
    pi: list
    psi: list
    U: list
    q_E: MeasureChange
    zero: UtilityResult
    claim: UtilityResult | None = None

    @property
    def pi0(self) -> float:
        return float(self.pi[0][0])


def minimal_entropy_measure(model, alpha=1.0, mode="euler") -> MeasureChange:
    """Dual optimiser of the claim-free problem, built from ``U^{0,alpha}``."""
    dual = solve_utility(model, 0.0, alpha, mode=mode).dual
    return MeasureChange(model, dual.factors, "Q_E")


def indifference_solve(model, B, alpha, route="two-run", mode="euler") -> IndifferenceResult:
    """Indifference value ``pi`` and hedge ``psi``.

    ``two-run`` differences two utility problems; ``direct-bsde`` solves the
    pure-jump driver under ``Q^E`` (the exact entropic recursion under
    ``Q^E`` in dt-consistent mode).
    """
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}")
    Bv = terminal_values(model, B)
    r0 = solve_utility(model, 0.0, alpha, mode=mode)
    q_E = MeasureChange(model, r0.dual.factors, "Q_E")
    if route == "two-run":
        rB = solve_utility(model, Bv, alpha, mode=mode)
        pi = [a - b for a, b in zip(rB.Y, r0.Y)]
        psi = [a - b for a, b in zip(rB.Z, r0.Z)]
        U = [a - b for a, b in zip(rB.U, r0.U)]
        return IndifferenceResult(model, alpha, mode, route, Bv, pi, psi, U, q_E, r0, rB)
    rE = solve_utility(model, Bv, alpha, mode=mode, measure=q_E, market_price=False)
    return IndifferenceResult(model, alpha, mode, route, Bv, rE.Y, rE.theta, rE.U, q_E, r0, rE)


def route_gap(model, B, alpha, mode="euler") -> float:
    a = indifference_solve(model, B, alpha, "two-run", mode)
    b = indifference_solve(model, B, alpha, "direct-bsde", mode)
    gap = max(float(np.abs(x - y).max()) for x, y in zip(a.pi, b.pi))
    gap = max([gap] + [float(np.abs(x - y).max()) for x, y in zip(a.psi, b.psi)])
    return gap


def definition_check(model, B, alpha, x=0.0, mode="dt-consistent") -> dict:
    """Compare ``V^0(x)`` with ``V^B(x + pi_0)`` using brute-force value functions."""
    res = indifference_solve(model, B, alpha, "two-run", mode)
    v0 = brute_force_primal(model, 0.0, alpha, x).value
    vB = brute_force_primal(model, B, alpha, x + res.pi0).value
    return {"pi0": res.pi0, "V0": v0, "VB": vB, "difference": abs(v0 - vB)}


def risk_min_solve(model, B, q_E: MeasureChange) -> BsdeSolution:
    """Zero-driver BSDE under ``Q^E``: conditional expectation and its integrands."""
    return solve_bsde(model, zero_generator(), B, measure=q_E, driver="W_hat")


def _conditional_tail(model, measure, per_step):
    """``E_k[sum_{j >= k} c_j]`` at every node, by backward accumulation."""
    acc = [None] * (model.N + 1)
    acc[model.N] = np.zeros(model.slices[model.N].size)
    for k in range(model.N - 1, -1, -1):
        acc[k] = per_step[k] + measure.expect_next(k, acc[k + 1])
    return acc


@dataclass(eq=False)
class AsymptoticsReport:
    alphas: np.ndarray
    sup_gap: np.ndarray
    z_gap: np.ndarray
    u_gap: np.ndarray
    slopes: dict = field(default_factory=dict)
    ratio_variation: dict = field(default_factory=dict)
    pi0: np.ndarray | None = None
    limit0: float | None = None

    def rows(self):
        for i, a in enumerate(self.alphas):
            yield [a, self.sup_gap[i], self.z_gap[i], self.u_gap[i],
                   self.slopes["sup"], self.slopes["z"], self.slopes["u"]]

    header = ["alpha", "sup_gap", "z_gap", "u_gap", "slope_sup", "slope_z", "slope_u"]

    def to_csv(self, path):
        write_rows(path, self.header, self.rows())


def _gaps_for_alpha(model, B, alpha, mode):
    res = indifference_solve(model, B, alpha, "two-run", mode)
    lim = risk_min_solve(model, B, res.q_E)
    sup = max(float(np.abs(p - y).max()) for p, y in zip(res.pi, lim.Y))
    dz = [((p - z) ** 2).sum(axis=1) * model.dt for p, z in zip(res.psi, lim.Z)]
    du = [((u - v) ** 2 * res.q_E.compensator(k) * model.lam * model.dt).sum(axis=1)
          for k, (u, v) in enumerate(zip(res.U, lim.U))]
    zt = _conditional_tail(model, res.q_E, dz)
    ut = _conditional_tail(model, res.q_E, du)
    zg = float(np.sqrt(max(a.max() for a in zt)))
    ug = float(np.sqrt(max(a.max() for a in ut)))
    return sup, zg, ug, res.pi0, lim.Y[0][0]


NOISE_FLOOR = 1e-12


def _slope(alphas, gaps):
    gaps = np.asarray(gaps)
    if np.all(gaps <= NOISE_FLOOR):
        return float("inf")  # identically zero gaps decay at every rate
    if np.any(gaps <= 0):
        return float("nan")
    return float(np.polyfit(np.log(alphas), np.log(gaps), 1)[0])


def _variation(alphas, gaps):
    if np.all(np.asarray(gaps) <= NOISE_FLOOR):
        return 0.0
    r = np.asarray(gaps) / np.asarray(alphas)
    if r.max() == 0:
        return 0.0
    return float((r.max() - r.min()) / r.max())


def asymptotics_sweep(model, B, alphas, mode="euler", threads=1) -> AsymptoticsReport:
    """Gaps between ``(pi, psi, U)`` at each ``alpha`` and the zero-driver limit under ``Q^E``.

    The sup gap is the largest node difference of values; the Z and U gaps are
    square roots of the largest conditional accumulated quadratic distances.
    Gaps that stay below ``NOISE_FLOOR`` over the whole grid count as zero.
    """
    alphas = np.asarray(list(alphas), dtype=float)
    if alphas.size == 0:
        raise ValueError("empty risk-aversion grid")
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("risk aversions must lie in (0, 1]")
    if np.any(np.diff(alphas) >= 0):
        raise ValueError("risk-aversion grid must be strictly decreasing")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(lambda a: _gaps_for_alpha(model, B, a, mode), alphas))
    else:
        out = [_gaps_for_alpha(model, B, a, mode) for a in alphas]
    sup, zg, ug, pi0, lim0 = (np.array(v) for v in zip(*out))
    rep = AsymptoticsReport(alphas, sup, zg, ug, pi0=pi0, limit0=float(lim0[0]))
    for name, g in (("sup", sup), ("z", zg), ("u", ug)):
        rep.slopes[name] = _slope(alphas, g)
        rep.ratio_variation[name] = _variation(alphas, g)
    return rep


def supermartingale_check(result: IndifferenceResult) -> dict:
    """``E^{Q^E}[pi' | node] - pi`` at every node; must be nonpositive."""
    model = result.model
    worst, where, negative = -np.inf, None, 0
    for k in range(model.N):
        drift = result.q_E.expect_next(k, result.pi[k + 1]) - result.pi[k]
        i = int(np.argmax(drift))
        if drift[i] > worst:
            worst, where = float(drift[i]), model.node_label(k, i)
        negative += int((drift < 0).sum())
    return {"max_drift": worst, "node": where, "negative_nodes": negative}


def first_jump_time(model) -> np.ndarray:
    """Leaf array of the slice index just after the first jump, or ``N``."""
    model.require_tree()
    N = model.N
    tau = np.full(model.slices[N].size, N)
    for k in range(N, 0, -1):
        anc = model.leaf_ancestors(k)
        jumped = model.slices[k].counts.sum(axis=1)[anc] > 0
        tau = np.where(jumped, k, tau)
    return tau


def check_stopping_time(model, tau) -> None:
    """``{tau <= k}`` must be decided by the node at slice ``k``."""
    tau = np.asarray(tau)
    N = model.N
    if tau.shape != (model.slices[N].size,) or tau.min() < 0 or tau.max() > N:
        raise LatticeError("stopping rule must give a slice index in 0..N for every leaf")
    for k in range(N + 1):
        anc = model.leaf_ancestors(k)
        stopped = (tau <= k).astype(float)
        lo = np.full(model.slices[k].size, np.inf)
        hi = np.full(model.slices[k].size, -np.inf)
        np.minimum.at(lo, anc, stopped)
        np.maximum.at(hi, anc, stopped)
        if np.any(lo != hi):
            i = int(np.flatnonzero(lo != hi)[0])
            raise LatticeError(f"rule is not a stopping time: at node {model.node_label(k, i)} it depends "
                               "on future branches", node=model.node_label(k, i))


def _resolve(model, terminal, alpha, q_E, mode, stop_index=None):
    if mode == "dt-consistent":
        return entropic_recursion(model, terminal, alpha, measure=q_E, stop_index=stop_index).Y
    return solve_bsde(model, indifference_generator(alpha), terminal, measure=q_E, driver="W_hat",
                      stop_index=stop_index).Y


def time_consistency_check(model, B, alpha, tau="T", mode="euler") -> dict:
    """Re-solve with the claim ``pi_tau`` at ``tau`` and compare on ``[0, tau]``.

    ``tau`` is ``"T"``, a slice index, ``"first_jump"``, a leaf array or a
    callable returning one.
    """
    if isinstance(tau, (int, np.integer)) or tau == "T":
        res = indifference_solve(model, B, alpha, "two-run", mode)
        K = model.N if tau == "T" else int(tau)
        if not 0 <= K <= model.N:
            raise ValueError(f"deterministic stopping slice {K} outside 0..{model.N}")
        Y = _resolve(model, res.pi[K], alpha, res.q_E, mode, stop_index=K)
        gap = max(float(np.abs(a - b).max()) for a, b in zip(Y, res.pi[:K + 1]))
        return {"max_gap": gap, "stopping": f"slice {K}"}
    tree = expand(model)
    res = indifference_solve(tree, B, alpha, "two-run", mode)
    if isinstance(tau, str):
        if tau != "first_jump":
            raise ValueError(f"unknown stopping rule {tau!r}")
        leaf_tau = first_jump_time(tree)
    elif callable(tau):
        leaf_tau = np.asarray(tau(tree))
    else:
        leaf_tau = np.asarray(tau)
    check_stopping_time(tree, leaf_tau)
    N = tree.N
    terminal = np.empty(tree.slices[N].size)
    for k in range(N + 1):
        sel = leaf_tau == k
        terminal[sel] = res.pi[k][tree.leaf_ancestors(k)[sel]]
    Y = _resolve(tree, terminal, alpha, res.q_E, mode)
    gap = 0.0
    for k in range(N + 1):
        anc = tree.leaf_ancestors(k)
        active = np.zeros(tree.slices[k].size, dtype=bool)
        active[anc[leaf_tau >= k]] = True
        if active.any():
            gap = max(gap, float(np.abs(Y[k] - res.pi[k])[active].max()))
    return {"max_gap": gap, "stopping": "custom" if not isinstance(tau, str) else tau}


def hat_measure_martingale_check(model, B, alpha, mode="euler") -> dict:
    """Martingale residual of ``pi`` under the measure ``Q_hat``.

    Euler mode tilts the jump branches of ``Q^E`` by ``1 + h(U^E)``.  In
    dt-consistent mode that tilt leaves an O(dt^2) drift per step, so the
    exact counterpart is used instead: the average of the Esscher tilts of the
    hedged increment ``pi' - psi . dW_hat`` over ``s`` in ``[0, alpha]``.  The
    residual is then exact whenever the hedged increment is pure jump.
    """
    res = indifference_solve(model, B, alpha, "direct-bsde", mode)
    if mode == "dt-consistent":
        inc = [model.next_values(k, res.pi[k + 1]) - np.einsum("nbd,nd->nb", model.dW_hat(k), res.psi[k])
               for k in range(model.N)]
        q_hat = averaged_esscher_measure(model, inc, alpha, res.q_E)
    else:
        q_hat = hat_measure(model, res.U, alpha, res.q_E)
    worst = 0.0
    comp = 0.0
    for k in range(model.N):
        worst = max(worst, float(np.abs(q_hat.expect_next(k, res.pi[k + 1]) - res.pi[k]).max()))
        expected = (1 + h_ratio(res.U[k], alpha)) * res.q_E.compensator(k)
        comp = max(comp, float(np.abs(q_hat.compensator(k) - expected).max()) if model.m else 0.0)
    return {"max_residual": worst, "compensator_residual": comp, "measure": q_hat}


def entropic_problem_identity(model, B, alpha, mode="euler") -> dict:
    """Exponential problem under ``Q^E`` without market price of risk versus ``pi``."""
    res = indifference_solve(model, B, alpha, "two-run", mode)
    cross = solve_utility(model, res.B, alpha, mode=mode, measure=res.q_E, market_price=False)
    y_gap = max(float(np.abs(a - b).max()) for a, b in zip(cross.Y, res.pi))
    t_gap = max(float(np.abs(a - b).max()) for a, b in zip(cross.theta, res.psi))
    v_gap = max(float(np.abs(value_function(0.0, a, alpha) + np.exp(alpha * b)).max())
                for a, b in zip(cross.Y, res.pi))
    return {"value_gap": y_gap, "strategy_gap": t_gap, "utility_gap": v_gap}
