"""Exponential utility maximisation with a liability, and its dual measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import (BsdeSolution, TruncationProfile, boundary, entropic_generator, indifference_generator,
                   solve_bsde)
from .claims import terminal_values
from .measures import (MeasureChange, exponential_tilt_from_U, identity_change, minimal_martingale_measure)
from .oracles import entropic_recursion

MODES = ("euler", "dt-consistent")


@dataclass(eq=False)
class UtilityResult:
    model: object
    alpha: float
    x: float
    mode: str
    B: np.ndarray
    Y: list
    Z: list
    U: list
    theta: list
    dual: MeasureChange
    reference: MeasureChange
    profile: TruncationProfile
    bsde: BsdeSolution | None = None

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    def value(self, k: int, x=None) -> np.ndarray:
        return value_function(self.x if x is None else x, self.Y[k], self.alpha)


def value_function(x, Y, alpha):
    """``-exp(-alpha x) exp(alpha Y)``."""
    return -np.exp(alpha * (np.asarray(Y, dtype=float) - np.asarray(x, dtype=float)))


def utility_profile(model, B, alpha, market_price=True) -> TruncationProfile:
    """``K1 = |phi|^2_inf/(2 alpha)``, ``K2 = 0``, ``K3 = |B|_inf + T K1``."""
    K1 = model.phi_bound**2 / (2 * alpha) if market_price else 0.0
    return TruncationProfile(K1, 0.0, float(np.abs(B).max()) + model.grid.horizon * K1)


def jump_log_mean(model, factors, base: MeasureChange) -> list:
    """``log(Q(jump j) / base(jump j))`` per node and mark, for ``Q = base * factors``."""
    out = []
    ind = model.jump_indicator
    for k, f in enumerate(factors):
        pb = base.probs(k)
        num = (pb * f) @ ind
        den = pb @ ind
        with np.errstate(divide="ignore", invalid="ignore"):
            out.append(np.where(den > 0, np.log(np.where(den > 0, num / np.where(den > 0, den, 1), 1)), 0.0))
    return out


def solve_utility(model, B, alpha, x=0.0, mode="euler", measure: MeasureChange | None = None,
                  market_price=True, truncated=False, under="P_hat", tol=1e-12, max_iter=200) -> UtilityResult:
    """Certainty equivalent ``Y^B``, optimal integrand and dual measure.

    ``measure`` replaces P as the reference measure (with ``market_price``
    False the driver ``W_hat`` is taken to be driftless under it, which is
    how the exponential problem under ``Q^E`` is posed).  Euler mode solves
    the entropic BSDE on the drift-removed lattice; dt-consistent mode runs
    the exact entropic recursion instead.
    """
    if alpha <= 0:
        raise ValueError("risk aversion must be positive")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    Bv = terminal_values(model, B)
    ref = measure if measure is not None else identity_change(model)
    profile = utility_profile(model, Bv, alpha, market_price)
    if mode == "dt-consistent":
        rec = entropic_recursion(model, Bv, alpha, measure=ref)
        dual = MeasureChange(model, tuple(a * b for a, b in zip(ref.factors, rec.factors)), "Q_E_B")
        drift = [model.slices[k].phi / alpha if market_price else 0.0 for k in range(model.N)]
        Z = [th - dr for th, dr in zip(rec.theta, drift)]
        U = [u / alpha for u in jump_log_mean(model, rec.factors, ref)]
        return UtilityResult(model, alpha, x, mode, Bv, rec.Y, Z, U, rec.theta, dual, ref, profile)

    if market_price:
        if measure is not None:
            raise ValueError("a custom reference measure requires market_price=False")
        if under == "P_hat":
            base = minimal_martingale_measure(model)
            sol = solve_bsde(model, entropic_generator(alpha, "P_hat", model.phi_bound), Bv, measure=base,
                             driver="W_hat", tol=tol, max_iter=max_iter, profile=profile if truncated else None)
        elif under == "P":
            base = minimal_martingale_measure(model)
            sol = solve_bsde(model, entropic_generator(alpha, "P"), Bv, measure=identity_change(model),
                             driver="W", tol=tol, max_iter=max_iter)
        else:
            raise ValueError(f"unknown measure {under!r}")
        theta = [z + model.slices[k].phi / alpha for k, z in enumerate(sol.Z)]
        dual = exponential_tilt_from_U(model, sol.U, alpha, base)
    else:
        base = ref
        sol = solve_bsde(model, indifference_generator(alpha), Bv, measure=ref, driver="W_hat", tol=tol,
                         max_iter=max_iter, profile=profile if truncated else None)
        theta = list(sol.Z)
        dual = exponential_tilt_from_U(model, sol.U, alpha, base)
    return UtilityResult(model, alpha, x, mode, Bv, sol.Y, sol.Z, sol.U, theta, dual, ref, profile, sol)


def bound_excess(result: UtilityResult) -> dict:
    """``max |Y| - b(t)`` and ``max |U| - 2 b(t)`` over nodes."""
    model = result.model
    T = model.grid.horizon
    y_ex = max(float(np.abs(y).max() - boundary(model.grid.time(k), result.profile, T))
               for k, y in enumerate(result.Y))
    u_ex = max((float(np.abs(u).max() - 2 * boundary(model.grid.time(k), result.profile, T))
                for k, u in enumerate(result.U) if u.size), default=-np.inf)
    return {"Y": y_ex, "U": u_ex}


def wealth_process(model, theta) -> list:
    """Cumulative gains ``sum theta . dW_hat`` per node of a tree."""
    model.require_tree()
    G = [np.zeros(1)]
    for k in range(model.N):
        th = np.broadcast_to(np.asarray(theta[k], dtype=float), (model.slices[k].size, model.d))
        inc = np.einsum("nbd,nd->nb", model.dW_hat(k), th)
        G.append((G[-1][:, None] + inc).ravel())
    return G


def _relative_drift(result, theta):
    """``1 - E^P[exp(alpha (Y' - theta . dW_hat - Y))]`` per node and slice."""
    model = result.model
    alpha = result.alpha
    ref = result.reference
    out = []
    for k in range(model.N):
        th = np.broadcast_to(np.asarray(theta[k], dtype=float), (model.slices[k].size, model.d))
        nxt = model.next_values(k, result.Y[k + 1])
        e = np.exp(alpha * (nxt - np.einsum("nbd,nd->nb", model.dW_hat(k), th) - result.Y[k][:, None]))
        out.append(1.0 - np.einsum("nb,nb->n", ref.probs(k), e))
    return out


def verify_martingale_optimality(result: UtilityResult, candidates=()) -> dict:
    """Node-wise drift of ``R = -exp(-alpha (x + gains - Y))`` relative to ``|R|``.

    Nonpositive drift is the supermartingale property; the optimal strategy
    must give zero drift.  ``candidates`` are strategy fields or scalars added
    to the optimal strategy.
    """
    opt = _relative_drift(result, result.theta)
    report = {"optimal_max_abs": max(float(np.abs(d).max()) for d in opt), "candidates": []}
    for c in candidates:
        if np.isscalar(c):
            th = [t + c for t in result.theta]
        else:
            th = c
        dr = _relative_drift(result, th)
        report["candidates"].append({"max_drift": max(float(d.max()) for d in dr),
                                     "min_drift": min(float(d.min()) for d in dr)})
    return report


def l_process_identity(result: UtilityResult) -> float:
    """Largest node residual of the drift of ``L = exp(alpha Y)`` under P.

    The continuous drift ``|L phi + alpha L Z|^2 / (2 L) dt`` is discretised
    in exponential-Euler form ``L (exp(|phi + alpha Z|^2 dt / 2) - 1)``, which
    is exact when ``Z`` and ``U`` vanish along the solution.  The jump terms
    cancel between the driver and the Ito correction.
    """
    model = result.model
    alpha = result.alpha
    P = identity_change(model)
    worst = 0.0
    for k in range(model.N):
        L = np.exp(alpha * result.Y[k])
        EL = P.expect_next(k, np.exp(alpha * result.Y[k + 1]))
        phi = model.slices[k].phi
        drift = L * np.expm1(((phi + alpha * result.Z[k]) ** 2).sum(axis=1) * model.dt / 2)
        worst = max(worst, float(np.abs(EL - L - drift).max()))
    return worst
