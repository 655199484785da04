"""Independent brute-force solvers for the exponential utility problem.

None of these routines touch the BSDE code: the primal is solved by backward
induction over strategies, the entropic recursion by vectorised Newton on
the log-sum-exp certainty equivalent, and the dual by a node-wise exhaustive
grid over jump tilts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .claims import terminal_values
from .errors import BudgetError, NumericalError
from .measures import MeasureChange, identity_change, jump_tilt, minimal_martingale_measure


@dataclass(eq=False)
class RecursionResult:
    Y: list
    theta: list
    factors: list  # per-branch density factors relative to the solving measure
    iterations: int


def _lse_parts(a, p):
    """log E_p[exp(a)] row-wise, with the tilted weights."""
    top = a.max(axis=1, keepdims=True)
    w = p * np.exp(a - top)
    s = w.sum(axis=1)
    return np.log(s) + top[:, 0], w / s[:, None]


def entropic_recursion(model, B, alpha, measure: MeasureChange | None = None, tol=1e-13, max_iter=100,
                       stop_index=None) -> RecursionResult:
    """``Y = min_theta (1/alpha) log E[exp(alpha (Y' - theta . dW_hat))]`` slice by slice.

    Newton on the strictly convex log-sum-exp objective with backtracking,
    started from ``phi / alpha``.
    """
    measure = measure or identity_change(model)
    K = model.N if stop_index is None else stop_index
    if K == model.N:
        Bv = terminal_values(model, B)
    else:
        Bv = np.broadcast_to(np.asarray(B, dtype=float), (model.slices[K].size,)).astype(float)
    Y = [None] * (K + 1)
    theta = [None] * K
    factors = [None] * K
    Y[K] = Bv
    worst_it = 0
    for k in range(K - 1, -1, -1):
        nxt = model.next_values(k, Y[k + 1])
        p = measure.probs(k)
        X = model.dW_hat(k)
        th = model.slices[k].phi / alpha
        a = alpha * (nxt - np.einsum("nbd,nd->nb", X, th))
        val, w = _lse_parts(a, p)
        for it in range(1, max_iter + 1):
            mx = np.einsum("nb,nbd->nd", w, X)
            Xc = X - mx[:, None, :]
            cov = np.einsum("nb,nbd,nbe->nde", w, Xc, Xc)
            if np.abs(mx).max() <= tol:
                break
            step = np.linalg.solve(cov, mx[..., None])[..., 0] / alpha
            t = np.ones(val.shape[0])
            new_th = th + step
            for _ in range(60):
                a_new = alpha * (nxt - np.einsum("nbd,nd->nb", X, new_th))
                v_new, w_new = _lse_parts(a_new, p)
                bad = v_new > val + 1e-12 * (1.0 + np.abs(val))
                if not bad.any():
                    break
                t = np.where(bad, t / 2, t)
                new_th = th + t[:, None] * step
            moved = np.abs(new_th - th).max()
            th, val, w = new_th, v_new, w_new
            if moved <= 4e-16 * (1.0 + np.abs(th).max()):
                break
        else:
            i = int(np.argmax(np.abs(np.einsum("nb,nbd->nd", w, X)).max(axis=1)))
            raise NumericalError(f"entropic recursion: Newton did not converge at node {model.node_label(k, i)}",
                                 node=model.node_label(k, i))
        worst_it = max(worst_it, it)
        Y[k] = val / alpha
        theta[k] = th
        a = alpha * (nxt - np.einsum("nbd,nd->nb", X, th))
        factors[k] = np.exp(a - val[:, None])
    return RecursionResult(Y, theta, factors, worst_it)


def _node_primal(alpha, nxt, p, X, theta0, tol):
    """Maximise ``-E[exp(-alpha (theta . X - Y'))]`` over theta at one node."""
    d = X.shape[1]

    def cost(th):
        return float(p @ np.exp(alpha * (nxt - X @ th)))

    th = theta0.copy()
    c = cost(th)
    stalled = False
    for _ in range(200):
        e = p * np.exp(alpha * (nxt - X @ th))
        g = -alpha * (e @ X)
        if np.abs(g).max() <= tol * max(1.0, c):
            break
        H = alpha**2 * (X.T * e) @ X
        step = -np.linalg.solve(H, g)
        if np.abs(step).max() < 1e-16:
            break
        # rounding-level increases are accepted: near the optimum the cost is flat to machine precision
        s = 1.0
        while s > 1e-12:
            c_new = cost(th + s * step)
            if c_new <= c * (1 + 1e-14):
                break
            s /= 2
        else:
            stalled = True
            break
        th, c = th + s * step, c_new
    else:
        stalled = True
    if stalled and d == 1:
        r = minimize_scalar(lambda v: cost(np.array([v])), bracket=(th[0] - 1, th[0] + 1), method="golden",
                            tol=1e-12)
        th = np.array([r.x])
        c = cost(th)
    return th, c, stalled


@dataclass(eq=False)
class PrimalResult:
    value: float
    Y: list
    theta: list
    stalls: int


def brute_force_primal(model, B, alpha, x=0.0, tol=1e-13) -> PrimalResult:
    """Backward induction over strategies, one node at a time.

    Wealth translation invariance gives ``V_k(x) = -exp(-alpha x) exp(alpha Y_k)``,
    so only the certainty equivalent ``Y_k`` is propagated.
    """
    Bv = terminal_values(model, B)
    N = model.N
    Y = [None] * (N + 1)
    theta = [None] * N
    Y[N] = Bv
    stalls = 0
    for k in range(N - 1, -1, -1):
        sl = model.slices[k]
        X_all = model.dW_hat(k)
        nxt_all = model.next_values(k, Y[k + 1])
        yk = np.empty(sl.size)
        tk = np.empty((sl.size, model.d))
        for i in range(sl.size):
            th, c, stalled = _node_primal(alpha, nxt_all[i], sl.prob[i], X_all[i], sl.phi[i] / alpha, tol)
            stalls += stalled
            yk[i] = math.log(c) / alpha
            tk[i] = th
        Y[k] = yk
        theta[k] = tk
    value = -math.exp(-alpha * x) * math.exp(alpha * Y[0][0])
    return PrimalResult(value, Y, theta, stalls)


def strategy_utility(model, B, alpha, theta, x=0.0) -> float:
    """``E^P[-exp(-alpha (x + sum theta . dW_hat - B))]`` by leaf enumeration (trees)."""
    model.require_tree()
    Bv = terminal_values(model, B)
    gains = np.zeros(1)
    for k in range(model.N):
        inc = np.einsum("nbd,nd->nb", model.dW_hat(k), np.asarray(theta[k]).reshape(-1, model.d))
        gains = (gains[:, None] + inc).ravel()
    mass = identity_change(model).node_mass()[-1]
    return float(mass @ -np.exp(-alpha * (x + gains - Bv)))


@dataclass(eq=False)
class DualGridResult:
    change: MeasureChange
    objective: float
    tilts: list
    grid: np.ndarray


def dual_grid(ratio=1.02, span=4.0, extra_points=()):
    n = int(math.ceil(span / math.log(ratio)))
    pts = np.exp(np.arange(-n, n + 1) * math.log(ratio))
    if len(extra_points):
        pts = np.union1d(pts, np.asarray(extra_points, dtype=float).ravel())
    return np.sort(pts)


def brute_force_dual(model, B, alpha, ratio=1.02, span=4.0, extra_points=(), budget=5e7) -> DualGridResult:
    """Maximise ``alpha E^Q[B] - H(Q|P)`` over a grid of martingale measures.

    Candidates keep the drift-removing Brownian tilt and choose, at every
    node, one jump tilt per mark from a geometric grid.  The objective is
    additive over steps, so node-wise backward maximisation visits the full
    product grid exactly.  Ties resolve to the lowest grid index.  ``budget``
    caps the number of (node, pattern, candidate) evaluations per slice.
    """
    Bv = terminal_values(model, B)
    grid = dual_grid(ratio, span, extra_points)
    G = grid.size
    m = model.m
    widest = max(sl.size for sl in model.slices[:-1]) * model.n_diff * G**m
    if widest > budget:
        raise BudgetError(f"dual grid search needs {widest:.3g} evaluations per slice; budget is {budget:.3g}")
    base = minimal_martingale_measure(model)
    m1 = m + 1
    cand = np.stack(np.meshgrid(*([grid] * m), indexing="ij"), axis=-1).reshape(-1, m) if m else np.ones((1, 0))
    V = alpha * Bv
    tilts = [None] * model.N
    for k in range(model.N - 1, -1, -1):
        sl = model.slices[k]
        n = sl.size
        nxt = model.next_values(k, V)
        if m == 0:
            f = base.factors[k]
            V = np.einsum("nb,nb->n", sl.prob * f, nxt - np.log(f))
            tilts[k] = np.ones((n, 0))
            continue
        p = sl.prob.reshape(n, -1, m1)
        fb = base.factors[k].reshape(n, -1, m1)
        pb = p * fb
        tot = pb.sum(axis=2)
        q = pb / tot[:, :, None]  # (n, s, m+1) conditional branch probabilities under P_hat
        nv = nxt.reshape(n, -1, m1)
        qj = q[:, :, None, 1:] * cand[None, None]  # (n, s, c, m)
        q0 = 1 - qj.sum(axis=3)
        ok = q0 > 0
        nj_fac = np.where(ok, q0 / q[:, :, None, 0], 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            jump = (qj * (nv[:, :, None, 1:] - np.log(fb[:, :, None, 1:] * cand[None, None]))).sum(axis=3)
            val = jump + q0 * (nv[:, :, None, 0] - np.log(fb[:, :, None, 0] * nj_fac))
        val = (tot[:, :, None] * val).sum(axis=1)
        val = np.where(ok.all(axis=1), val, -np.inf)
        best = np.argmax(val, axis=1)
        V = val[np.arange(n), best]
        tilts[k] = cand[best]
    change = jump_tilt(model, tilts, base, "dual grid argmax") if m else base
    return DualGridResult(change, float(V[0]), tilts, grid)
