"""Backward solver for BSDEs with jumps on the scenario lattice.

At a node with successor values ``Y'`` the integrands are read off from the
one-step distribution under the solving measure: ``Z`` is the regression
coefficient of ``Y'`` on the driver increment, ``U_j`` is the mean of ``Y'``
on the mark-``j`` jump branches minus the mean on the no-jump branches.
``Y`` then solves ``y = E[Y'] + f(t, y, Z, U) dt``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .claims import terminal_values
from .errors import LatticeError, NumericalError
from .measures import MeasureChange, identity_change

OVERFLOW_GUARD = 700.0


@dataclass(frozen=True, eq=False)
class StepContext:
    model: object
    k: int
    t: float
    dt: float
    phi: np.ndarray  # (n, d)
    zeta: np.ndarray  # (n, m) intensity under the solving measure
    lam: np.ndarray  # (m,)

    def label(self, i):
        return self.model.node_label(self.k, i)


def entropic_jump_integrand(alpha, u, ctx: StepContext | None = None):
    """``(exp(alpha u) - 1)/alpha - u``, guarded against overflow."""
    if alpha <= 0:
        raise ValueError("risk aversion must be positive")
    u = np.asarray(u, dtype=float)
    au = alpha * u
    if np.any(np.abs(au) > OVERFLOW_GUARD):
        where = None
        if ctx is not None and au.ndim == 2:
            where = ctx.label(int(np.flatnonzero(np.any(np.abs(au) > OVERFLOW_GUARD, axis=1))[0]))
        raise NumericalError(f"overflow guard: |alpha u| > {OVERFLOW_GUARD:g}" + (f" at node {where}" if where else ""),
                             node=where)
    return np.expm1(au) / alpha - u


@dataclass(frozen=True, eq=False)
class Generator:
    """Driver ``f = fhat(t, y, z, u) + sum_j g(u_j) zeta_j lambda_j``.

    ``growth`` holds ``(K1, K2)`` with ``|fhat| <= K1 + K2 |y|``; it is
    required for truncation.  ``y_free`` generators need no fixed point.
    """

    kind: str
    fhat: Callable | None = None
    jump: Callable | None = None
    lipschitz: float | None = None
    growth: tuple | None = None
    alpha: float | None = None
    y_free: bool = True
    params: dict = field(default_factory=dict)

    def __call__(self, ctx, y, z, u):
        out = np.zeros(np.shape(y))
        if self.fhat is not None:
            out = out + self.fhat(ctx, y, z, u)
        if self.jump is not None and ctx.lam.size:
            out = out + (self.jump(ctx, u) * ctx.zeta * ctx.lam).sum(axis=1)
        return out


def zero_generator() -> Generator:
    return Generator("zero", lipschitz=0.0, growth=(0.0, 0.0))


def affine_generator(a=0.0, b=0.0, c=None) -> Generator:
    """``f = a + b y + c . z``; Lipschitz with constant ``|b| + |c|``."""
    c_arr = None if c is None else np.asarray(c, dtype=float)

    def fhat(ctx, y, z, u):
        out = a + b * y
        if c_arr is not None:
            out = out + z @ np.broadcast_to(c_arr, z.shape[1:])
        return out

    lip = abs(b) + (0.0 if c_arr is None else float(np.linalg.norm(c_arr)))
    growth = (abs(a), abs(b)) if c_arr is None else None
    return Generator("lipschitz-affine", fhat=fhat, lipschitz=lip, growth=growth, y_free=(b == 0),
                     params={"a": a, "b": b, "c": c})


def entropic_generator(alpha, under="P_hat", phi_bound=None) -> Generator:
    """Exponential-utility driver.

    ``under="P_hat"``: ``-|phi|^2/(2 alpha) + sum g(U) zeta lambda`` (driver W_hat).
    ``under="P"``: additionally ``-Z . phi`` (driver W).
    """
    if alpha <= 0:
        raise ValueError("risk aversion must be positive")
    if under not in ("P_hat", "P"):
        raise ValueError(f"unknown measure {under!r}")

    def fhat(ctx, y, z, u):
        out = -(ctx.phi**2).sum(axis=1) / (2 * alpha)
        if under == "P":
            out = out - (z * ctx.phi).sum(axis=1)
        return out

    def jump(ctx, u):
        return entropic_jump_integrand(alpha, u, ctx)

    growth = None
    if under == "P_hat" and phi_bound is not None:
        growth = (phi_bound**2 / (2 * alpha), 0.0)
    return Generator("entropic", fhat=fhat, jump=jump, growth=growth, alpha=alpha,
                     params={"under": under})


def indifference_generator(alpha) -> Generator:
    """Pure jump driver ``sum g(U) zeta^E lambda``; run under Q^E."""
    if alpha <= 0:
        raise ValueError("risk aversion must be positive")
    return Generator("indifference", jump=lambda ctx, u: entropic_jump_integrand(alpha, u, ctx),
                     growth=(0.0, 0.0), alpha=alpha)


def custom_generator(fn, lipschitz=None, growth=None, y_free=False) -> Generator:
    return Generator("custom", fhat=fn, lipschitz=lipschitz, growth=growth, y_free=y_free)


@dataclass(frozen=True)
class TruncationProfile:
    K1: float
    K2: float
    K3: float

    def __post_init__(self):
        if min(self.K1, self.K2, self.K3) < 0:
            raise ValueError("truncation constants must be nonnegative")


def boundary(t, profile: TruncationProfile, T):
    tau = T - np.asarray(t, dtype=float)
    if profile.K2 == 0:
        return profile.K3 + profile.K1 * tau
    grow = np.exp(profile.K2 * tau)
    return profile.K3 * grow + profile.K1 / profile.K2 * np.expm1(profile.K2 * tau)


def truncate(t, y, profile: TruncationProfile, T):
    b = boundary(t, profile, T)
    return np.clip(y, -b, b)


def truncate_generator(gen: Generator, profile: TruncationProfile, T) -> Generator:
    """Driver evaluated at clamped arguments, globally Lipschitz on the lattice."""
    if gen.growth is None:
        raise ValueError(f"generator {gen.kind!r} has no growth constants (K1, K2); cannot truncate")
    if gen.kind == "zero":
        return gen

    def fn(ctx, y, z, u):
        b = boundary(ctx.t, profile, T)
        ky = np.clip(y, -b, b)
        du = np.clip(y[:, None] + u, -b, b) - ky[:, None]
        out = np.zeros(np.shape(y))
        if gen.fhat is not None:
            out = out + gen.fhat(ctx, ky, z, du)
        if gen.jump is not None and ctx.lam.size:
            out = out + (gen.jump(ctx, du) * ctx.zeta * ctx.lam).sum(axis=1)
        return out

    return Generator(f"truncated {gen.kind}", fhat=fn, lipschitz=None, growth=gen.growth, alpha=gen.alpha,
                     y_free=False, params={"profile": profile, "horizon": T, "base": gen})


@dataclass(eq=False)
class BsdeSolution:
    model: object
    Y: list  # per slice (n_k,)
    Z: list  # per non-terminal slice (n_k, d)
    U: list  # per non-terminal slice (n_k, m)
    residual: list
    iterations: list
    generator: Generator
    measure: MeasureChange
    driver: str
    terminal: np.ndarray
    profile: TruncationProfile | None = None

    @property
    def y0(self) -> float:
        return float(self.Y[0][0])

    @property
    def max_residual(self) -> float:
        return max((float(np.abs(r).max()) for r in self.residual), default=0.0)

    def rows(self):
        m = self.model
        for k in range(len(self.Y)):
            for i in range(self.Y[k].shape[0]):
                z = self.Z[k][i] if k < len(self.Z) else np.full(m.d, np.nan)
                u = self.U[k][i] if k < len(self.U) else np.full(m.m, np.nan)
                yield [f"{k}:{i}", m.grid.time(k), self.Y[k][i], *z, *u]

    def header(self):
        return (["node", "t", "Y"] + [f"Z{i + 1}" for i in range(self.model.d)]
                + [f"U{j + 1}" for j in range(self.model.m)])

    def to_csv(self, path):
        write_rows(path, self.header(), self.rows())


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else format(float(v), ".17g") for v in row])


def driver_increments(model, k, driver):
    if driver == "W":
        return np.broadcast_to(model.dW_branch(), (model.slices[k].size,) + model.dW_branch().shape)
    if driver == "W_hat":
        return model.dW_hat(k)
    raise ValueError(f"unknown driver {driver!r}")


def extract_integrands(model, k, nxt, probs, driver):
    """Return ``(E[Y'], Z, U)`` for successor values ``nxt`` of shape (n, B)."""
    n = nxt.shape[0]
    mean = np.einsum("nb,nb->n", probs, nxt)
    X = driver_increments(model, k, driver)
    Xm = np.einsum("nb,nbd->nd", probs, X)
    Xc = X - Xm[:, None, :]
    cov = np.einsum("nb,nbd,nbe->nde", probs, Xc, Xc)
    cxy = np.einsum("nb,nbd,nb->nd", probs, Xc, nxt - mean[:, None])
    Z = np.linalg.solve(cov, cxy[..., None])[..., 0]
    m1 = model.m + 1
    pr = probs.reshape(n, -1, m1)
    mass = pr.sum(axis=1)
    cond = (pr * nxt.reshape(n, -1, m1)).sum(axis=1) / mass
    U = cond[:, 1:] - cond[:, :1]
    return mean, Z, U


def _solve_node_equation(gen, ctx, mean, Z, U, mode, tol, max_iter, y_init):
    dt = ctx.dt
    if mode == "explicit":
        y = mean + gen(ctx, mean, Z, U) * dt
        return y, 1
    if gen.y_free:
        return mean + gen(ctx, mean, Z, U) * dt, 1
    y = y_init.copy()
    prev = y
    for it in range(1, max_iter + 1):
        prev, y = y, mean + gen(ctx, y, Z, U) * dt
        if not np.all(np.isfinite(y)):
            i = int(np.flatnonzero(~np.isfinite(y))[0])
            raise NumericalError(f"non-finite Picard iterate at node {ctx.label(i)}", node=ctx.label(i))
        if np.abs(y - prev).max() <= tol:
            return y, it
    i = int(np.argmax(np.abs(y - prev)))
    raise NumericalError(f"Picard iteration did not converge in {max_iter} steps at node {ctx.label(i)}: "
                         f"last iterates {prev[i]!r}, {y[i]!r}", node=ctx.label(i), detail=(prev[i], y[i]))


def solve_bsde(model, generator: Generator, terminal, measure: MeasureChange | None = None, driver=None,
               mode="implicit", tol=1e-12, max_iter=200, profile: TruncationProfile | None = None,
               init="zero", stop_index=None) -> BsdeSolution:
    """Backward sweep over the lattice.

    ``measure`` is the solving measure (P when omitted) and ``driver`` the
    Brownian driver the ``Z`` integrand refers to: ``"W"`` under P,
    ``"W_hat"`` (the default otherwise) under drift-removing measures.
    With ``profile`` the truncated driver is used and ``|Y| <= b(t)`` is
    asserted at every node.  ``stop_index`` solves on slices ``0..K`` with
    ``terminal`` given on slice ``K``.
    """
    if mode not in ("implicit", "explicit"):
        raise ValueError(f"unknown mode {mode!r}")
    if init not in ("zero", "conditional"):
        raise ValueError(f"unknown init {init!r}")
    measure = measure if measure is not None else identity_change(model)
    if measure.model is not model:
        raise LatticeError("measure was built on a different lattice")
    driver = driver or ("W" if measure.label == "P" else "W_hat")
    K = model.N if stop_index is None else int(stop_index)
    if not 0 <= K <= model.N:
        raise ValueError(f"stop_index {K} outside 0..{model.N}")
    if K == model.N:
        B = terminal_values(model, terminal)
    else:
        B = np.broadcast_to(np.asarray(terminal, dtype=float), (model.slices[K].size,)).astype(float)
    if not np.all(np.isfinite(B)):
        raise ValueError("terminal values must be finite")
    T = model.grid.time(K)
    gen = generator
    if profile is not None:
        if np.abs(B).max() > profile.K3 + tol:
            raise ValueError(f"terminal bound |B| = {np.abs(B).max():.6g} exceeds K3 = {profile.K3:.6g}")
        gen = truncate_generator(generator, profile, T)
    if gen.lipschitz is not None and gen.lipschitz * model.dt >= 1 and mode == "implicit" and not gen.y_free:
        raise NumericalError(f"K_f dt = {gen.lipschitz * model.dt:.3g} >= 1: Picard map is not a contraction")

    cond_B = None
    if init == "conditional" and not gen.y_free:
        cond_B = [None] * (K + 1)
        cond_B[K] = B
        for k in range(K - 1, -1, -1):
            cond_B[k] = measure.expect_next(k, cond_B[k + 1])

    Y = [None] * (K + 1)
    Z = [None] * K
    U = [None] * K
    res = [None] * K
    iters = [0] * K
    Y[K] = B.copy()
    use_slice_zeta = measure.label == "P"
    for k in range(K - 1, -1, -1):
        sl = model.slices[k]
        nxt = model.next_values(k, Y[k + 1])
        probs = measure.probs(k)
        mean, Zk, Uk = extract_integrands(model, k, nxt, probs, driver)
        zeta = sl.zeta if use_slice_zeta else measure.compensator(k)
        ctx = StepContext(model, k, model.grid.time(k), model.dt, sl.phi, zeta, model.lam)
        y_init = np.zeros_like(mean) if cond_B is None else cond_B[k]
        y, it = _solve_node_equation(gen, ctx, mean, Zk, Uk, mode, tol, max_iter, y_init)
        Y[k], Z[k], U[k], iters[k] = y, Zk, Uk, it
        res[k] = y - mean - gen(ctx, y, Zk, Uk) * model.dt
        if profile is not None:
            b = boundary(ctx.t, profile, T)
            over = np.abs(y) - b
            if over.max() > tol:
                i = int(np.argmax(over))
                raise NumericalError(f"truncation bound violated at node {ctx.label(i)}: |Y| = {abs(y[i]):.12g} "
                                     f"> b(t) = {b:.12g}", node=ctx.label(i))
    return BsdeSolution(model, Y, Z, U, res, iters, generator, measure, driver, B, profile)


def representation_residual(sol: BsdeSolution) -> float:
    """Largest ``|Y' - E[Y'] - Z dX - sum U_j (1_j - q_j)|`` over nodes and branches."""
    model = sol.model
    worst = 0.0
    ind = model.jump_indicator
    for k in range(len(sol.Z)):
        nxt = model.next_values(k, sol.Y[k + 1])
        p = sol.measure.probs(k)
        X = driver_increments(model, k, sol.driver)
        Xc = X - np.einsum("nb,nbd->nd", p, X)[:, None, :]
        q = p @ ind
        fit = (np.einsum("nd,nbd->nb", sol.Z[k], Xc)
               + np.einsum("nj,nbj->nb", sol.U[k], ind[None, :, :] - q[:, None, :]))
        mean = np.einsum("nb,nb->n", p, nxt)
        worst = max(worst, float(np.abs(nxt - mean[:, None] - fit).max()))
    return worst


def generator_values(sol: BsdeSolution, gen: Generator | None = None) -> list:
    """``f(t, Y, Z, U)`` per non-terminal slice, with ``gen`` defaulting to the solve's driver."""
    gen = gen or sol.generator
    if sol.profile is not None and gen is sol.generator:
        gen = truncate_generator(gen, sol.profile, sol.model.grid.time(len(sol.Z)))
    out = []
    model = sol.model
    for k in range(len(sol.Z)):
        sl = model.slices[k]
        zeta = sl.zeta if sol.measure.label == "P" else sol.measure.compensator(k)
        ctx = StepContext(model, k, model.grid.time(k), model.dt, sl.phi, zeta, model.lam)
        out.append(gen(ctx, sol.Y[k], sol.Z[k], sol.U[k]))
    return out


@dataclass(eq=False)
class StabilityReport:
    lhs: list
    rhs: list
    ratio: list

    @property
    def max_ratio(self) -> float:
        vals = [r[np.isfinite(r)] for r in self.ratio]
        return max((float(v.max()) for v in vals if v.size), default=0.0)

    @property
    def root_ratio(self) -> float:
        return float(self.ratio[0][0])


def stability_gap(sol: BsdeSolution, sol2: BsdeSolution) -> StabilityReport:
    """Conditional gap norms of two solutions on a tree, node by node.

    ``lhs = E_k[sup_{u>=k} dY_u^2 + sum dZ^2 dt + sum dU^2 zeta lambda dt]`` and
    ``rhs = E_k[dB^2 + sum df^2 dt]`` with ``df`` the difference of the two
    drivers along the first solution; expectations under the first
    solution's measure.
    """
    model = sol.model
    if sol2.model is not model or len(sol.Y) != len(sol2.Y):
        raise LatticeError("solutions live on different lattices")
    model.require_tree()
    N = len(sol.Z)
    dt = model.dt
    f1 = generator_values(sol)
    f2 = generator_values(sol, sol2.generator if sol2.profile is None
                          else truncate_generator(sol2.generator, sol2.profile, model.grid.time(N)))
    n_leaf = model.slices[N].size
    anc = [np.arange(n_leaf) // (model.n_branch ** (N - k)) for k in range(N + 1)]
    dY2 = np.stack([(sol.Y[k] - sol2.Y[k])[anc[k]] ** 2 for k in range(N + 1)])  # (N+1, leaves)
    step = np.zeros((N + 1, n_leaf))
    drv = np.zeros((N + 1, n_leaf))
    for k in range(N):
        zeta = model.slices[k].zeta if sol.measure.label == "P" else sol.measure.compensator(k)
        dz = ((sol.Z[k] - sol2.Z[k]) ** 2).sum(axis=1) * dt
        du = ((sol.U[k] - sol2.U[k]) ** 2 * zeta * model.lam * dt).sum(axis=1)
        step[k] = (dz + du)[anc[k]]
        drv[k] = ((f1[k] - f2[k]) ** 2 * dt)[anc[k]]
    sup_tail = np.maximum.accumulate(dY2[::-1], axis=0)[::-1]
    sum_tail = np.cumsum(step[::-1], axis=0)[::-1]
    drv_tail = np.cumsum(drv[::-1], axis=0)[::-1]
    dB2 = (sol.terminal - sol2.terminal) ** 2
    leaf_mass = sol.measure.node_mass()
    lhs, rhs, ratio = [], [], []
    for k in range(N + 1):
        w = leaf_mass[N]
        node_w = np.bincount(anc[k], weights=w, minlength=model.slices[k].size)
        L = np.bincount(anc[k], weights=w * (sup_tail[k] + sum_tail[k]), minlength=model.slices[k].size) / node_w
        R = np.bincount(anc[k], weights=w * (dB2 + drv_tail[k]), minlength=model.slices[k].size) / node_w
        lhs.append(L)
        rhs.append(R)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio.append(np.where(R > 0, L / np.where(R > 0, R, 1.0), np.where(L > 0, np.inf, 0.0)))
    return StabilityReport(lhs, rhs, ratio)
