"""Equivalent measure changes on the lattice.

A change is stored as one multiplicative factor per branch of every
non-terminal node, relative to P.  The factors of a node have P-conditional
mean one, so the new branch probabilities are ``prob * factor``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .claims import terminal_values
from .errors import LatticeError, NumericalError


@dataclass(frozen=True, eq=False)
class MeasureChange:
    model: object
    factors: tuple  # per non-terminal slice, (n_k, B)
    label: str = "custom"

    def probs(self, k: int) -> np.ndarray:
        return self.model.slices[k].prob * self.factors[k]

    def expect_next(self, k: int, values_next: np.ndarray) -> np.ndarray:
        """Conditional expectation at slice ``k`` of a field on slice ``k + 1``."""
        nxt = self.model.next_values(k, values_next)
        p = self.probs(k)
        if nxt.ndim == 2:
            return np.einsum("nb,nb->n", p, nxt)
        return np.einsum("nb,nb...->n...", p, nxt)

    def jump_marginal(self, k: int) -> np.ndarray:
        """``(n, m)`` probability of a mark-``j`` jump over step ``k``."""
        return self.probs(k) @ self.model.jump_indicator

    def diffusion_marginal(self, k: int) -> np.ndarray:
        p = self.probs(k)
        m1 = self.model.m + 1
        return p.reshape(p.shape[0], -1, m1).sum(axis=2)

    def compensator(self, k: int) -> np.ndarray:
        """Intensity density ``zeta'`` with ``zeta' * lambda * dt`` equal to the jump mass."""
        lam = self.model.lam
        out = np.zeros((self.model.slices[k].size, self.model.m))
        pos = lam > 0
        out[:, pos] = self.jump_marginal(k)[:, pos] / (lam[pos] * self.model.dt)
        return out

    def node_mass(self) -> list:
        """Probability of reaching each node, per slice (works on recombining lattices)."""
        model = self.model
        mass = [np.ones(1)]
        for k in range(model.N):
            nxt = np.zeros(model.slices[k + 1].size)
            np.add.at(nxt, model.slices[k].children.ravel(), (mass[-1][:, None] * self.probs(k)).ravel())
            mass.append(nxt)
        return mass

    def cumulative_density(self, k: int | None = None):
        """Density process ``dQ/dP`` at slice ``k`` (all slices if ``k`` is None).

        On a tree this is the product of factors along the path.  On a
        recombining lattice nodes merge histories, and the value returned is
        the ratio of node masses, i.e. the conditional P-expectation of the
        path density given the node.
        """
        model = self.model
        if model.is_tree:
            dens = [np.ones(1)]
            for j in range(model.N):
                dens.append((dens[-1][:, None] * self.factors[j]).ravel())
        else:
            q = self.node_mass()
            p = identity_change(model).node_mass()
            dens = [a / b for a, b in zip(q, p)]
        return dens if k is None else dens[k]

    def expectation(self, leaf_values) -> float:
        mass = self.node_mass()[-1]
        return float(mass @ np.broadcast_to(np.asarray(leaf_values, dtype=float), mass.shape))

    def compose(self, other: "MeasureChange", label: str | None = None) -> "MeasureChange":
        """Product of factors; ``other`` must be a change relative to ``self``."""
        return MeasureChange(self.model, tuple(a * b for a, b in zip(self.factors, other.factors)),
                             label or f"{self.label}*{other.label}")


def identity_change(model, label="P") -> MeasureChange:
    return MeasureChange(model, tuple(np.ones_like(sl.prob) for sl in model.slices[:-1]), label)


def _check_positive(model, k, fac, what):
    bad = fac <= 0
    if bad.any():
        i = int(np.flatnonzero(bad.any(axis=1))[0])
        raise LatticeError(f"{what}: nonpositive density factor at node {model.node_label(k, i)}",
                           node=model.node_label(k, i))


def minimal_martingale_measure(model) -> MeasureChange:
    """Diffusion factor ``1 - phi . dW`` on every branch; jump branches untouched."""
    dW = model.dW_branch()
    factors = []
    for k, sl in enumerate(model.slices[:-1]):
        fac = 1.0 - sl.phi @ dW.T
        _check_positive(model, k, fac, "minimal martingale measure")
        factors.append(fac)
    return MeasureChange(model, tuple(factors), "P_hat")


def jump_tilt(model, ratio, base: MeasureChange | None = None, label="jump tilt") -> MeasureChange:
    """Tilt the jump branches of ``base`` by ``ratio[k]`` (shape (n, m)).

    Within each Brownian sign pattern the jump-``j`` branch is multiplied by
    ``r_j`` and the no-jump branch by ``(1 - sum r_j q_j) / (1 - sum q_j)``
    where ``q_j`` are the base conditional jump probabilities, so the
    Brownian marginal of ``base`` is preserved.
    """
    base = base or identity_change(model)
    m1 = model.m + 1
    factors = []
    for k, sl in enumerate(model.slices[:-1]):
        r = np.asarray(ratio[k], dtype=float).reshape(sl.size, model.m)
        p = base.probs(k).reshape(sl.size, -1, m1)
        tot = p.sum(axis=2, keepdims=True)
        q = p / tot  # conditional jump distribution per pattern
        nj = (1.0 - np.einsum("nsj,nj->ns", q[:, :, 1:], r)) / q[:, :, 0]
        tilt = np.concatenate([nj[:, :, None], np.broadcast_to(r[:, None, :], q[:, :, 1:].shape)], axis=2)
        fac = tilt.reshape(sl.size, -1)
        _check_positive(model, k, fac, label)
        factors.append(base.factors[k] * fac)
    return MeasureChange(model, tuple(factors), label)


def exponential_tilt_from_U(model, U, alpha, base: MeasureChange | None = None, label="Q_E_B") -> MeasureChange:
    """Minimal martingale tilt combined with jump factors ``exp(alpha U)``."""
    base = base if base is not None else minimal_martingale_measure(model)
    ratio = []
    for k, u in enumerate(U):
        au = alpha * np.asarray(u, dtype=float)
        if np.any(np.abs(au) > 700):
            i = int(np.flatnonzero(np.any(np.abs(au) > 700, axis=1))[0])
            raise NumericalError(f"exp overflow guard: |alpha U| > 700 at node {model.node_label(k, i)}",
                                 node=model.node_label(k, i))
        ratio.append(np.exp(au))
    return jump_tilt(model, ratio, base, label)


def h_ratio(u, alpha):
    """``((exp(alpha u) - 1)/alpha - u)/u`` with its Taylor branch near zero."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-6
    safe = np.where(small, 1.0, u)
    exact = (np.expm1(alpha * safe) / alpha - safe) / safe
    taylor = alpha * u / 2 + alpha**2 * u**2 / 6
    return np.where(small, taylor, exact)


def hat_measure(model, U_E, alpha, q_E: MeasureChange) -> MeasureChange:
    """Jump tilt ``1 + h(U^E)`` on top of ``Q^E``."""
    return jump_tilt(model, [1.0 + h_ratio(u, alpha) for u in U_E], q_E, "Q_hat_B")


def averaged_esscher_measure(model, increments, alpha, base: MeasureChange, nodes=32,
                             label="Q_hat_B") -> MeasureChange:
    """Average over ``s`` in ``[0, alpha]`` of the Esscher tilts ``exp(s X) / E[exp(s X)]`` of ``base``.

    ``increments[k]`` holds ``X`` per (node, branch).  The mean of ``X`` under
    the result is ``(1/alpha) log E[exp(alpha X)]`` because the derivative of
    the log-moment function is the tilted mean.  For a pure jump increment
    with jump size ``u`` the tilt ratio tends to ``1 + h(u)`` as ``dt -> 0``.
    """
    x, w = np.polynomial.legendre.leggauss(nodes)
    s_nodes = alpha * (x + 1) / 2
    w = w / 2
    factors = []
    for k in range(model.N):
        X = np.asarray(increments[k], dtype=float)
        X = X - X.mean(axis=1, keepdims=True)
        p = base.probs(k)
        fac = np.zeros_like(X)
        for s, wt in zip(s_nodes, w):
            e = np.exp(s * X)
            fac += wt * e / np.einsum("nb,nb->n", p, e)[:, None]
        _check_positive(model, k, fac, label)
        factors.append(base.factors[k] * fac)
    return MeasureChange(model, tuple(factors), label)


def relative_entropy(change: MeasureChange) -> float:
    """``H(Q|P)`` by the chain rule over steps (exact on trees and recombining lattices)."""
    mass = change.node_mass()
    total = 0.0
    for k in range(change.model.N):
        q = change.probs(k)
        total += float(mass[k] @ np.einsum("nb,nb->n", q, np.log(change.factors[k])))
    return total


def leaf_relative_entropy(change: MeasureChange) -> float:
    """``sum q log(q/p)`` over leaves; trees only."""
    change.model.require_tree()
    q = change.node_mass()[-1]
    p = identity_change(change.model).node_mass()[-1]
    return float(np.sum(q * np.log(q / p)))


def dual_objective(change: MeasureChange, B, alpha) -> float:
    return alpha * change.expectation(terminal_values(change.model, B)) - relative_entropy(change)


def martingale_check(change: MeasureChange) -> dict:
    """Largest ``|E^Q[S' - S | node]|`` over nodes, with the worst node."""
    model = change.model
    worst, where = 0.0, None
    for k in range(model.N):
        S = model.slices[k].S
        drift = change.expect_next(k, model.slices[k + 1].S) - S
        r = np.abs(drift).max(axis=1)
        i = int(np.argmax(r))
        if r[i] > worst:
            worst, where = float(r[i]), model.node_label(k, i)
    return {"max_residual": worst, "node": where}


def normalization_check(change: MeasureChange) -> float:
    """Largest deviation of a factor's conditional P-mean (and of total mass) from one."""
    model = change.model
    dev = 0.0
    for k in range(model.N):
        dev = max(dev, float(np.abs(np.einsum("nb,nb->n", model.slices[k].prob, change.factors[k]) - 1).max()))
    for mass in change.node_mass():
        dev = max(dev, abs(float(mass.sum()) - 1.0))
    return dev
