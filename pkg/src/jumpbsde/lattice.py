"""Finite scenario lattice for a Brownian market with marked jumps.

Each step branches into ``2**d`` equiprobable Brownian sign patterns
(increments of +-sqrt(dt) per component) crossed with ``m + 1`` jump
outcomes (no jump, or one jump carrying mark ``e_j``).  Under P the jump of
mark ``j`` has probability ``zeta * lambda_j * dt`` at the current node, and
asset prices move multiplicatively, ``S' = S * (1 + sigma @ (phi dt + dW))``.

Branch ``b`` of a node encodes the pair ``(s, j)`` as ``b = s * (m + 1) + j``
where ``s`` indexes the sign pattern and ``j == 0`` means "no jump".

When the market coefficients are constant and the intensity depends only on
the jump counts, nodes with equal pattern/jump counts recombine; otherwise
the lattice is a full history tree.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, LatticeError, ValidationError

DEFAULT_NODE_BUDGET = 10**7
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if isinstance(self.steps, bool) or int(self.steps) != self.steps or self.steps < 1:
            raise LatticeError(f"step count must be an integer >= 1, got {self.steps!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise LatticeError(f"horizon must be positive and finite, got {self.horizon!r}")
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, k: int) -> float:
        # k = N gives the horizon exactly
        return self.horizon * k / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.array([self.time(k) for k in range(self.steps + 1)])


@dataclass(frozen=True, eq=False)
class MarkSpace:
    """Finite mark set with weights ``lambda_j``; ``marks`` has shape (m, l)."""

    marks: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks[:, None]
        if marks.size == 0:
            marks = np.zeros((0, 1))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if weights.shape[0] != marks.shape[0]:
            raise LatticeError(f"{marks.shape[0]} marks but {weights.shape[0]} weights")
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise LatticeError("mark weights must be finite and nonnegative")
        for j, e in enumerate(marks):
            if not np.any(e != 0):
                raise LatticeError(f"mark {j + 1} is zero; marks live in R^l without the origin")
        marks.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)

    @property
    def m(self) -> int:
        return self.marks.shape[0]

    @property
    def dim(self) -> int:
        return self.marks.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass(frozen=True, eq=False)
class NodeState:
    """What a coefficient may look at when evaluated on a slice of nodes."""

    k: int
    t: float
    S: np.ndarray  # (n, d)
    counts: np.ndarray  # (n, m) jumps per mark so far
    regime: np.ndarray  # (n,)
    mark_sum: np.ndarray  # (n, l)

    @property
    def size(self) -> int:
        return self.S.shape[0]


class Coefficient:
    """A node-wise coefficient.

    ``fn(state) -> array`` must broadcast to ``(n, *shape)``.  ``constant``
    marks coefficients that do not vary across nodes or time; ``markov``
    marks coefficients that depend on the node only through time, jump counts
    and prices, which is what lattice recombination needs.
    """

    def __init__(self, fn, shape, *, constant=False, markov=False, description="custom"):
        self.fn = fn
        self.shape = tuple(shape)
        self.constant = constant
        self.markov = markov or constant
        self.description = description

    def __call__(self, state: NodeState) -> np.ndarray:
        out = np.asarray(self.fn(state), dtype=float)
        return np.broadcast_to(out, (state.size,) + self.shape).copy()

    def __repr__(self):
        return f"Coefficient({self.description})"


def _const(value, shape, description):
    value = np.broadcast_to(np.asarray(value, dtype=float), shape).copy()
    return Coefficient(lambda st: value, shape, constant=True, description=description)


def _regime_table(values, shape, n_states, key):
    table = np.array([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in values])
    if table.shape[0] != n_states:
        raise ConfigError(f"{key}: {table.shape[0]} regime values for {n_states} regime states", key=key)
    return table


def _sigma_value(v, d, key):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        return a * np.eye(d)
    if a.ndim == 1:
        if a.shape[0] != d:
            raise ConfigError(f"{key}: expected {d} diagonal entries", key=key)
        return np.diag(a)
    if a.shape != (d, d):
        raise ConfigError(f"{key}: expected a {d}x{d} matrix", key=key)
    return a


def make_sigma(spec, d, n_states=1) -> Coefficient:
    if isinstance(spec, Coefficient):
        return spec
    if callable(spec):
        return Coefficient(spec, (d, d), description="callable sigma")
    if isinstance(spec, dict):
        kind = spec.get("type", "constant")
        if kind == "constant":
            return _const(_sigma_value(spec["value"], d, "model.sigma.value"), (d, d), "constant sigma")
        if kind == "regime":
            table = np.array([_sigma_value(v, d, "model.sigma.values") for v in spec["values"]])
            if table.shape[0] != n_states:
                raise ConfigError("model.sigma.values: one entry per regime state required",
                                  key="model.sigma.values")
            return Coefficient(lambda st: table[st.regime], (d, d), description="regime sigma")
        raise ConfigError(f"model.sigma: unknown type {kind!r}", key="model.sigma.type")
    return _const(_sigma_value(spec, d, "model.sigma"), (d, d), "constant sigma")


def make_phi(spec, d, n_states=1) -> Coefficient:
    if isinstance(spec, Coefficient):
        return spec
    if callable(spec):
        return Coefficient(spec, (d,), description="callable phi")
    if isinstance(spec, dict):
        kind = spec.get("type", "constant")
        if kind == "constant":
            return _const(spec["value"], (d,), "constant phi")
        if kind == "regime":
            table = _regime_table(spec["values"], (d,), n_states, "model.phi.values")
            return Coefficient(lambda st: table[st.regime], (d,), description="regime phi")
        raise ConfigError(f"model.phi: unknown type {kind!r}", key="model.phi.type")
    return _const(spec, (d,), "constant phi")


def make_zeta(spec, m, n_states=1) -> Coefficient:
    if isinstance(spec, Coefficient):
        return spec
    if callable(spec):
        return Coefficient(spec, (m,), markov=getattr(spec, "markov", False), description="callable zeta")
    if isinstance(spec, dict):
        kind = spec.get("type", "constant")
        if kind == "constant":
            return _const(spec["value"], (m,), "constant zeta")
        if kind == "regime":
            table = _regime_table(spec["values"], (m,), n_states, "model.zeta.values")
            return Coefficient(lambda st: table[st.regime], (m,), markov=True, description="regime zeta")
        if kind == "self_exciting":
            base = np.broadcast_to(np.asarray(spec["base"], dtype=float), (m,))
            excite = np.broadcast_to(np.asarray(spec.get("excitation", 0.0), dtype=float), (m,))
            cap = float(spec.get("cap", np.inf))

            def fn(st):
                total = st.counts.sum(axis=1, keepdims=True)
                return np.minimum(base + excite * total, cap)

            return Coefficient(fn, (m,), markov=True, description="self-exciting zeta")
        raise ConfigError(f"model.zeta: unknown type {kind!r}", key="model.zeta.type")
    return _const(spec, (m,), "constant zeta")


@dataclass(frozen=True)
class LatticeConfig:
    horizon: float
    steps: int
    S0: tuple = (1.0,)
    sigma: Any = 0.2
    phi: Any = 0.0
    marks: tuple = ()
    weights: tuple = ()
    zeta: Any = 1.0
    regime_states: int = 1
    regime_initial: int = 0
    recombine: Any = "auto"
    node_budget: int = DEFAULT_NODE_BUDGET

    @property
    def d(self) -> int:
        return len(np.atleast_1d(self.S0))

    @classmethod
    def from_dict(cls, doc: dict) -> "LatticeConfig":
        """Build from the ``model`` block of a configuration document."""
        if not isinstance(doc, dict):
            raise ConfigError("model block must be an object", key="model")
        for key in ("horizon", "steps"):
            if key not in doc:
                raise ConfigError(f"missing required key 'model.{key}'", key=f"model.{key}")
        known = {"horizon", "steps", "S0", "sigma", "phi", "marks", "weights", "zeta",
                 "regime", "recombine", "node_budget"}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown key 'model.{key}'", key=f"model.{key}")
        regime = doc.get("regime") or {}
        marks = doc.get("marks", [])
        weights = doc.get("weights", [1.0] * len(marks))
        try:
            return cls(
                horizon=float(doc["horizon"]),
                steps=doc["steps"],
                S0=tuple(np.atleast_1d(np.asarray(doc.get("S0", [1.0]), dtype=float)).tolist()),
                sigma=doc.get("sigma", 0.2),
                phi=doc.get("phi", 0.0),
                marks=tuple(tuple(np.atleast_1d(e).tolist()) for e in marks),
                weights=tuple(float(w) for w in weights),
                zeta=doc.get("zeta", 1.0),
                regime_states=int(regime.get("states", 1)),
                regime_initial=int(regime.get("initial", 0)),
                recombine=doc.get("recombine", "auto"),
                node_budget=int(doc.get("node_budget", DEFAULT_NODE_BUDGET)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model block: {exc}", key="model") from exc


@dataclass(frozen=True, eq=False)
class Slice:
    """All nodes at one time index.

    ``children`` and ``prob`` are ``(n, B)`` arrays (absent on the terminal
    slice): child indices into the next slice and branch probabilities under P.
    """

    k: int
    t: float
    S: np.ndarray
    counts: np.ndarray
    regime: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    zeta: np.ndarray
    children: np.ndarray | None = None
    prob: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True, eq=False)
class LatticeNode:
    k: int
    index: int
    t: float
    label: str
    S: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    zeta: np.ndarray
    counts: np.ndarray
    prob: np.ndarray | None


@dataclass(frozen=True, eq=False)
class LatticeModel:
    grid: TimeGrid
    mark_space: MarkSpace
    slices: tuple
    is_tree: bool
    config: LatticeConfig | None = None
    phi_bound: float = 0.0
    c_nu: float = 0.0

    # -- structure ---------------------------------------------------------
    @property
    def d(self) -> int:
        return self.slices[0].S.shape[1]

    @property
    def m(self) -> int:
        return self.mark_space.m

    @property
    def n_diff(self) -> int:
        return 2**self.d

    @property
    def n_branch(self) -> int:
        return self.n_diff * (self.m + 1)

    @property
    def N(self) -> int:
        return self.grid.steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def node_count(self) -> int:
        return sum(s.size for s in self.slices)

    @property
    def lam(self) -> np.ndarray:
        return self.mark_space.weights

    @property
    def patterns(self) -> np.ndarray:
        """Sign patterns, shape (2**d, d), entries +-1."""
        return _patterns(self.d)

    @property
    def dW(self) -> np.ndarray:
        """Brownian increment per diffusion pattern, shape (2**d, d)."""
        return self.patterns * math.sqrt(self.dt)

    @property
    def branch_diff(self) -> np.ndarray:
        return np.arange(self.n_branch) // (self.m + 1)

    @property
    def branch_jump(self) -> np.ndarray:
        return np.arange(self.n_branch) % (self.m + 1)

    @property
    def jump_indicator(self) -> np.ndarray:
        """``(B, m)`` indicator of a mark-``j`` jump on each branch."""
        ind = np.zeros((self.n_branch, self.m))
        bj = self.branch_jump
        for j in range(self.m):
            ind[bj == j + 1, j] = 1.0
        return ind

    def dW_branch(self) -> np.ndarray:
        """``(B, d)`` Brownian increment on each branch."""
        return self.dW[self.branch_diff]

    def dW_hat(self, k: int) -> np.ndarray:
        """``(n, B, d)`` increments of the drifted driver ``W + int phi dt``."""
        sl = self.slices[k]
        return self.dW_branch()[None, :, :] + sl.phi[:, None, :] * self.dt

    def next_values(self, k: int, values: np.ndarray) -> np.ndarray:
        """Gather values of slice ``k + 1`` onto the branches of slice ``k``."""
        return np.asarray(values)[self.slices[k].children]

    def jump_mass(self, k: int) -> np.ndarray:
        """``(n, m)`` P-probability of a mark-``j`` jump over step ``k``."""
        return self.slices[k].zeta * self.lam[None, :] * self.dt

    def mark_sum(self, k: int) -> np.ndarray:
        return self.slices[k].counts @ self.mark_space.marks

    # -- nodes -------------------------------------------------------------
    def node_label(self, k: int, i: int) -> str:
        if self.is_tree:
            B = self.n_branch
            digits = []
            for _ in range(k):
                digits.append(i % B)
                i //= B
            return "root" + "".join("/" + self.branch_label(b) for b in reversed(digits))
        sl = self.slices[k]
        return f"k={k} jumps={sl.counts[i].tolist()} S={np.round(sl.S[i], 12).tolist()}"

    def branch_label(self, b: int) -> str:
        s, j = divmod(b, self.m + 1)
        signs = "".join("+" if p > 0 else "-" for p in self.patterns[s])
        return signs + ("" if j == 0 else f"J{j}")

    def node(self, k: int, i: int) -> LatticeNode:
        sl = self.slices[k]
        return LatticeNode(k=k, index=i, t=sl.t, label=self.node_label(k, i), S=sl.S[i],
                           phi=sl.phi[i], sigma=sl.sigma[i], zeta=sl.zeta[i],
                           counts=sl.counts[i], prob=None if sl.prob is None else sl.prob[i])

    def leaf_ancestors(self, k: int) -> np.ndarray:
        """Index at slice ``k`` of the ancestor of every leaf (trees only)."""
        self.require_tree()
        n_leaves = self.slices[-1].size
        return np.arange(n_leaves) // (self.n_branch ** (self.N - k))

    def require_tree(self):
        if not self.is_tree:
            raise LatticeError("path-dependent quantity requested on a recombining lattice; "
                               "call expand() first")

    def with_slice(self, k: int, **fields) -> "LatticeModel":
        """Copy with fields of slice ``k`` replaced; no validation is performed."""
        slices = list(self.slices)
        slices[k] = replace(slices[k], **fields)
        return replace(self, slices=tuple(slices))


def _patterns(d: int) -> np.ndarray:
    return np.array(list(itertools.product((1.0, -1.0), repeat=d))).reshape(-1, d)


def _as_config(config) -> LatticeConfig:
    if isinstance(config, LatticeConfig):
        return config
    if isinstance(config, dict):
        doc = config.get("model", config)
        return LatticeConfig.from_dict(doc)
    raise ConfigError("model configuration must be a LatticeConfig or a dict", key="model")


def build_lattice(config) -> LatticeModel:
    """Build and validate the scenario lattice described by ``config``."""
    cfg = _as_config(config)
    grid = TimeGrid(cfg.horizon, cfg.steps)
    S0 = np.atleast_1d(np.asarray(cfg.S0, dtype=float))
    d = S0.shape[0]
    if np.any(S0 <= 0):
        raise LatticeError("initial prices must be strictly positive", node="root")
    marks = MarkSpace(np.asarray(cfg.marks, dtype=float).reshape(len(cfg.marks), -1)
                      if len(cfg.marks) else np.zeros((0, 1)), np.asarray(cfg.weights, dtype=float))
    m = marks.m
    if cfg.regime_states < 1 or not 0 <= cfg.regime_initial < cfg.regime_states:
        raise LatticeError("regime states must be >= 1 and the initial state within range")
    phi_c = make_phi(cfg.phi, d, cfg.regime_states)
    sigma_c = make_sigma(cfg.sigma, d, cfg.regime_states)
    zeta_c = make_zeta(cfg.zeta, m, cfg.regime_states)

    can_recombine = phi_c.constant and sigma_c.constant and zeta_c.markov
    if cfg.recombine == "auto":
        tree = not can_recombine
    elif cfg.recombine in (True, "true", "yes"):
        if not can_recombine:
            raise LatticeError("recombination requested but coefficients are path dependent")
        tree = False
    else:
        tree = True

    n_diff = 2**d
    B = n_diff * (m + 1)
    N = grid.steps
    dt = grid.dt
    sqdt = math.sqrt(dt)
    if tree:
        predicted = sum(B**k for k in range(N + 1))
        if predicted > cfg.node_budget:
            raise LatticeError(f"tree would have {predicted} nodes, above the budget of {cfg.node_budget}",
                               bound=cfg.node_budget)
    dW = _patterns(d) * sqdt
    branch_diff = np.arange(B) // (m + 1)
    branch_jump = np.arange(B) % (m + 1)
    onehot_jump = np.zeros((m + 1, m), dtype=np.int64)
    for j in range(m):
        onehot_jump[j + 1, j] = 1
    onehot_diff = np.eye(n_diff, dtype=np.int64)

    S = S0[None, :].copy()
    counts = np.zeros((1, m), dtype=np.int64)
    pattern_counts = np.zeros((1, n_diff), dtype=np.int64)
    slices = []
    total = 0
    phi_bound = 0.0
    c_nu = 0.0

    labels = ["root"] if tree else None
    for k in range(N + 1):
        total += S.shape[0]
        if total > cfg.node_budget:
            raise LatticeError(f"lattice exceeds the node budget of {cfg.node_budget}", bound=cfg.node_budget)
        regime = (cfg.regime_initial + counts.sum(axis=1)) % cfg.regime_states
        state = NodeState(k=k, t=grid.time(k), S=S, counts=counts, regime=regime,
                          mark_sum=counts @ marks.marks)
        phi = phi_c(state)
        sigma = sigma_c(state)
        zeta = zeta_c(state)
        if k == N:
            slices.append(_freeze(Slice(k, grid.time(k), S, counts, regime, phi, sigma, zeta)))
            break

        bad = np.any(np.abs(phi) * sqdt >= 1.0, axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LatticeError(f"|phi| sqrt(dt) = {np.abs(phi[i]).max() * sqdt:.6g} >= 1 at node "
                               f"{_lbl(labels, k, i)}", node=_lbl(labels, k, i), bound=1.0)
        bad = np.any(np.abs(sigma) * sqdt >= 1.0, axis=(1, 2))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LatticeError(f"|sigma| sqrt(dt) = {np.abs(sigma[i]).max() * sqdt:.6g} >= 1 at node "
                               f"{_lbl(labels, k, i)}", node=_lbl(labels, k, i), bound=1.0)
        if np.any(zeta < 0) or np.any(~np.isfinite(zeta)):
            i = int(np.flatnonzero(np.any((zeta < 0) | ~np.isfinite(zeta), axis=1))[0])
            raise LatticeError(f"negative or non-finite intensity at node {_lbl(labels, k, i)}",
                               node=_lbl(labels, k, i))
        dets = np.linalg.det(sigma) if d > 1 else sigma[:, 0, 0]
        conds = np.linalg.cond(sigma) if d > 1 else np.where(dets != 0, 1.0, np.inf)
        bad = (dets == 0) | ~np.isfinite(conds) | (conds > 1e12)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LatticeError(f"volatility matrix is not invertible at node {_lbl(labels, k, i)}",
                               node=_lbl(labels, k, i))
        jm = zeta * marks.weights[None, :] * dt
        no_jump = 1.0 - jm.sum(axis=1)
        bad = no_jump <= 0
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise LatticeError(f"sum zeta lambda dt = {1 - no_jump[i]:.6g} >= 1 at node {_lbl(labels, k, i)}: "
                               "no-jump branch nonpositive", node=_lbl(labels, k, i), bound=1.0)
        phi_bound = max(phi_bound, float(np.sqrt((phi**2).sum(axis=1)).max()))
        c_nu = max(c_nu, float(zeta.max()) if m else 0.0)

        pj = np.concatenate([no_jump[:, None], jm], axis=1)  # (n, m+1)
        prob = np.repeat(pj[:, None, :] / n_diff, n_diff, axis=1).reshape(-1, B)
        growth = 1.0 + np.einsum("nij,nsj->nsi", sigma, phi[:, None, :] * dt + dW[None, :, :])
        S_diff = S[:, None, :] * growth  # (n, n_diff, d)
        if np.any(S_diff <= 0):
            i = int(np.flatnonzero(np.any(S_diff <= 0, axis=(1, 2)))[0])
            raise LatticeError(f"price update leaves (0, inf) at node {_lbl(labels, k, i)}",
                               node=_lbl(labels, k, i))
        n = S.shape[0]
        S_next = S_diff[:, branch_diff, :].reshape(n * B, d)
        counts_next = (counts[:, None, :] + onehot_jump[branch_jump][None]).reshape(n * B, m)
        pat_next = (pattern_counts[:, None, :] + onehot_diff[branch_diff][None]).reshape(n * B, n_diff)
        if tree:
            children = np.arange(n * B).reshape(n, B)
            if labels is not None and n * B <= 200_000:
                blabels = [_branch_label(b, m, d) for b in range(B)]
                labels = [p + "/" + bl for p in labels for bl in blabels]
            else:
                labels = None
        else:
            keys = np.concatenate([pat_next, counts_next], axis=1)
            uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
            inverse = inverse.reshape(-1)
            # recombination must be exact: all merged nodes share prices
            dev = np.abs(S_next - S_next[first][inverse]).max() if n else 0.0
            if dev > 1e-12 * max(1.0, float(np.abs(S_next).max())):
                raise LatticeError("recombined nodes disagree on prices; use a tree")
            children = inverse.reshape(n, B)
            S_next = S_next[first]
            counts_next = counts_next[first]
            pat_next = pat_next[first]
        slices.append(_freeze(Slice(k, grid.time(k), S, counts, regime, phi, sigma, zeta, children, prob)))
        S, counts, pattern_counts = S_next, counts_next, pat_next

    model = LatticeModel(grid=grid, mark_space=marks, slices=tuple(slices), is_tree=tree, config=cfg,
                         phi_bound=phi_bound, c_nu=c_nu)
    validate_model(model)
    return model


def _lbl(labels, k, i):
    if labels is not None and i < len(labels):
        return labels[i]
    return f"k={k} node {i}"


def _branch_label(b, m, d):
    s, j = divmod(b, m + 1)
    signs = "".join("+" if p > 0 else "-" for p in _patterns(d)[s])
    return signs + ("" if j == 0 else f"J{j}")


def _freeze(sl: Slice) -> Slice:
    for name in ("S", "counts", "regime", "phi", "sigma", "zeta", "children", "prob"):
        a = getattr(sl, name)
        if a is not None:
            a.setflags(write=False)
    return sl


def expand(model: LatticeModel) -> LatticeModel:
    """Unfold a recombining lattice into the equivalent history tree."""
    if model.is_tree:
        return model
    if model.config is None:
        raise LatticeError("cannot expand a lattice without its configuration")
    return build_lattice(replace(model.config, recombine=False))


@dataclass
class ValidationReport:
    ok: bool
    issues: list = field(default_factory=list)
    c_nu: float = 0.0
    min_branch_prob: float = 1.0
    prob_sum_residual: float = 0.0
    drift_residual: float = 0.0
    jump_residual: float = 0.0
    independence_residual: float = 0.0
    min_price: float = np.inf

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "issues"} | {"issues": len(self.issues)}


def validate_model(model: LatticeModel, raise_on_error: bool = True, tol: float = 1e-13) -> ValidationReport:
    """Check every lattice invariant by a full scan of the nodes."""
    rep = ValidationReport(ok=True)
    issues = rep.issues
    dW = model.dW_branch()
    ind = model.jump_indicator
    B = model.n_branch
    for k, sl in enumerate(model.slices):
        if np.any(sl.S <= 0):
            i = int(np.flatnonzero(np.any(sl.S <= 0, axis=1))[0])
            issues.append(("price positivity", model.node_label(k, i), f"S = {sl.S[i].tolist()}"))
        rep.min_price = min(rep.min_price, float(sl.S.min()))
        if model.m:
            if np.any(sl.zeta < 0):
                i = int(np.flatnonzero(np.any(sl.zeta < 0, axis=1))[0])
                issues.append(("intensity nonnegative", model.node_label(k, i), f"zeta = {sl.zeta[i].tolist()}"))
        if sl.prob is None:
            continue
        rep.c_nu = max(rep.c_nu, float(sl.zeta.max()) if model.m else 0.0)
        jm = model.jump_mass(k)
        implied_no_jump = 1.0 - jm.sum(axis=1)
        if np.any(implied_no_jump <= 0):
            i = int(np.flatnonzero(implied_no_jump <= 0)[0])
            issues.append(("no-jump branch nonpositive", model.node_label(k, i),
                           f"sum zeta lambda dt = {1 - implied_no_jump[i]:.6g}"))
        p = sl.prob
        rep.min_branch_prob = min(rep.min_branch_prob, float(p.min()))
        if np.any(p <= 0):
            i = int(np.flatnonzero(np.any(p <= 0, axis=1))[0])
            issues.append(("branch probability positive", model.node_label(k, i), f"min = {p[i].min():.3g}"))
        s = np.abs(p.sum(axis=1) - 1.0)
        rep.prob_sum_residual = max(rep.prob_sum_residual, float(s.max()))
        drift = np.abs(p @ dW)
        rep.drift_residual = max(rep.drift_residual, float(drift.max()))
        if model.m:
            jr = np.abs(p @ ind - jm)
            rep.jump_residual = max(rep.jump_residual, float(jr.max()))
            if jr.max() > tol:
                i = int(np.argmax(jr.max(axis=1)))
                issues.append(("jump compensator", model.node_label(k, i), f"residual {jr.max():.3g}"))
        # sign patterns equiprobable and independent of the jump outcome
        pr = p.reshape(-1, model.n_diff, model.m + 1)
        indep = np.abs(pr - pr.mean(axis=1, keepdims=True)).max()
        rep.independence_residual = max(rep.independence_residual, float(indep))
        if s.max() > tol:
            i = int(np.argmax(s))
            issues.append(("probabilities sum to one", model.node_label(k, i), f"residual {s[i]:.3g}"))
        if drift.max() > tol:
            i = int(np.argmax(drift.max(axis=1)))
            issues.append(("Brownian increment mean zero", model.node_label(k, i), f"residual {drift.max():.3g}"))
        if indep > tol:
            issues.append(("diffusion/jump independence", f"slice {k}", f"residual {indep:.3g}"))
        sig = sl.sigma
        det = np.linalg.det(sig)
        if np.any(det == 0):
            i = int(np.flatnonzero(det == 0)[0])
            issues.append(("volatility invertible", model.node_label(k, i), "singular"))
        if sl.children.shape != (sl.size, B) or sl.children.max() >= model.slices[k + 1].size:
            issues.append(("tree structure", f"slice {k}", "children index out of range"))
    rep.ok = not issues
    if issues and raise_on_error:
        raise ValidationError(issues, rep)
    return rep


def theta_of_shares(shares, node: LatticeNode) -> np.ndarray:
    """Integrand against the drifted driver for a position of ``shares`` assets."""
    shares = np.asarray(shares, dtype=float)
    return node.sigma.T @ (node.S * shares)


def shares_of_theta(theta, node: LatticeNode) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    try:
        return np.linalg.solve(node.sigma.T, theta) / node.S
    except np.linalg.LinAlgError as exc:
        raise LatticeError(f"singular volatility at node {node.label}", node=node.label) from exc


def shares_field(model: LatticeModel, theta: Sequence[np.ndarray]) -> list:
    """Vectorised ``shares_of_theta`` over every non-terminal slice."""
    out = []
    for k, th in enumerate(theta):
        sl = model.slices[k]
        out.append(np.linalg.solve(np.swapaxes(sl.sigma, 1, 2), th[..., None])[..., 0] / sl.S)
    return out


def load_document(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}",
                          key="schema_version")
    if "model" not in doc:
        raise ConfigError("missing required key 'model'", key="model")
    return doc
