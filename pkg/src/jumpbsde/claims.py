"""Terminal claims as small arithmetic expressions over lattice coordinates.

Available names at a leaf: ``S`` (first asset), ``S1..Sd``, ``jumps`` (total
jump count), ``jumps1..jumpsm``, ``marksum`` (first component of the summed
marks), ``marksum1..marksuml`` and ``regime``.  Functions: max, min, abs, exp,
log, sqrt, where.  Comparisons give 0/1 floats.
"""

from __future__ import annotations

import ast
import operator

import numpy as np

from .errors import ConfigError

_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.Pow: operator.pow, ast.Mod: operator.mod,
    ast.BitAnd: np.logical_and, ast.BitOr: np.logical_or,
}
_CMPOPS = {
    ast.Lt: np.less, ast.LtE: np.less_equal, ast.Gt: np.greater,
    ast.GtE: np.greater_equal, ast.Eq: np.equal, ast.NotEq: np.not_equal,
}
_FUNCS = {
    "max": np.maximum, "min": np.minimum, "abs": np.abs, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "where": np.where,
}


def leaf_variables(model) -> dict:
    sl = model.slices[-1]
    env = {"S": sl.S[:, 0], "jumps": sl.counts.sum(axis=1).astype(float),
           "regime": sl.regime.astype(float)}
    for i in range(sl.S.shape[1]):
        env[f"S{i + 1}"] = sl.S[:, i]
    for j in range(sl.counts.shape[1]):
        env[f"jumps{j + 1}"] = sl.counts[:, j].astype(float)
    msum = sl.counts @ model.mark_space.marks
    env["marksum"] = msum[:, 0] if msum.shape[1] else np.zeros(sl.size)
    for i in range(msum.shape[1]):
        env[f"marksum{i + 1}"] = msum[:, i]
    return env


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise ConfigError(f"claim: unknown name {node.id!r}", key="claim.expression")
        return env[node.id]
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.BoolOp):
        op = np.logical_and if isinstance(node.op, ast.And) else np.logical_or
        out = _eval(node.values[0], env)
        for v in node.values[1:]:
            out = op(out, _eval(v, env))
        return out
    if isinstance(node, ast.Compare):
        left = _eval(node.left, env)
        out = True
        for op, comp in zip(node.ops, node.comparators):
            if type(op) not in _CMPOPS:
                break
            right = _eval(comp, env)
            out = np.logical_and(out, _CMPOPS[type(op)](left, right))
            left = right
        else:
            return out
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and not node.keywords:
        return _FUNCS[node.func.id](*[_eval(a, env) for a in node.args])
    raise ConfigError(f"claim: unsupported syntax {ast.dump(node)[:60]}", key="claim.expression")


def evaluate_claim(expression: str, model) -> np.ndarray:
    try:
        tree = ast.parse(expression, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"claim: cannot parse {expression!r}: {exc.msg}", key="claim.expression") from exc
    env = leaf_variables(model)
    with np.errstate(all="raise"):
        try:
            out = _eval(tree, env)
        except FloatingPointError as exc:
            raise ConfigError(f"claim {expression!r}: {exc}", key="claim.expression") from exc
    return np.broadcast_to(np.asarray(out, dtype=float), (model.slices[-1].size,)).copy()


def terminal_values(model, claim) -> np.ndarray:
    """Leaf values of a claim given as a number, array, callable(env) or expression."""
    n = model.slices[-1].size
    if isinstance(claim, str):
        out = evaluate_claim(claim, model)
    elif callable(claim):
        out = np.asarray(claim(leaf_variables(model)), dtype=float)
    else:
        out = np.asarray(claim, dtype=float)
    out = np.broadcast_to(out, (n,)).astype(float)
    if not np.all(np.isfinite(out)):
        raise ConfigError("claim is not finite on every leaf", key="claim")
    return out
