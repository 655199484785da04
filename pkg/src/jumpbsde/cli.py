"""Command line entry point: ``jumpbsde --config run.json --out results --command verify``."""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bsde import write_rows
from .config import load_run_config
from .errors import BudgetError, ConfigError, LatticeError, NumericalError, ValidationError
from .indifference import asymptotics_sweep, indifference_solve
from .lattice import expand
from .oracles import brute_force_dual, brute_force_primal, entropic_recursion
from .utility import solve_utility, value_function
from .verification import run_checks

COMMANDS = ("solve", "utility", "indifference", "asymptotics", "verify", "oracle")
EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="jumpbsde", description=__doc__)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--command", choices=COMMANDS, default="verify")
    p.add_argument("--alpha", help="comma separated risk aversions (first one used outside sweeps)")
    p.add_argument("--oracle", action="store_true", help="cross-check against the brute-force solvers")
    p.add_argument("--mode", choices=("euler", "dt-consistent"))
    p.add_argument("--tol", type=float)
    p.add_argument("--threads", type=int, default=1)
    return p


def _node_ids(model, k):
    return [f"{k}:{i}" for i in range(model.slices[k].size)]


def _field_rows(model, fields, slices):
    for k in slices:
        cols = [np.asarray(f[k]).reshape(model.slices[k].size, -1) for f in fields]
        for i, node in enumerate(_node_ids(model, k)):
            row = [node, model.grid.time(k)]
            for c in cols:
                row.extend(c[i].tolist())
            yield row


def _write_field(out, name, model, fields, header, slices):
    path = out / f"{name}.csv"
    write_rows(path, ["node", "t"] + header, _field_rows(model, fields, slices))
    return path.name


def _cols(prefix, n):
    return [f"{prefix}{i + 1}" for i in range(n)]


def _run_solve(rc, model, out, alpha):
    res = solve_utility(model, rc.claim, alpha, mode=rc.mode, tol=rc.tol, max_iter=rc.max_iter)
    N = model.N
    files = [
        _write_field(out, "Y", model, [res.Y], ["Y"], range(N + 1)),
        _write_field(out, "Z", model, [res.Z], _cols("Z", model.d), range(N)),
    ]
    if model.m:
        files.append(_write_field(out, "U", model, [res.U], _cols("U", model.m), range(N)))
    return res, files, {"Y0": res.y0}


def _run_utility(rc, model, out, alpha):
    res, files, summary = _run_solve(rc, model, out, alpha)
    N = model.N
    files.append(_write_field(out, "theta", model, [res.theta], _cols("theta", model.d), range(N)))
    files.append(_write_field(out, "value", model, [[res.value(k) for k in range(N + 1)]], ["V"], range(N + 1)))
    dens = res.dual.cumulative_density()
    files.append(_write_field(out, "dual_density", model, [dens], ["density"], range(N + 1)))
    summary.update({"V0": float(value_function(rc.x, res.y0, alpha)), "measure": res.dual.label})
    return files, summary


def _run_indifference(rc, model, out, alpha):
    res = indifference_solve(model, rc.claim, alpha, route=rc.route, mode=rc.mode)
    N = model.N
    files = [_write_field(out, "pi", model, [res.pi], ["pi"], range(N + 1)),
             _write_field(out, "psi", model, [res.psi], _cols("psi", model.d), range(N))]
    return files, {"pi0": res.pi0, "route": res.route, "measure": res.q_E.label}


def _run_asymptotics(rc, model, out, alphas, threads):
    if not alphas:
        raise ConfigError("asymptotics needs a risk-aversion grid (--alpha or experiment.alphas)", key="experiment.alphas")
    rep = asymptotics_sweep(model, rc.claim, alphas, mode=rc.mode, threads=threads)
    rep.to_csv(out / "asymptotics.csv")
    return ["asymptotics.csv"], {"slopes": rep.slopes, "ratio_variation": rep.ratio_variation}


def _run_oracle(rc, model, out, alpha):
    tree = model if model.is_tree else expand(model)
    bf = brute_force_primal(tree, rc.claim, alpha, rc.x)
    rec = entropic_recursion(tree, rc.claim, alpha)
    sol = solve_utility(tree, rc.claim, alpha, mode=rc.mode)
    rows = [["brute_force_primal", bf.Y[0][0], bf.theta[0][0][0]],
            ["entropic_recursion", rec.Y[0][0], rec.theta[0][0][0]],
            [f"solver_{rc.mode}", sol.y0, sol.theta[0][0][0]]]
    summary = {"primal_vs_recursion": max(float(np.abs(a - b).max()) for a, b in zip(bf.Y, rec.Y)),
               "primal_vs_solver": abs(bf.Y[0][0] - sol.y0), "newton_stalls": bf.stalls}
    try:
        grid = brute_force_dual(model, rc.claim, alpha)
    except BudgetError as exc:
        summary["dual_grid"] = f"skipped: {exc}"
    else:
        rows.append(["brute_force_dual (objective / alpha)", grid.objective / alpha, float("nan")])
        summary["dual_grid_objective"] = grid.objective
    write_rows(out / "oracle.csv", ["method", "Y0", "theta0"], rows)
    return ["oracle.csv"], summary


def _run_verify(rc, model, alpha, alphas):
    checks = run_checks(model, rc.claim, alpha, alphas)
    width = max(len(c.name) for c in checks)
    print(f"{'check':<{width}}  {'value':>10}  {'tol':>8}  status")
    for c in checks:
        name, value, tol, status, note = c.row()
        print(f"{name:<{width}}  {value:>10}  {tol:>8}  {status}" + (f"  ({note})" if note else ""))
    failed = [c for c in checks if c.passed is False]
    return checks, failed


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out = Path(args.out)
    started = time.perf_counter()
    try:
        raw = Path(args.config).read_bytes()
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rc = load_run_config(args.config)
        if args.mode:
            rc = type(rc)(**{**rc.__dict__, "mode": args.mode})
        if args.tol is not None:
            rc = type(rc)(**{**rc.__dict__, "tol": args.tol})
        alphas = [float(a) for a in args.alpha.split(",")] if args.alpha else list(rc.alphas)
        alpha = alphas[0] if args.alpha else rc.alpha
        model = rc.build()
        out.mkdir(parents=True, exist_ok=True)
        summary, files, status = {}, [], EXIT_OK
        if args.command == "solve":
            _, files, summary = _run_solve(rc, model, out, alpha)
        elif args.command == "utility":
            files, summary = _run_utility(rc, model, out, alpha)
        elif args.command == "indifference":
            files, summary = _run_indifference(rc, model, out, alpha)
        elif args.command == "asymptotics":
            files, summary = _run_asymptotics(rc, model, out, alphas, args.threads)
        elif args.command == "oracle":
            files, summary = _run_oracle(rc, model, out, alpha)
        else:
            checks, failed = _run_verify(rc, model, alpha, alphas if len(alphas) > 1 else rc.alphas)
            write_rows(out / "verify.csv", ["check", "value", "tol", "status", "note"], (c.row() for c in checks))
            files = ["verify.csv"]
            summary = {"checks": len(checks), "failed": [c.name for c in failed]}
            status = EXIT_VERIFY if failed else EXIT_OK
        if args.oracle and args.command != "oracle":
            more, osum = _run_oracle(rc, model, out, alpha)
            files += more
            summary["oracle"] = osum
    except (ConfigError, LatticeError, BudgetError) as exc:
        key = getattr(exc, "key", None)
        print(f"config error{f' [{key}]' if key else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest = {
        "command": args.command,
        "config": str(args.config),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "versions": {"jumpbsde": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "tolerances": {"picard": rc.tol, "max_iter": rc.max_iter},
        "mode": rc.mode,
        "alpha": alpha,
        "outputs": files,
        "summary": summary,
        "timing_seconds": round(time.perf_counter() - started, 6),
        "exit_status": status,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
